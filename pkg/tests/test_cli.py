import json

import numpy as np
import pytest
import torch

from gtl.cli import main
from gtl.io import read_csv, read_json, read_sequences, read_stats
from gtl.nets import load_model

TINY = {
    "data": {"n_source": 300, "n_target": 20},
    "denoiser": {"width": 16, "layers": 1, "heads": 2},
    "aux": {"width": 16, "layers": 1, "heads": 2},
    "guidance": {"steps": 10},
    "sample": {"count": 64, "batch_size": 64},
}


def _gtl(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    out = root / "run"
    base = ("--config", cfg, "--out", out, "--seed", 1)
    assert _gtl("gen-data", *base) == 0
    for stage in ("source", "classifier", "ratio", "planner"):
        assert _gtl("train", "--stage", stage, "--steps", 20, *base) == 0
    return {"root": root, "cfg": cfg, "out": out, "base": base}


def test_gen_data_is_reproducible(run, tmp_path):
    other = tmp_path / "again"
    assert _gtl("gen-data", "--config", run["cfg"], "--out", other, "--seed", 1) == 0
    for name in ("source.txt", "target.txt"):
        assert (other / name).read_bytes() == (run["out"] / name).read_bytes()


def test_target_file_has_one_line_per_sequence(run):
    lines = (run["out"] / "target.txt").read_text().splitlines()
    assert lines[0].startswith("#vocab 5 len 20")
    assert len(lines[1:]) == 20


def test_invalid_spec_exits_with_validation_code(tmp_path, capsys):
    assert _gtl("gen-data", "--out", tmp_path, "--set", "data.diag_src=1.5") == 2
    assert "error" in capsys.readouterr().err


def test_unknown_config_key_is_rejected(tmp_path):
    assert _gtl("gen-data", "--out", tmp_path, "--set", "data.colour=3") == 2


def test_ratio_without_classifiers_names_the_missing_stage(run, tmp_path, capsys):
    fresh = tmp_path / "fresh"
    assert _gtl("gen-data", "--config", run["cfg"], "--out", fresh) == 0
    assert _gtl("train", "--stage", "ratio", "--steps", 1, "--config", run["cfg"], "--out", fresh) == 3
    assert "train classifier first" in capsys.readouterr().err


def test_missing_dataset_is_a_dependency_error(tmp_path):
    assert _gtl("train", "--stage", "source", "--steps", 1, "--out", tmp_path) == 3


def test_source_training_is_reproducible(run, tmp_path):
    other = tmp_path / "twin"
    assert _gtl("gen-data", "--config", run["cfg"], "--out", other, "--seed", 1) == 0
    assert _gtl("train", "--stage", "source", "--steps", 20, "--config", run["cfg"], "--out", other,
                "--seed", 1) == 0
    assert (other / "losses_source.csv").read_text() == (run["out"] / "losses_source.csv").read_text()


def test_finetune_for_zero_epochs_copies_the_source(run):
    assert _gtl("train", "--stage", "finetune", "--epochs", 0, *run["base"]) == 0
    src, _ = load_model(run["out"] / "source.npz")
    tuned, _ = load_model(run["out"] / "finetuned.npz")
    for (k, a), (_, b) in zip(src.state_dict().items(), tuned.state_dict().items()):
        assert torch.equal(a, b), k


def test_sample_variants_write_declared_headers(run):
    for variant in ("naive", "topn", "planner"):
        assert _gtl("sample", "--variant", variant, "--gamma", 1.0, *run["base"]) == 0
        seqs, header = read_sequences(run["out"] / f"samples_{variant}.txt")
        assert header["variant"] == variant and header["seed"] == "1"
        assert {"vocab", "len", "gamma", "n_ratio"} <= set(header)
        assert seqs.shape == (64, 20)
    stats = read_stats(run["out"] / "stats_planner.txt")
    assert int(stats["steps_per_trajectory"]) == 20
    assert int(stats["planner_calls"]) == 64 * 20


def test_gamma_zero_is_flagged(run):
    assert _gtl("sample", "--gamma", 0, "--tag", "plain", *run["base"]) == 0
    stats = read_stats(run["out"] / "stats_plain.txt")
    assert stats["flag"] == "guidance-inactive" and stats["guidance_active"] == "0"
    assert int(stats["ratio_calls"]) == 0


def test_outputs_carry_config_and_manifest(run):
    cfg = read_json(run["out"] / "config.json")
    manifest = read_json(run["out"] / "manifest.json")
    assert cfg["seed"] == 1 and cfg["data"]["n_target"] == 20
    assert {"run_id", "config_hash", "code_version", "wall_clock_s", "artifacts"} <= set(manifest)


def test_rerun_reproduces_samples_bitwise(run):
    assert _gtl("sample", "--gamma", 2.0, "--tag", "a", *run["base"]) == 0
    assert _gtl("sample", "--gamma", 2.0, "--tag", "b", *run["base"]) == 0
    assert (run["out"] / "samples_a.txt").read_bytes() == (run["out"] / "samples_b.txt").read_bytes()
    a, b = read_stats(run["out"] / "stats_a.txt"), read_stats(run["out"] / "stats_b.txt")
    assert a == b


def test_eval_prints_and_records_kl(run, capsys):
    out = run["out"] / "eval.txt"
    assert _gtl("eval", "--samples", run["out"] / "samples_topn.txt", "--output", out, *run["base"]) == 0
    printed = capsys.readouterr().out
    assert printed.startswith("kl_target=")
    assert float(read_stats(out)["kl"]) == pytest.approx(float(printed.split("=")[1]), abs=1e-6)


def test_gamma_sweep_zero_point_is_the_source_model(run, capsys):
    assert _gtl("sweep", "--axis", "gamma", "--values", "0,2", "--count", 64, *run["base"]) == 0
    rows = read_csv(run["out"] / "sweep_gamma.csv")
    assert _gtl("sample", "--gamma", 0, "--count", 64, "--tag", "g0", *run["base"]) == 0
    capsys.readouterr()
    _gtl("eval", "--samples", run["out"] / "samples_g0.txt", *run["base"])
    kl = float(capsys.readouterr().out.split("=")[1])
    assert float(rows[0]["kl"]) == pytest.approx(kl, abs=1e-6)


def test_full_candidate_sweep_point_is_the_naive_sampler(run, capsys):
    assert _gtl("sweep", "--axis", "n_ratio", "--values", "1,2,5", "--count", 64, *run["base"]) == 0
    rows = {r["n_ratio"]: float(r["kl"]) for r in read_csv(run["out"] / "sweep_n_ratio.csv")}
    assert _gtl("sample", "--variant", "naive", "--count", 64, "--tag", "nv", *run["base"]) == 0
    capsys.readouterr()
    _gtl("eval", "--samples", run["out"] / "samples_nv.txt", *run["base"])
    kl = float(capsys.readouterr().out.split("=")[1])
    assert rows["5"] == pytest.approx(kl, abs=1e-6)


def test_fallback_budget_breach_exits_with_invariant_code(run, monkeypatch):
    import gtl.cli as cli
    from gtl.diffusion import SamplerStats

    def fake(*args, **kwargs):
        return torch.zeros(4, 20, dtype=torch.int64), SamplerStats(trajectories=4, stabilizer_fallbacks=3)

    monkeypatch.setattr(cli, "sample_guided", fake)
    assert _gtl("sample", "--tag", "fb", *run["base"]) == 4


def test_losses_are_recorded(run):
    rows = read_csv(run["out"] / "losses_ratio.csv")
    assert len(rows) == 20 and all(np.isfinite(float(r["loss"])) for r in rows)
