"""Command-line front door: gen-data, train, sample, eval, reproduce-table2, sweep.

Exit codes: 0 success, 2 validation error, 3 missing dependency, 4 invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .diffusion import finetune, train_denoiser
from .experiment import (ConfigError, DependencyError, InvariantError, format_table2, guidance_config,
                         markov_spec, model_config, run_sweep, run_table2, schedule_of, target_kl, train_config,
                         write_run_files)
from .io import read_dataset, read_sequences, write_csv, write_dataset, write_json, write_samples, write_stats
from .markov import gen_sequences
from .nets import load_model, save_model
from .sampling import SamplerModels, sample_guided

log = logging.getLogger("gtl")

EXIT_OK, EXIT_VALIDATION, EXIT_DEPENDENCY, EXIT_INVARIANT = 0, 2, 3, 4

STAGES = ("source", "vanilla", "finetune", "classifier", "ratio", "planner", "score")
CHECKPOINTS = {
    "source": "source.npz",
    "vanilla": "vanilla.npz",
    "finetune": "finetuned.npz",
    "classifier": "classifier_clean.npz",
    "classifier_time": "classifier_time.npz",
    "ratio": "ratio.npz",
    "planner": "planner.npz",
    "score": "score.npz",
}


def _apply_sets(cfg_overrides: list[str]) -> dict:
    """``--set a.b=value`` pairs to a nested dict; values are parsed as JSON when possible."""
    out: dict = {}
    for item in cfg_overrides or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return out


def _deep_update(base: dict, extra: dict) -> dict:
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v
    return base


def _config(args) -> dict:
    from .experiment import resolve_config

    user = {}
    if args.config:
        try:
            user = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config {args.config}: {err}") from err
    _deep_update(user, _apply_sets(args.set))
    if getattr(args, "seed", None) is not None:
        user["seed"] = args.seed
    if getattr(args, "out", None):
        user["output_dir"] = args.out
    return resolve_config(user)


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise DependencyError(f"missing {path.name}: train {stage} first")
    return path


def _data_path(run: Path, name: str) -> Path:
    path = run / f"{name}.txt"
    if not path.exists():
        raise DependencyError(f"missing {path}: run gen-data first")
    return path


# --- commands -----------------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    started = time.time()
    cfg = _config(args)
    spec = markov_spec(cfg)
    out = Path(cfg["output_dir"])
    rng = np.random.default_rng(cfg["seed"])
    source = gen_sequences(spec, "source", cfg["data"]["n_source"], rng)
    target = gen_sequences(spec, "target", cfg["data"]["n_target"], rng)
    paths = {"source": write_dataset(out / "source.txt", source, spec.vocab_size),
             "target": write_dataset(out / "target.txt", target, spec.vocab_size)}
    paths["spec"] = write_json(out / "spec.json", {"vocab_size": spec.vocab_size, "length": spec.length,
                                                   "diag_src": spec.diag_src, "diag_tgt": spec.diag_tgt,
                                                   "source_matrix": spec.source.tolist(),
                                                   "target_matrix": spec.target.tolist()})
    write_run_files(out, cfg, paths, started, "gen-data")
    print(f"wrote {len(source)} source and {len(target)} target sequences to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .ctmc import dwdse_loss
    from .planner import train_planner
    from .ratio import train_classifier, train_ratio
    from .training import fit

    started = time.time()
    cfg = _config(args)
    run = Path(cfg["output_dir"])
    sched, seed, t = schedule_of(cfg), cfg["seed"], cfg["train"]
    stage = args.stage
    source = read_dataset(_data_path(run, "source"))[0]
    target = read_dataset(_data_path(run, "target"))[0]

    def tc(default_epochs=None, default_steps=None, aux=False, offset=0):
        if args.epochs is not None:
            return train_config(cfg, seed + offset, epochs=args.epochs, aux=aux)
        if args.steps is not None:
            return train_config(cfg, seed + offset, steps=args.steps, aux=aux)
        return train_config(cfg, seed + offset, epochs=default_epochs, steps=default_steps, aux=aux)

    artifacts, curves = {}, {}
    if stage == "source":
        model, res = train_denoiser(source, model_config(cfg, "denoiser"), tc(t["source_epochs"]), sched,
                                    on_diverge=run / "source.diverged.npz")
        curves["source"] = res.losses
        artifacts["source"] = save_model(run / CHECKPOINTS["source"], model)
    elif stage == "vanilla":
        model, res = train_denoiser(target, model_config(cfg, "denoiser"), tc(t["vanilla_epochs"]), sched)
        curves["vanilla"] = res.losses
        artifacts["vanilla"] = save_model(run / CHECKPOINTS["vanilla"], model)
    elif stage == "finetune":
        base, _ = load_model(_require(run / CHECKPOINTS["source"], "source"))
        model, res = finetune(base, target, tc(t["finetune_epochs"]), sched)
        curves["finetune"] = res.losses
        artifacts["finetuned"] = save_model(run / CHECKPOINTS["finetune"], model)
    elif stage == "classifier":
        smoothing = cfg["ratio"]["label_smoothing"]
        d_clean, res = train_classifier(source, target, model_config(cfg, "classifier"),
                                        tc(default_steps=t["classifier_steps"], aux=True), False, sched, smoothing)
        d_time, res_t = train_classifier(source, target, model_config(cfg, "classifier", time_conditioned=True),
                                         tc(default_steps=t["classifier_steps"], aux=True, offset=1), True, sched,
                                         smoothing)
        curves["classifier_clean"], curves["classifier_time"] = res.losses, res_t.losses
        artifacts["classifier_clean"] = save_model(run / CHECKPOINTS["classifier"], d_clean)
        artifacts["classifier_time"] = save_model(run / CHECKPOINTS["classifier_time"], d_time)
    elif stage == "ratio":
        if not (run / CHECKPOINTS["classifier"]).exists() or not (run / CHECKPOINTS["classifier_time"]).exists():
            raise DependencyError("ratio stage needs both domain classifiers: train classifier first")
        d_clean, _ = load_model(run / CHECKPOINTS["classifier"])
        d_time, _ = load_model(run / CHECKPOINTS["classifier_time"])
        model, res = train_ratio(source, target, d_clean, d_time, model_config(cfg, "ratio", time_conditioned=True),
                                 tc(default_steps=t["ratio_steps"], aux=True, offset=2), cfg["ratio"]["lambda"], sched)
        curves["ratio"] = res.losses
        artifacts["ratio"] = save_model(run / CHECKPOINTS["ratio"], model)
    elif stage == "planner":
        denoiser, _ = load_model(_require(run / CHECKPOINTS["source"], "source"))
        model, res = train_planner(source, denoiser, model_config(cfg, "planner"),
                                   tc(default_steps=t["planner_steps"], aux=True, offset=3), sched)
        curves["planner"] = res.losses
        artifacts["planner"] = save_model(run / CHECKPOINTS["planner"], model)
    elif stage == "score":
        from .nets import build_model

        tcfg = tc(default_steps=t["score_steps"], aux=True, offset=4)
        model = build_model(model_config(cfg, "score", section="denoiser"), seed=tcfg.seed)
        res = fit(model, source.shape[0], lambda m, idx, g: dwdse_loss(m, source[idx], sched, g), tcfg)
        curves["score"] = res.losses
        artifacts["score"] = save_model(run / CHECKPOINTS["score"], model)
    for name, losses in curves.items():
        artifacts[f"losses_{name}"] = write_csv(run / f"losses_{name}.csv",
                                                [{"step": i, "loss": v} for i, v in enumerate(losses)],
                                                ["step", "loss"])
    write_run_files(run, cfg, artifacts, started, f"train {stage}")
    final = {k: (v[-1] if v else float("nan")) for k, v in curves.items()}
    print(f"trained stage {stage}; final losses {final}")
    return EXIT_OK


def _load_sampler_models(run: Path, model_name: str, variant: str, guided: bool) -> SamplerModels:
    key = {"source": "source", "vanilla": "vanilla", "finetuned": "finetune"}[model_name]
    denoiser, _ = load_model(_require(run / CHECKPOINTS[key], key))
    ratio = load_model(_require(run / CHECKPOINTS["ratio"], "ratio"))[0] if guided else None
    planner = load_model(_require(run / CHECKPOINTS["planner"], "planner"))[0] if variant == "planner" else None
    return SamplerModels(denoiser, ratio, planner)


def cmd_sample(args) -> int:
    started = time.time()
    overrides = {}
    for key, val in (("variant", args.variant), ("gamma", args.gamma), ("n_ratio", args.n_ratio),
                     ("steps", args.steps)):
        if val is not None:
            overrides[key] = val
    if args.no_stabilizer:
        overrides["stabilizer"] = False
    if overrides:
        args.set = list(args.set or []) + [f"guidance.{k}={json.dumps(v)}" for k, v in overrides.items()]
    if args.count is not None:
        args.set = list(args.set or []) + [f"sample.count={args.count}"]
    cfg = _config(args)
    run = Path(cfg["output_dir"])
    gc = guidance_config(cfg)
    models = _load_sampler_models(run, args.model, gc.variant, gc.active)
    x, stats = sample_guided(gc, models, count=cfg["sample"]["count"], seed=cfg["seed"],
                             length=cfg["data"]["length"], schedule=schedule_of(cfg),
                             batch_size=cfg["sample"]["batch_size"])
    tag = args.tag or gc.variant
    n_ratio = gc.candidates(cfg["data"]["vocab_size"])
    samples = write_samples(run / f"samples_{tag}.txt", x, cfg["data"]["vocab_size"], gc.variant,
                            cfg["guidance"]["gamma"], n_ratio, cfg["seed"])
    record = stats.as_record()
    record.update(variant=gc.variant, gamma=cfg["guidance"]["gamma"], n_ratio=n_ratio,
                  guidance_active=int(gc.active), steps_per_trajectory=stats.max_steps_per_trajectory)
    if not gc.active:
        record["flag"] = "guidance-inactive"
    stats_path = write_stats(run / f"stats_{tag}.txt", record)
    write_run_files(run, cfg, {"samples": samples, "stats": stats_path}, started, f"sample {tag}")
    print(f"wrote {len(x)} samples to {samples}")
    if stats.stabilizer_fallbacks > cfg["sample"]["max_fallbacks"]:
        raise InvariantError(f"{stats.stabilizer_fallbacks} stabilizer fallbacks exceed budget "
                             f"{cfg['sample']['max_fallbacks']}")
    if stats.ceiling_violations:
        raise InvariantError(f"{stats.ceiling_violations} call-count ceiling violations")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    spec = markov_spec(cfg)
    seqs, header = read_sequences(args.samples)
    matrix = spec.matrix(args.domain)
    kl = target_kl(seqs, matrix)
    record = {"samples": args.samples, "domain": args.domain, "n": len(seqs), "kl": kl}
    if args.output:
        write_stats(args.output, record)
    print(f"kl_{args.domain}={kl:.6f}")
    return EXIT_OK


def cmd_reproduce_table2(args) -> int:
    started = time.time()
    cfg = _config(args)
    work = Path(args.work_dir or Path(cfg["output_dir"]) / "table2")
    report = run_table2(cfg, work)
    print(format_table2(report["summary"]))
    for name, ok in report["checks"].items():
        print(f"{name}: {'pass' if ok else 'FAIL'}")
    out = Path(report["work_dir"])
    write_run_files(out, cfg, {"report": out / "report.csv", "summary": out / "summary.csv"}, started,
                    "reproduce-table2")
    return EXIT_OK


def cmd_sweep(args) -> int:
    started = time.time()
    cfg = _config(args)
    run = Path(cfg["output_dir"])
    values = [json.loads(v) for v in args.values.split(",")] if args.values else (
        [0, 1, 3, 5, 8] if args.axis == "gamma" else [1, 2, cfg["data"]["vocab_size"]])
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg["seed"]]
    gc = guidance_config(cfg)
    models = _load_sampler_models(run, args.model, gc.variant, True)
    matrix = markov_spec(cfg).matrix(args.domain)
    rows, summary = run_sweep(cfg, models, args.axis, values, seeds, args.count or cfg["sample"]["count"], matrix)
    rows_path = write_csv(run / f"sweep_{args.axis}.csv", rows, [args.axis, "seed", "kl", "ratio_calls"])
    summary_path = write_csv(run / f"sweep_{args.axis}_summary.csv", summary, [args.axis, "mean", "se"])
    write_run_files(run, cfg, {"sweep": rows_path, "summary": summary_path}, started, f"sweep {args.axis}")
    for s in summary:
        print(f"{args.axis}={s[args.axis]}: kl {s['mean']:.4f} +- {s['se']:.4f}")
    return EXIT_OK


# --- parser -------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gtl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. data.n_target=20")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output / run directory")
        return p

    common(sub.add_parser("gen-data", help="write source and target datasets")).set_defaults(func=cmd_gen_data)

    p = common(sub.add_parser("train", help="train one pipeline stage"))
    p.add_argument("--stage", choices=STAGES, required=True)
    p.add_argument("--epochs", type=float)
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("sample", help="draw samples with a guided or unguided sampler"))
    p.add_argument("--variant", choices=("naive", "topn", "planner"))
    p.add_argument("--gamma", type=float)
    p.add_argument("--n-ratio", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--count", type=int)
    p.add_argument("--no-stabilizer", action="store_true")
    p.add_argument("--model", choices=("source", "vanilla", "finetuned"), default="source")
    p.add_argument("--tag", help="suffix for output files (default: variant)")
    p.set_defaults(func=cmd_sample)

    p = common(sub.add_parser("eval", help="transition KL of a sample file"))
    p.add_argument("--samples", required=True)
    p.add_argument("--domain", choices=("source", "target"), default="target")
    p.add_argument("--output")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("reproduce-table2", help="run the Markov transfer grid"))
    p.add_argument("--work-dir")
    p.set_defaults(func=cmd_reproduce_table2)

    p = common(sub.add_parser("sweep", help="sweep gamma or n_ratio"))
    p.add_argument("--axis", choices=("gamma", "n_ratio"), required=True)
    p.add_argument("--values", help="comma-separated grid")
    p.add_argument("--seeds", help="comma-separated sampling seeds")
    p.add_argument("--count", type=int)
    p.add_argument("--model", choices=("source", "vanilla", "finetuned"), default="source")
    p.add_argument("--domain", choices=("source", "target"), default="target")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except DependencyError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except InvariantError as err:
        print(f"invariant violation: {err}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
