"""Experiment configuration, run manifests, the Markov transfer benchmark grid
and parameter sweeps."""

from __future__ import annotations

import copy
import datetime as _dt
import hashlib
import json
import logging
import math
import os
import subprocess
import time
import uuid
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .diffusion import NoiseSchedule, ancestral_sample, finetune, sequence_rngs, train_denoiser
from .io import read_json, write_csv, write_json
from .markov import MarkovSpec, estimate_transition, gen_sequences, transition_kl
from .nets import ModelConfig, load_model, save_model
from .ratio import train_classifier, train_ratio
from .sampling import GuidanceConfig, SamplerModels, sample_guided
from .training import TrainConfig

log = logging.getLogger(__name__)

# vanilla / finetuned / GTL seed-means reported for the Markov transfer grid
REFERENCE_KL = {
    "vanilla": {1000: 0.0476, 100: 0.1938, 20: 0.5842},
    "finetuned": {1000: 0.0393, 100: 0.1118, 20: 0.4004},
    "gtl": {1000: 0.0377, 100: 0.0989, 20: 0.3621},
}
METHODS = ("vanilla", "finetuned", "gtl")

DEFAULTS: dict = {
    "seed": 0,
    "output_dir": "runs/default",
    "data": {"vocab_size": 5, "length": 20, "diag_src": 0.1, "diag_tgt": 0.8, "n_source": 10000, "n_target": 1000},
    "schedule": {"sigma_min": 1e-4, "sigma_max": 20.0},
    "denoiser": {"width": 64, "layers": 2, "heads": 4, "dropout": 0.1},
    "aux": {"width": 32, "layers": 1, "heads": 4, "dropout": 0.1},
    "train": {
        "batch_size": 256,
        "peak_lr": 5e-3,
        "aux_lr": 1e-3,
        "warmup_frac": 0.1,
        "source_epochs": 30,
        "vanilla_epochs": 60,
        "finetune_epochs": 90,
        "classifier_steps": 1000,
        "ratio_steps": 600,
        "planner_steps": 1000,
        "score_steps": 1000,
    },
    "ratio": {"lambda": 0.1, "label_smoothing": 0.1},
    "guidance": {"gamma": 1.0, "n_ratio": None, "stabilizer": True, "variant": "topn", "steps": 20},
    "sample": {"count": 4096, "batch_size": 512, "max_fallbacks": 0},
    "table2": {"n_tgt": [1000, 100, 20], "seeds": [0, 1, 2], "gammas": [1, 2, 3, 5], "sweep_samples": 1024,
               "eval_samples": 4096, "target_pool": 1000, "workers": 1},
}


class ConfigError(ValueError):
    """Invalid configuration (exit code 2)."""


class DependencyError(RuntimeError):
    """A prerequisite artifact is missing (exit code 3)."""


class InvariantError(RuntimeError):
    """A runtime invariant counter exceeded its budget (exit code 4)."""


# --- configuration ------------------------------------------------------------------------------


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {path}{key}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path}{key} must be a mapping")
            out[key] = _merge(base[key], value, f"{path}{key}.")
        else:
            out[key] = value
    return out


def resolve_config(user: dict | None = None, env: dict | None = None) -> dict:
    """Defaults <- user file <- environment (GTL_SEED, GTL_OUTPUT_DIR); validated."""
    cfg = _merge(DEFAULTS, user or {})
    env = os.environ if env is None else env
    if env.get("GTL_SEED"):
        cfg["seed"] = int(env["GTL_SEED"])
    if env.get("GTL_OUTPUT_DIR"):
        cfg["output_dir"] = env["GTL_OUTPUT_DIR"]
    validate_config(cfg)
    return cfg


def load_config(path: str | Path | None, env: dict | None = None) -> dict:
    user = {}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
    return resolve_config(user, env)


def validate_config(cfg: dict) -> None:
    try:
        MarkovSpec(cfg["data"]["vocab_size"], cfg["data"]["length"], cfg["data"]["diag_src"], cfg["data"]["diag_tgt"])
        NoiseSchedule(**cfg["schedule"])
        for section in ("denoiser", "aux"):
            model_config(cfg, "denoiser", section=section)
        g = cfg["guidance"]
        GuidanceConfig(gamma=_gamma_value(g["gamma"]), n_ratio=g["n_ratio"], stabilizer=bool(g["stabilizer"]),
                       variant=g["variant"], steps=int(g["steps"])).candidates(cfg["data"]["vocab_size"])
    except (ValueError, TypeError, KeyError) as err:
        raise ConfigError(str(err)) from err
    if cfg["data"]["n_source"] < 1 or cfg["data"]["n_target"] < 1:
        raise ConfigError("dataset sizes must be >= 1")
    if cfg["ratio"]["lambda"] < 0 or not 0 <= cfg["ratio"]["label_smoothing"] < 1:
        raise ConfigError("need lambda >= 0 and label_smoothing in [0, 1)")
    if cfg["sample"]["count"] < 1 or cfg["sample"]["batch_size"] < 1:
        raise ConfigError("sample count and batch_size must be >= 1")
    t2 = cfg["table2"]
    if not t2["seeds"] or not t2["n_tgt"] or not t2["gammas"]:
        raise ConfigError("table2 needs seeds, n_tgt and gammas")
    if max(t2["n_tgt"]) > t2["target_pool"]:
        raise ConfigError("table2.n_tgt exceeds table2.target_pool")


def _gamma_value(g):
    return tuple(tuple(k) for k in g) if isinstance(g, list) else g


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def code_version() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).resolve().parent)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_run_files(out_dir: str | Path, cfg: dict, artifacts: dict[str, str], started: float,
                    command: str) -> Path:
    """Persist the resolved config and a manifest beside the outputs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", cfg)
    manifest = {
        "run_id": uuid.uuid4().hex[:12],
        "command": command,
        "config_hash": config_hash(cfg),
        "code_version": code_version(),
        "started": _dt.datetime.fromtimestamp(started).isoformat(timespec="seconds"),
        "wall_clock_s": round(time.time() - started, 3),
        "artifacts": {k: str(v) for k, v in artifacts.items()},
    }
    return write_json(out / "manifest.json", manifest)


# --- builders -----------------------------------------------------------------------------------


def markov_spec(cfg: dict) -> MarkovSpec:
    d = cfg["data"]
    return MarkovSpec(d["vocab_size"], d["length"], d["diag_src"], d["diag_tgt"])


def schedule_of(cfg: dict) -> NoiseSchedule:
    return NoiseSchedule(**cfg["schedule"])


def model_config(cfg: dict, kind: str, time_conditioned: bool = False, section: str | None = None) -> ModelConfig:
    sec = cfg[section or ("denoiser" if kind == "denoiser" else "aux")]
    return ModelConfig(kind, cfg["data"]["vocab_size"], cfg["data"]["length"], sec["width"], sec["layers"],
                       sec["heads"], sec["dropout"], time_conditioned)


def train_config(cfg: dict, seed: int, *, epochs: float | None = None, steps: int | None = None,
                 aux: bool = False) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(steps=steps, epochs=epochs, batch_size=t["batch_size"],
                       peak_lr=t["aux_lr"] if aux else t["peak_lr"], warmup_frac=t["warmup_frac"], seed=seed)


def guidance_config(cfg: dict, **overrides) -> GuidanceConfig:
    g = dict(cfg["guidance"])
    g.update(overrides)
    return GuidanceConfig(gamma=_gamma_value(g["gamma"]), n_ratio=g["n_ratio"], stabilizer=bool(g["stabilizer"]),
                          variant=g["variant"], steps=int(g["steps"]))


def target_kl(samples: torch.Tensor, matrix: np.ndarray) -> float:
    return transition_kl(matrix, estimate_transition(samples.numpy(), matrix.shape[0]))


# --- Markov transfer grid -----------------------------------------------------------------------


def _mean_se(values: list[float]) -> tuple[float, float]:
    vals = [v for v in values if math.isfinite(v)]
    if not vals:
        return float("nan"), float("nan")
    mean = float(np.mean(vals))
    se = float(np.std(vals, ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
    return mean, se


def _seed_data(cfg: dict, seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Source set and target pool for one seed; target subsets are nested prefixes of the pool."""
    spec = markov_spec(cfg)
    rng = np.random.default_rng([seed, 0])
    source = torch.from_numpy(gen_sequences(spec, "source", cfg["data"]["n_source"], rng))
    pool = torch.from_numpy(gen_sequences(spec, "target", cfg["table2"]["target_pool"], rng))
    return source, pool


def _cached_model(path: Path, build):
    if path.exists():
        return load_model(path)[0]
    model = build()
    save_model(path, model)
    return model


def _sample_seed(seed: int, n: int, method: str, phase: int) -> int:
    return int(np.random.SeedSequence([seed, n, METHODS.index(method), phase]).generate_state(1)[0])


def _table2_seed(cfg: dict, seed: int, work: Path) -> list[dict]:
    torch.set_num_threads(1)
    spec, sched = markov_spec(cfg), schedule_of(cfg)
    t, t2 = cfg["train"], cfg["table2"]
    length, steps = cfg["data"]["length"], int(cfg["guidance"]["steps"])
    models_dir = work / f"seed{seed}"
    source, pool = _seed_data(cfg, seed)

    def source_model():
        return train_denoiser(source, model_config(cfg, "denoiser"), train_config(cfg, seed, epochs=t["source_epochs"]),
                              sched)[0]

    rows = []
    for n in t2["n_tgt"]:
        target = pool[:n]
        for method in METHODS:
            job = work / "jobs" / f"{method}_n{n}_s{seed}.json"
            if job.exists():
                rows.append(read_json(job))
                continue
            started = time.time()
            row = {"method": method, "n_tgt": n, "seed": seed, "kl": float("nan"), "gamma": "", "sweep": "",
                   "status": "ok"}
            try:
                if method == "vanilla":
                    model = _cached_model(models_dir / f"vanilla_n{n}.npz", lambda: train_denoiser(
                        target, model_config(cfg, "denoiser"), train_config(cfg, seed, epochs=t["vanilla_epochs"]),
                        sched)[0])
                    x, _ = ancestral_sample(model, sched, steps, length,
                                            sequence_rngs(_sample_seed(seed, n, method, 1), t2["eval_samples"]))
                    row["kl"] = target_kl(x, spec.target)
                elif method == "finetuned":
                    base = _cached_model(models_dir / "source.npz", source_model)
                    model = _cached_model(models_dir / f"finetuned_n{n}.npz", lambda: finetune(
                        base, target, train_config(cfg, seed, epochs=t["finetune_epochs"]), sched)[0])
                    x, _ = ancestral_sample(model, sched, steps, length,
                                            sequence_rngs(_sample_seed(seed, n, method, 1), t2["eval_samples"]))
                    row["kl"] = target_kl(x, spec.target)
                else:
                    base = _cached_model(models_dir / "source.npz", source_model)
                    ratio = _cached_model(models_dir / f"ratio_n{n}.npz",
                                          lambda: train_gtl_ratio(cfg, source, target, seed, sched))
                    models = SamplerModels(base, ratio)
                    sweep = {}
                    for gamma in t2["gammas"]:
                        gc = guidance_config(cfg, gamma=gamma, n_ratio=None)
                        x, _ = sample_guided(gc, models, seed=_sample_seed(seed, n, method, 1),
                                             count=t2["sweep_samples"], length=length, schedule=sched,
                                             batch_size=cfg["sample"]["batch_size"])
                        sweep[gamma] = target_kl(x, spec.target)
                    best = min(sweep, key=sweep.get)
                    x, _ = sample_guided(guidance_config(cfg, gamma=best, n_ratio=None), models,
                                         seed=_sample_seed(seed, n, method, 2), count=t2["eval_samples"],
                                         length=length, schedule=sched, batch_size=cfg["sample"]["batch_size"])
                    row.update(kl=target_kl(x, spec.target), gamma=best,
                               sweep=";".join(f"{g}:{v:.5f}" for g, v in sweep.items()))
            except Exception as err:  # partial report with a failure marker
                log.exception("job %s n=%s seed=%s failed", method, n, seed)
                row["status"] = f"failed: {type(err).__name__}: {err}"
            row["seconds"] = round(time.time() - started, 1)
            if row["status"] == "ok":
                write_json(job, row)
            log.info("%s n=%s seed=%s kl=%.4f (%.0fs)", method, n, seed, row["kl"], row["seconds"])
            rows.append(row)
    return rows


def train_gtl_ratio(cfg: dict, source: torch.Tensor, target: torch.Tensor, seed: int, sched: NoiseSchedule):
    """Clean classifier, time-dependent classifier, then the ratio network."""
    t, r = cfg["train"], cfg["ratio"]
    d_clean, _ = train_classifier(source, target, model_config(cfg, "classifier"),
                                  train_config(cfg, seed, steps=t["classifier_steps"], aux=True),
                                  time_dependent=False, schedule=sched, label_smoothing=r["label_smoothing"])
    d_time, _ = train_classifier(source, target, model_config(cfg, "classifier", time_conditioned=True),
                                 train_config(cfg, seed + 1, steps=t["classifier_steps"], aux=True),
                                 time_dependent=True, schedule=sched, label_smoothing=r["label_smoothing"])
    ratio, _ = train_ratio(source, target, d_clean, d_time, model_config(cfg, "ratio", time_conditioned=True),
                           train_config(cfg, seed + 2, steps=t["ratio_steps"], aux=True), r["lambda"], sched)
    return ratio


def table2_hash(cfg: dict) -> str:
    keys = ("data", "schedule", "denoiser", "aux", "train", "ratio", "guidance", "table2")
    sub = {k: cfg[k] for k in keys}
    sub["table2"] = {k: v for k, v in sub["table2"].items() if k != "workers"}
    sub["sample"] = {"batch_size": cfg["sample"]["batch_size"]}
    return config_hash(sub)


def run_table2(cfg: dict, work_dir: str | Path) -> dict:
    """Run (or resume) the grid; returns rows, the aggregated summary and the checks."""
    work = Path(work_dir) / table2_hash(cfg)
    seeds = cfg["table2"]["seeds"]
    workers = max(1, int(cfg["table2"].get("workers", 1)))
    rows: list[dict] = []
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(seeds))) as pool:
            for part in pool.map(_table2_seed, [cfg] * len(seeds), seeds, [work] * len(seeds)):
                rows.extend(part)
    else:
        for seed in seeds:
            rows.extend(_table2_seed(cfg, seed, work))
    rows.sort(key=lambda r: (METHODS.index(r["method"]), -r["n_tgt"], r["seed"]))
    summary = summarize_table2(rows)
    report = {"rows": rows, "summary": summary, "checks": table2_checks(summary), "work_dir": str(work)}
    write_csv(work / "report.csv", rows, ["method", "n_tgt", "seed", "kl", "gamma", "sweep", "status", "seconds"])
    write_csv(work / "summary.csv", summary, ["method", "n_tgt", "mean", "se", "count", "reference"])
    write_json(work / "checks.json", report["checks"])
    return report


def summarize_table2(rows: list[dict]) -> list[dict]:
    out = []
    for method in METHODS:
        for n in sorted({int(r["n_tgt"]) for r in rows}, reverse=True):
            kls = [float(r["kl"]) for r in rows if r["method"] == method and int(r["n_tgt"]) == n]
            if not kls:
                continue
            mean, se = _mean_se(kls)
            out.append({"method": method, "n_tgt": n, "mean": mean, "se": se,
                        "count": sum(math.isfinite(k) for k in kls), "reference": REFERENCE_KL[method].get(n, "")})
    return out


def table2_checks(summary: list[dict]) -> dict[str, bool]:
    """Ordering per row, vanilla within +-50% of the reference values, monotone degradation."""
    means = {(s["method"], int(s["n_tgt"])): float(s["mean"]) for s in summary}
    ns = sorted({n for _, n in means}, reverse=True)
    checks = {}
    checks["ordering"] = all(
        means.get(("gtl", n), math.inf) <= means.get(("finetuned", n), math.nan) <= means.get(("vanilla", n), math.nan)
        for n in ns)
    checks["vanilla_within_50pct"] = all(
        abs(means.get(("vanilla", n), math.inf) - ref) <= 0.5 * ref
        for n, ref in REFERENCE_KL["vanilla"].items() if n in ns)
    checks["monotone"] = all(
        means.get((m, a), math.nan) <= means.get((m, b), math.nan) for m in METHODS for a, b in zip(ns, ns[1:]))
    return checks


def format_table2(summary: list[dict]) -> str:
    ns = sorted({int(s["n_tgt"]) for s in summary}, reverse=True)
    cell = {(s["method"], int(s["n_tgt"])): s for s in summary}
    lines = [f"{'n_tgt':>6}  " + "  ".join(f"{m:>18}" for m in METHODS)]
    for n in ns:
        parts = []
        for m in METHODS:
            s = cell.get((m, n))
            parts.append(f"{s['mean']:.4f} +- {s['se']:.4f}".rjust(18) if s else " " * 18)
        lines.append(f"{n:>6}  " + "  ".join(parts))
    return "\n".join(lines)


# --- sweeps -------------------------------------------------------------------------------------


def run_sweep(cfg: dict, models: SamplerModels, axis: str, values: list, seeds: list[int], count: int,
              matrix: np.ndarray) -> tuple[list[dict], list[dict]]:
    """KL to ``matrix`` at every grid point of ``axis`` (gamma or n_ratio) for every seed."""
    if axis not in ("gamma", "n_ratio"):
        raise ConfigError(f"unknown sweep axis {axis!r}")
    sched, length = schedule_of(cfg), cfg["data"]["length"]
    rows = []
    for value in values:
        for seed in seeds:
            gc = guidance_config(cfg, **{axis: value})
            x, stats = sample_guided(gc, models, seed=seed, count=count, length=length, schedule=sched,
                                     batch_size=cfg["sample"]["batch_size"])
            rows.append({axis: value, "seed": seed, "kl": target_kl(x, matrix), "ratio_calls": stats.ratio_calls})
    summary = []
    for value in values:
        mean, se = _mean_se([r["kl"] for r in rows if r[axis] == value])
        summary.append({axis: value, "mean": mean, "se": se})
    return rows, summary
