"""Experiment orchestration: config, train/evaluate/analyse runs, sweeps, exports.

A run writes into its output directory:

* ``summary.json``   clean/attack accuracies, vulnerability aggregates, timing
* ``trace.csv``      per-epoch training record
* ``model.json``     final checkpoint (plus ``model_epoch{k}.json`` every k epochs)
* ``attacks.jsonl``  one line per (attack, sample)
* ``vulnerability.json`` / ``gap.csv`` when vulnerability analysis is enabled
* ``ablation.csv``   vanilla / AT / SR / SR* comparison when requested
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .attacks import AttackConfig, ensemble_configs
from .autodiff import SurrogateSpec
from .data import Dataset, load_csv, load_idx, synth_blobs, synth_frames
from .model import SnnModel, grad_fy_input, mlp, small_conv
from .training import TrainConfig, TrainingTrace, evaluate, gradient_norms, train
from .vulnerability import gap_experiment, vulnerability_report, write_gap_csv

log = logging.getLogger(__name__)

SUMMARY_VERSION = "1.0"

DEFAULT_CONFIG: dict[str, Any] = {
    "seed": 0,
    "output_dir": "runs/default",
    "dataset": {
        "source": "blobs",
        "n": 900,
        "dims": 64,
        "classes": 4,
        "spread": 0.25,
        "center_scale": 0.5,
        "test_fraction": 0.33,
    },
    "model": {
        "arch": "mlp",
        "hidden": [64],
        "timesteps": 4,
        "tau": 1.0,
        "theta": 1.0,
        "gain": 1.0,
        "mean": 0.5,
        "std": 0.25,
        "surrogate": {"family": "triangle", "gamma": 2.0},
    },
    "train": {"epochs": 20, "lr": 0.05, "batch_size": 32, "h": 0.05},
    "attacks": [],
    "vulnerability": None,
    "ablation": None,
    "checkpoint_every": 0,
}


class ConfigError(ValueError):
    pass


class ExperimentError(RuntimeError):
    def __init__(self, phase: str, cause: BaseException, out_dir: Path):
        super().__init__(f"phase {phase!r} failed: {cause}")
        self.phase = phase
        self.cause = cause
        self.out_dir = out_dir


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(source) -> dict:
    """Merge a JSON document (path or dict) over the defaults and validate it."""
    if isinstance(source, (str, Path)):
        path = Path(source)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        raw = json.loads(path.read_text())
        base_dir = path.parent
    else:
        raw = dict(source)
        base_dir = Path(".")
    cfg = _merge(DEFAULT_CONFIG, raw)
    raw_ds = raw.get("dataset") or {}
    if raw_ds.get("source", "blobs") != "blobs":
        # blob defaults (class count etc.) must not leak into other sources
        cfg["dataset"] = {"test_fraction": DEFAULT_CONFIG["dataset"]["test_fraction"], **copy.deepcopy(raw_ds)}
    ds = cfg["dataset"]
    for key in ("images", "labels", "test_images", "test_labels", "path"):
        if key in ds:
            p = Path(ds[key])
            if not p.is_absolute():
                p = base_dir / p
            if not p.exists():
                raise ConfigError(f"dataset.{key}: {p} does not exist")
            ds[key] = str(p)
    if cfg.get("checkpoint"):
        p = Path(cfg["checkpoint"])
        if not p.is_absolute():
            p = base_dir / p
        if not p.exists():
            raise ConfigError(f"checkpoint {p} does not exist")
        cfg["checkpoint"] = str(p)
    TrainConfig(**cfg["train"])  # validate early
    for a in cfg["attacks"]:
        _attack_from_dict(a)
    return cfg


def _attack_from_dict(d: dict) -> list[AttackConfig] | AttackConfig:
    d = dict(d)
    ensemble = d.pop("ensemble", False)
    d.pop("name", None)
    base = AttackConfig.from_dict(d)
    return ensemble_configs(base) if ensemble else base


def attack_name(d: dict) -> str:
    if "name" in d:
        return d["name"]
    cfg = _attack_from_dict(d)
    single = cfg if isinstance(cfg, AttackConfig) else cfg[0]
    return single.name + ("-ensemble" if isinstance(cfg, list) else "")


def build_dataset(ds: dict, seed: int) -> tuple[Dataset, Dataset]:
    src = ds["source"]
    frac = ds.get("test_fraction", 0.33)
    if src == "blobs":
        full = synth_blobs(ds["n"], ds["dims"], ds["classes"], ds["spread"], ds.get("data_seed", seed), ds.get("center_scale", 1.0))
        return full.split(frac, seed)
    if src == "frames":
        full = synth_frames(ds["n"], ds["t_frames"], ds["dims"], ds["classes"], ds.get("data_seed", seed), ds.get("spread", 0.15))
        return full.split(frac, seed)
    if src == "idx":
        train_ds = load_idx(ds["images"], ds["labels"], ds.get("classes"))
        if "test_images" in ds:
            return train_ds, load_idx(ds["test_images"], ds["test_labels"], train_ds.num_classes)
        return train_ds.split(frac, seed)
    if src == "csv":
        return load_csv(ds["path"], ds.get("classes")).split(frac, seed)
    raise ConfigError(f"unknown dataset source {src!r}")


def build_model(mc: dict, dataset: Dataset, seed: int) -> SnnModel:
    spec = SurrogateSpec.from_dict(mc.get("surrogate", {"family": "triangle", "gamma": 1.0}))
    timesteps = dataset.timesteps or mc["timesteps"]
    common = dict(
        timesteps=timesteps,
        seed=seed,
        gain=mc.get("gain", 1.0),
        tau=mc.get("tau", 1.0),
        theta=mc.get("theta", 1.0),
        mean=mc.get("mean", 0.0),
        std=mc.get("std", 1.0),
        surrogate=spec,
    )
    shape = dataset.sample_shape
    if mc["arch"] == "mlp":
        model = mlp(int(np.prod(shape)), mc.get("hidden", [64]), dataset.num_classes, **common)
        if len(shape) > 1:
            from .model import Flatten

            model.layers.insert(1, Flatten())
            model.input_shape = tuple(shape)
        return model
    if mc["arch"] == "conv":
        c, h, w = shape
        return small_conv(c, h, w, dataset.num_classes, mc.get("width", 8), **common)
    raise ConfigError(f"unknown architecture {mc['arch']!r}")


def _train_config(cfg: dict, **over) -> TrainConfig:
    d = dict(cfg["train"])
    d.setdefault("seed", cfg["seed"])
    d.update(over)
    return TrainConfig(**d)


@dataclass
class RunResult:
    out_dir: Path
    summary: dict
    model: SnnModel | None = None
    trace: TrainingTrace | None = None
    test: Dataset | None = None


def _round(x):
    if isinstance(x, float):
        return float(f"{x:.12g}")
    if isinstance(x, dict):
        return {k: _round(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_round(v) for v in x]
    return x


def write_summary(path: Path, summary: dict) -> None:
    path.write_text(json.dumps(_round(summary), indent=2, sort_keys=True))


def train_model(cfg: dict, train_ds: Dataset, test_ds: Dataset, out_dir: Path | None = None, **train_over) -> tuple[SnnModel, TrainingTrace]:
    model = build_model(cfg["model"], train_ds, cfg["seed"])
    tc = _train_config(cfg, **train_over)
    every = int(cfg.get("checkpoint_every") or 0)
    if out_dir is None or every <= 0:
        return model, train(model, train_ds, tc)
    # train epoch-by-epoch to drop checkpoints along the way
    from .training import SGD, train_epoch

    rng = np.random.default_rng(tc.seed)
    opt = SGD(model.params(), tc.momentum, tc.weight_decay)
    trace = TrainingTrace()
    for epoch in range(tc.epochs):
        _, rec = train_epoch(model, train_ds.batches(tc.batch_size, rng), tc, epoch, opt, train_ds.frames)
        trace.records.append(rec)
        if (epoch + 1) % every == 0:
            model.save(out_dir / f"model_epoch{epoch + 1}.json")
    return model, trace


def run_experiment(config, out_dir=None) -> RunResult:
    """train -> evaluate (clean + each attack) -> vulnerability analysis -> ablation.

    A failing phase is recorded in ``summary.json`` (earlier outputs are kept)
    and re-raised as :class:`ExperimentError`.
    """
    cfg = load_config(config)
    out = Path(out_dir or cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    summary: dict[str, Any] = {"spec_version": SUMMARY_VERSION, "config": cfg, "timing": {}, "errors": []}
    result = RunResult(out, summary)
    phase = "data"
    try:
        t0 = time.monotonic()
        train_ds, test_ds = build_dataset(cfg["dataset"], cfg["seed"])
        summary["dataset"] = {"train": len(train_ds), "test": len(test_ds), "classes": train_ds.num_classes}
        summary["timing"]["data"] = time.monotonic() - t0

        phase = "train"
        t0 = time.monotonic()
        if cfg.get("checkpoint"):
            model, trace = SnnModel.load(cfg["checkpoint"]), TrainingTrace()
        else:
            model, trace = train_model(cfg, train_ds, test_ds, out)
        model.save(out / "model.json")
        trace.to_csv(out / "trace.csv")
        summary["timing"]["train"] = time.monotonic() - t0
        summary["timing"]["train_epoch_mean"] = float(np.mean([r.seconds for r in trace.records])) if len(trace) else 0.0
        result.model, result.trace, result.test = model, trace, test_ds

        phase = "evaluate"
        t0 = time.monotonic()
        summary["clean_accuracy"] = evaluate(model, test_ds).accuracy
        summary["attacks"] = {}
        with open(out / "attacks.jsonl", "w") as fh:
            for a in cfg["attacks"]:
                name = attack_name(a)
                res = evaluate(model, test_ds, _attack_from_dict(a))
                summary["attacks"][name] = res.accuracy
                for line in res.outcome.report_lines():
                    rec = json.loads(line)
                    rec["attack"] = name
                    fh.write(json.dumps(rec) + "\n")
        summary["timing"]["evaluate"] = time.monotonic() - t0

        if cfg.get("vulnerability"):
            phase = "vulnerability"
            t0 = time.monotonic()
            summary["vulnerability"] = run_vulnerability(model, test_ds, cfg["vulnerability"], cfg["seed"], out)
            summary["timing"]["vulnerability"] = time.monotonic() - t0

        if cfg.get("ablation"):
            phase = "ablation"
            t0 = time.monotonic()
            rows = run_ablation(cfg, train_ds, test_ds)
            write_ablation_csv(rows, out / "ablation.csv")
            summary["ablation"] = rows
            summary["timing"]["ablation"] = time.monotonic() - t0
    except Exception as exc:
        summary["errors"].append({"phase": phase, "type": type(exc).__name__, "message": str(exc)})
        write_summary(out / "summary.json", summary)
        raise ExperimentError(phase, exc, out) from exc
    write_summary(out / "summary.json", summary)
    return result


def run_vulnerability(model: SnnModel, test_ds: Dataset, vc: dict, seed: int, out: Path | None = None) -> dict:
    eps = vc.get("epsilon", 0.1)
    n_eval = min(vc.get("n_eval", 20), len(test_ds))
    reports = []
    for i in range(n_eval):
        r = vulnerability_report(model, test_ds.x[i], test_ds.y[i], eps, vc.get("n_samples", 1000), seed + i, frames=test_ds.frames)
        reports.append(r.to_dict())
    ratios = [r["ratio"] for r in reports if r["ratio"] is not None]
    agg = {
        "epsilon": eps,
        "samples": n_eval,
        "mean_rho_rand": float(np.mean([r["rho_rand"] for r in reports])) if reports else 0.0,
        "mean_rho_adv_firstorder": float(np.mean([r["rho_adv_firstorder"] for r in reports])) if reports else 0.0,
        "mean_ratio": float(np.mean(ratios)) if ratios else None,
        "bound_violations": int(sum(1 for r in reports if r["ratio"] is not None and not (3 - 1e-9 <= r["ratio"] <= r["upper_bound"] * (1 + 1e-9)))),
        "zero_gradient_samples": int(sum(1 for r in reports if r["ratio"] is None)),
        "notes": "ensemble omits the rate-gradient (RGA) member",
    }
    if out is not None:
        (out / "vulnerability.json").write_text(json.dumps(_round({"reports": reports, "aggregate": agg}), indent=2))
    if vc.get("gap_epsilons"):
        rows = gap_experiment(model, test_ds, vc["gap_epsilons"], vc.get("n_rand", 1), seed)
        if out is not None:
            write_gap_csv(rows, out / "gap.csv")
        agg["gap"] = [{"epsilon": r.epsilon, "acc_random": r.acc_random, "acc_adversarial": r.acc_adversarial} for r in rows]
    return agg


REGIMES = {
    "vanilla": dict(lam=0.0, at_mode="none"),
    "AT": dict(lam=0.0, at_mode="pgd"),
    "SR": dict(at_mode="none"),
    "SR*": dict(at_mode="pgd"),
}


def regime_overrides(name: str, ab: dict) -> dict:
    over = dict(REGIMES[name])
    if name == "SR":
        over["lam"] = ab.get("lam_sr", 0.008)
    elif name == "SR*":
        over["lam"] = ab.get("lam_sr_star", 0.002)
    for k in ("at_epsilon", "at_alpha", "at_steps"):
        if k in ab:
            over[k] = ab[k]
    return over


def run_ablation(cfg: dict, train_ds: Dataset, test_ds: Dataset) -> list[dict]:
    """One model per regime; rows mirror an ablation table (method x attack)."""
    ab = cfg["ablation"] if isinstance(cfg["ablation"], dict) else {}
    rows = []
    for name in ab.get("regimes", list(REGIMES)):
        model, _ = train_model(cfg, train_ds, test_ds, **regime_overrides(name, ab))
        row = {"method": name, "clean": evaluate(model, test_ds).accuracy}
        for a in cfg["attacks"]:
            row[attack_name(a)] = evaluate(model, test_ds, _attack_from_dict(a)).accuracy
        norms = gradient_norms(model, test_ds.x, test_ds.y, test_ds.frames)
        row["l1"], row["l2"] = norms["l1"], norms["l2"]
        rows.append(row)
    return rows


def write_ablation_csv(rows: Sequence[dict], path) -> None:
    cols = list(rows[0].keys()) if rows else ["method"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, cols)
        w.writeheader()
        w.writerows(rows)


# -- sweeps and exports ----------------------------------------------------------------


SWEEP_COLUMNS = ("lambda", "clean_acc", "pgd_acc", "l1", "l2")


def lambda_sweep(config, lambda_list: Sequence[float], path=None, attack: dict | None = None) -> list[dict]:
    """Train one model per lambda; record clean/PGD accuracy and gradient norms."""
    if not lambda_list:
        raise ConfigError("lambda_list must be nonempty")
    cfg = load_config(config)
    train_ds, test_ds = build_dataset(cfg["dataset"], cfg["seed"])
    atk = attack or (cfg["attacks"][0] if cfg["attacks"] else {"family": "pgd", "steps": 10})
    rows = []
    for lam in lambda_list:
        model, _ = train_model(cfg, train_ds, test_ds, lam=float(lam))
        norms = gradient_norms(model, test_ds.x, test_ds.y, test_ds.frames)
        rows.append(
            {
                "lambda": float(lam),
                "clean_acc": evaluate(model, test_ds).accuracy,
                "pgd_acc": evaluate(model, test_ds, _attack_from_dict(atk)).accuracy,
                "l1": norms["l1"],
                "l2": norms["l2"],
            }
        )
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, SWEEP_COLUMNS)
            w.writeheader()
            w.writerows(rows)
    return rows


def export_gradient_histogram(model, dataset: Dataset, bins: int = 41, limit: float | None = None, path=None) -> list[tuple[float, float, float]]:
    """Pooled histogram of every component of ``grad_x f_y`` over the dataset.

    Bins are symmetric on ``[-limit, limit]`` (default: largest magnitude seen);
    out-of-range components are clipped into the edge bins. Masses sum to 1.
    """
    if bins < 2:
        raise ConfigError("need at least two bins")
    parts = []
    for i in range(0, len(dataset), 256):
        g, _, _ = grad_fy_input(model, dataset.x[i : i + 256], dataset.y[i : i + 256], frames=dataset.frames)
        parts.append(g.reshape(-1).astype(np.float64))
    g = np.concatenate(parts)
    if limit is None:
        limit = float(np.abs(g).max()) or 1.0
    edges = np.linspace(-limit, limit, bins + 1)
    counts, _ = np.histogram(np.clip(g, -limit, limit), edges)
    mass = counts / counts.sum()
    rows = [(float(edges[i]), float(edges[i + 1]), float(mass[i])) for i in range(bins)]
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_lo", "bin_hi", "mass"])
            w.writerows(rows)
    return rows


def zero_bin_mass(rows) -> float:
    """Mass of the bin containing 0."""
    for lo, hi, m in rows:
        if lo <= 0.0 < hi:
            return m
    return rows[-1][2]


def export_gradient_heatmap(model, x, y, frames: bool = False, path=None) -> np.ndarray:
    """Per-pixel ``|grad_x f_y|`` summed over channels (and frames)."""
    x = np.asarray(x)
    g, _, _ = grad_fy_input(model, x[None], np.atleast_1d(y), frames=frames)
    g = np.abs(g[0])
    if frames:
        g = g.sum(axis=0)
    if g.ndim == 3:
        grid = g.sum(axis=0)
    elif g.ndim == 2:
        grid = g
    else:
        grid = g.reshape(1, -1)
    if path is not None:
        np.savetxt(path, grid, delimiter=",", fmt="%.9g")
    return grid
