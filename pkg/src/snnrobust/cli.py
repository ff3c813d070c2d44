"""Command-line entry point: ``snnrobust <subcommand> --config run.json [overrides]``.

Every subcommand exits 0 on success. On failure a JSON object
``{"error", "message", "phase"}`` goes to stderr and the exit code is
2 for configuration problems and 1 for anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .experiment import (
    ConfigError,
    ExperimentError,
    build_dataset,
    export_gradient_heatmap,
    export_gradient_histogram,
    lambda_sweep,
    load_config,
    run_experiment,
    zero_bin_mass,
)


def _apply_overrides(cfg: dict, args) -> dict:
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["output_dir"] = args.out
    if args.lam is not None:
        cfg["train"]["lam"] = args.lam
    if args.epsilon is not None:
        for a in cfg["attacks"]:
            a["epsilon"] = args.epsilon
        if cfg.get("vulnerability"):
            cfg["vulnerability"]["epsilon"] = args.epsilon
    if getattr(args, "checkpoint", None):
        cfg["checkpoint"] = args.checkpoint
    return load_config(cfg)


def _config(args) -> dict:
    cfg = load_config(args.config) if args.config else load_config({})
    return _apply_overrides(cfg, args)


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_train(args) -> None:
    cfg = _config(args)
    cfg.update(attacks=[], vulnerability=None, ablation=None)
    res = run_experiment(cfg)
    _print({"out_dir": str(res.out_dir), "clean_accuracy": res.summary["clean_accuracy"]})


def cmd_evaluate(args) -> None:
    res = run_experiment(_config(args))
    s = res.summary
    _print({"out_dir": str(res.out_dir), "clean_accuracy": s["clean_accuracy"], "attacks": s["attacks"], "ablation": s.get("ablation")})


def cmd_attack(args) -> None:
    cfg = _config(args)
    if not cfg["attacks"]:
        eps = args.epsilon if args.epsilon is not None else 8 / 255
        cfg["attacks"] = [{"family": "fgsm", "epsilon": eps}, {"family": "pgd", "epsilon": eps, "steps": 10}]
    cfg.update(vulnerability=None, ablation=None)
    res = run_experiment(cfg)
    _print({"out_dir": str(res.out_dir), "clean_accuracy": res.summary["clean_accuracy"], "attacks": res.summary["attacks"]})


def cmd_vuln(args) -> None:
    cfg = _config(args)
    if not cfg.get("vulnerability"):
        eps = args.epsilon if args.epsilon is not None else 0.1
        cfg["vulnerability"] = {"epsilon": eps, "n_samples": 1000, "n_eval": 20, "gap_epsilons": [0.0, eps]}
    cfg.update(attacks=[], ablation=None)
    res = run_experiment(cfg)
    _print({"out_dir": str(res.out_dir), "vulnerability": res.summary["vulnerability"]})


def cmd_sweep(args) -> None:
    cfg = _config(args)
    lams = [float(v) for v in args.lambdas.split(",") if v.strip()]
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    attack = None
    if args.epsilon is not None:
        attack = {"family": "pgd", "epsilon": args.epsilon, "steps": 10}
    rows = lambda_sweep(cfg, lams, out / "sweep.csv", attack)
    _print({"out_dir": str(out), "rows": rows})


def cmd_export_grads(args) -> None:
    from .model import SnnModel
    from .experiment import train_model

    cfg = _config(args)
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    train_ds, test_ds = build_dataset(cfg["dataset"], cfg["seed"])
    if cfg.get("checkpoint"):
        model = SnnModel.load(cfg["checkpoint"])
    else:
        model, _ = train_model(cfg, train_ds, test_ds)
    rows = export_gradient_histogram(model, test_ds, args.bins, path=out / "grad_hist.csv")
    i = min(args.sample, len(test_ds) - 1)
    grid = export_gradient_heatmap(model, test_ds.x[i], test_ds.y[i], test_ds.frames, out / "grad_heatmap.csv")
    _print({"out_dir": str(out), "zero_bin_mass": zero_bin_mass(rows), "heatmap_shape": list(grid.shape)})


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="snnrobust", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON config (defaults are used for missing keys)")
        sp.add_argument("--lambda", dest="lam", type=float, help="sparsity regularization weight")
        sp.add_argument("--epsilon", type=float, help="attack / perturbation radius")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.set_defaults(func=fn)
        return sp

    add("train", cmd_train, "train a model and write checkpoint + trace")
    add("evaluate", cmd_evaluate, "full run: train or load, evaluate attacks, optional ablation").add_argument("--checkpoint")
    add("attack", cmd_attack, "accuracy under FGSM/PGD (configured or default)").add_argument("--checkpoint")
    add("vuln", cmd_vuln, "random vs adversarial vulnerability report").add_argument("--checkpoint")
    sw = add("sweep", cmd_sweep, "train one model per lambda and write sweep.csv")
    sw.add_argument("--lambdas", default="0,0.002,0.004,0.006,0.008")
    ex = add("export-grads", cmd_export_grads, "gradient histogram and heatmap CSVs")
    ex.add_argument("--checkpoint")
    ex.add_argument("--bins", type=int, default=41)
    ex.add_argument("--sample", type=int, default=0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(json.dumps({"error": "ConfigError", "message": str(exc), "phase": "config"}), file=sys.stderr)
        return 2
    except ExperimentError as exc:
        err = {"error": type(exc.cause).__name__, "message": str(exc.cause), "phase": exc.phase, "out_dir": str(exc.out_dir)}
        print(json.dumps(err), file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - surfaced as JSON
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "phase": args.command}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
