"""Command-line front end.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .bome import SolverError, train_generator
from .config import ConfigError, ExperimentSpec, load_spec
from .data import LabeledDataset, write_dataset
from .lab import (BaselineError, ablation_diagnostic, adversarial_game_experiment,
                  build_dataset, curve_rows, default_jobs, poisoning_experiment,
                  quartile_variances, ratio_generalization_experiment, rows_to_csv)
from .models import PerturbationGenerator, load_checkpoint, poison_features, save_checkpoint

log = logging.getLogger("stackelgrad")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True,
                             text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _resolve(args) -> ExperimentSpec:
    spec = load_spec(args.spec)
    if args.seed is not None:
        n = len(spec.seeds)
        spec = dataclasses.replace(spec, game=spec.game.replace(seed=args.seed),
                                   seeds=tuple(args.seed + i for i in range(n)))
    return spec


def _prepare_out(args, spec: ExperimentSpec) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _dump(out / "config.json", {"command": args.command, "spec": spec.to_dict(),
                                "version": version_string()})
    return out


def cmd_train_gen(args) -> int:
    spec = _resolve(args)
    out = _prepare_out(args, spec)
    train = build_dataset(spec).subset("train")
    log.info("training generator: %d samples, %d epochs", len(train), spec.game.epochs)
    try:
        gen, _, report = train_generator(spec.game, train.features, train.labels, train.n_classes)
    except SolverError as exc:
        if exc.report is not None:
            (out / "run.csv").write_text(exc.report.to_csv())
            (out / "summary.json").write_text(exc.report.to_json() + "\n")
        log.error("solver diverged: %s", exc)
        return EXIT_NUMERIC
    save_checkpoint(out / "generator.ckpt", gen)
    (out / "run.csv").write_text(report.to_csv())
    summary = report.summary()
    summary["version"] = version_string()
    _dump(out / "summary.json", summary)
    return EXIT_OK


def cmd_poison(args) -> int:
    try:
        gen = load_checkpoint(args.checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        log.error("cannot load checkpoint: %s", exc)
        return EXIT_CONFIG
    if not isinstance(gen, PerturbationGenerator):
        log.error("checkpoint does not hold a generator")
        return EXIT_CONFIG
    try:
        ds = LabeledDataset.from_csv(args.features, args.labels)
    except (OSError, ValueError) as exc:
        log.error("cannot read dataset: %s", exc)
        return EXIT_CONFIG
    if ds.n_features != gen.n_features:
        log.error("dimension mismatch: dataset has %d features, generator expects %d",
                  ds.n_features, gen.n_features)
        return EXIT_CONFIG
    clip = tuple(args.clip) if args.clip else None
    x_out = poison_features(gen, ds.features)
    max_norm = float(np.abs(x_out - ds.features).max()) if len(ds) else 0.0
    if clip is not None:
        x_out = np.clip(x_out, clip[0], clip[1])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.savetxt(out / "poisoned_features.csv", x_out, delimiter=",", fmt="%.17g")
    if args.labels:
        np.savetxt(out / "poisoned_labels.csv", ds.labels, fmt="%d")
    print(f"max_perturbation_linf {max_norm!r} budget {gen.budget!r}")
    return EXIT_OK


def cmd_make_data(args) -> int:
    spec = _resolve(args)
    out = _prepare_out(args, spec)
    ds = build_dataset(spec)
    for split in ("train", "test"):
        write_dataset(ds.subset(split), out, split)
    return EXIT_OK


def cmd_eval(args) -> int:
    spec = _resolve(args)
    out = _prepare_out(args, spec)
    report, runs = poisoning_experiment(spec, args.jobs)
    rows = [{"seed": s, "clean_accuracy": c, "poisoned_accuracy": p}
            for s, c, p in zip(report.seeds, report.clean_per_seed, report.poisoned_per_seed)]
    (out / "eval.csv").write_text(rows_to_csv(rows))
    (out / "curve.csv").write_text(rows_to_csv(curve_rows(report)))
    for s, run in runs.items():
        (out / f"run_seed{s}.csv").write_text(run.to_csv())
    _dump(out / "summary.json", {"report": report.to_dict(), "version": version_string()})
    return EXIT_OK


def cmd_experiment(args) -> int:
    spec = _resolve(args)
    out = _prepare_out(args, spec)
    if spec.scenario == "adversarial":
        rows = adversarial_game_experiment(spec, args.jobs)
        name = "adversarial.csv"
    else:
        rows = ratio_generalization_experiment(spec, args.jobs)
        name = "ratio.csv"
    (out / name).write_text(rows_to_csv(rows))
    _dump(out / "summary.json", {"scenario": spec.scenario, "rows": rows,
                                 "version": version_string()})
    return EXIT_OK


def cmd_diag(args) -> int:
    spec = _resolve(args)
    out = _prepare_out(args, spec)
    reports = ablation_diagnostic(build_dataset(spec), spec.game, spec.diag_clip, args.jobs)
    summary = {}
    for name, rep in reports.items():
        (out / f"trace_{name}.csv").write_text(rep.to_csv())
        first, last = quartile_variances(rep.column("jc"))
        summary[name] = {"status": rep.status, "steps": len(rep.steps),
                         "max_grad_ja_norm": float(rep.column("grad_ja_norm").max()),
                         "jc_first_quartile_var": first, "jc_last_quartile_var": last}
    _dump(out / "summary.json", {"variants": summary, "version": version_string()})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stackelgrad",
                                     description="Unlearnable-example game laboratory.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_spec=True):
        if needs_spec:
            p.add_argument("--spec", required=True, help="JSON experiment spec")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the master seed")
        p.add_argument("--jobs", type=int, default=default_jobs(),
                       help="worker processes for grid cells (env STACKELGRAD_JOBS)")
        p.add_argument("--quiet", action="store_true")

    for name, fn, helptext in (
            ("train-gen", cmd_train_gen, "train a poison generator"),
            ("eval", cmd_eval, "train generators and evaluate poisoned victims"),
            ("experiment", cmd_experiment, "ratio or adversarial experiment grid"),
            ("diag", cmd_diag, "attacker-loss ablation traces"),
            ("make-data", cmd_make_data, "write the synthetic dataset as CSV")):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("poison", help="poison a feature CSV with a trained generator")
    common(p, needs_spec=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--labels", default=None)
    p.add_argument("--clip", nargs=2, type=float, metavar=("LO", "HI"), default=None)
    p.set_defaults(func=cmd_poison)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("invalid spec: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BaselineError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (SolverError, ad.NumericError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
