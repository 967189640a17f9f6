"""Command-line entry point: ``linefault <subcommand> [options]``.

Every option can also come from a JSON file given with ``--config``; flags on the
command line win. Outputs are byte-identical for identical inputs; wall-clock
information goes to ``*.meta.json`` sidecars only.

Environment: ``LINEFAULT_OUT`` (output root for relative paths),
``LINEFAULT_JOBS`` (default worker count).

Exit codes: 0 success, 2 input error, 3 training failure, 4 evaluation dependency error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from ._util import canonical_json, digest_obj, file_digest
from .evaluation import (
    OBS_FRACTIONS, SNR_LEVELS, TRAIN_FRACTIONS, SweepSettings, compare_variants, evaluate_run, plot_report,
    read_report, run_observability_sweep, run_snr_sweep, run_trainsize_sweep, write_report,
)
from .faults import FAULT_TYPES, ScenarioPlan, generate_dataset, load_scenarios, save_scenarios
from .features import build_dataset, full_mask, make_mask
from .grid import TopologyError, build_admittance, load_case
from .nn import load_checkpoint, save_checkpoint
from .training import TrainConfig, TrainingDivergence, cross_validate, train

log = logging.getLogger("linefault")

EXIT_INPUT, EXIT_TRAIN, EXIT_EVAL = 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _out_path(p: str | None, default: str) -> Path:
    path = Path(p or default)
    root = os.environ.get("LINEFAULT_OUT")
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _floats(s: str) -> list[float]:
    return [float(x) for x in s.split(",") if x.strip()]


def _ints(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x.strip()]


def _seeds(s: str) -> list[int]:
    """``"10"`` means seeds 0..9; ``"3,5,8"`` lists them."""
    return list(range(int(s))) if "," not in s else _ints(s)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(json.loads(canonical_json(obj)), indent=1, sort_keys=True) + "\n")


def _write_meta(path: Path, argv: list[str], started: float) -> None:
    _write_json(path, {"argv": argv, "started": started, "finished": time.time(), "version": __version__})


# ------------------------------------------------------------------ arguments

def _add_train_flags(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    g = p.add_argument_group("training")
    g.add_argument("--learning-rate", type=float, default=d.learning_rate)
    g.add_argument("--batch-size", type=int, default=d.batch_size)
    g.add_argument("--epsilon-mix", type=float, default=d.epsilon_mix, help="weight of the neighbor term")
    g.add_argument("--max-steps", type=int, default=d.max_steps)
    g.add_argument("--early-stop-window", type=int, default=d.early_stop_window,
                   help="validation passes in the early-stopping window")
    g.add_argument("--eval-every", type=int, default=d.eval_every, help="optimizer steps between validation passes")
    g.add_argument("--variant", choices=("no_neighbors", "with_neighbors"), default=d.variant)
    g.add_argument("--rho", type=float, default=d.rho)
    g.add_argument("--rms-eps", type=float, default=d.rms_eps)
    g.add_argument("--channels1", type=int, default=d.channels1)
    g.add_argument("--channels2", type=int, default=d.channels2)
    g.add_argument("--kernel", type=int, default=d.kernel)
    g.add_argument("--hidden", type=int, default=d.hidden)
    f = p.add_argument_group("features")
    f.add_argument("--obs-fraction", type=float, default=1.0, help="fraction of buses with PMUs")
    f.add_argument("--mask-policy", choices=("first_d", "random"), default="first_d")
    f.add_argument("--mask-seed", type=int, default=0)
    f.add_argument("--split", type=float, nargs=3, default=[0.7, 0.15, 0.15], metavar=("TRAIN", "VAL", "TEST"))
    f.add_argument("--split-seed", type=int, default=0)
    f.add_argument("--no-standardize", action="store_true", help="disable per-feature z-scoring")


def _train_config(a, seed: int | None = None, variant: str | None = None) -> TrainConfig:
    return TrainConfig(
        learning_rate=a.learning_rate, batch_size=a.batch_size, epsilon_mix=a.epsilon_mix,
        max_steps=a.max_steps, early_stop_window=a.early_stop_window, eval_every=a.eval_every,
        seed=a.seed if seed is None else seed, variant=variant or a.variant, rho=a.rho, rms_eps=a.rms_eps,
        channels1=a.channels1, channels2=a.channels2, kernel=a.kernel, hidden=a.hidden,
    )


def _sweep_settings(a) -> SweepSettings:
    return SweepSettings(
        base=_train_config(a), variants=tuple(a.variants.split(",")), seeds=tuple(_seeds(a.seeds)),
        split_ratios=tuple(a.split), split_seed=a.split_seed, mask_policy=a.mask_policy,
        mask_seed=a.mask_seed, obs_fraction=a.obs_fraction, standardize=not a.no_standardize,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="linefault", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)
    jobs_default = int(os.environ.get("LINEFAULT_JOBS", "1"))

    def common(p):
        p.add_argument("--config", help="JSON file of option values (flags override)")
        p.add_argument("--seed", type=int, default=0, help="root seed for every random substream")
        p.add_argument("--jobs", type=int, default=jobs_default, help="worker processes (results do not depend on it)")

    p = sub.add_parser("simulate", help="simulate fault scenarios into a dataset file")
    common(p)
    p.add_argument("--case", required=False, help="case file path or bundled name (case9, case39)")
    p.add_argument("--plan", help="JSON scenario plan file")
    p.add_argument("--per-line", type=int, default=0, help="scenarios per line and fault type")
    p.add_argument("--types", default="TP,LG,DLG,LL", help="comma-separated fault types")
    p.add_argument("--none", type=int, default=0, help="number of no-fault scenarios")
    p.add_argument("--fault-admittance", type=float, nargs=2, default=[5.0, 50.0], metavar=("LO", "HI"))
    p.add_argument("--location", type=float, default=None, help="fixed fault location (default uniform)")
    p.add_argument("--jitter", type=float, default=0.1, help="multiplicative injection jitter")
    p.add_argument("--out", help="dataset file (default dataset.lfds)")

    p = sub.add_parser("train", help="train a classifier on a dataset file")
    common(p)
    p.add_argument("--dataset", required=False)
    p.add_argument("--out", help="run directory (default run)")
    _add_train_flags(p)
    p.add_argument("--cv", action="store_true", help="select learning rate, batch size and epsilon by cross-validation")
    p.add_argument("--cv-learning-rates", default="0.0005,0.001,0.002")
    p.add_argument("--cv-batch-sizes", default="32,64")
    p.add_argument("--cv-epsilons", default="0.0,0.1,0.2,0.3")
    p.add_argument("--cv-folds", type=int, default=3)

    p = sub.add_parser("eval", help="evaluate a trained run on its test split")
    common(p)
    p.add_argument("--run", required=False)
    p.add_argument("--dataset", help="override the dataset recorded in the run")
    p.add_argument("--top-k", type=int, default=5)

    for name, helptext in (("sweep-observability", "accuracy vs fraction of observed buses"),
                           ("sweep-trainsize", "accuracy vs training-set size"),
                           ("sweep-snr", "accuracy vs measurement SNR")):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.add_argument("--dataset", required=False)
        p.add_argument("--out", help="report directory (default report)")
        p.add_argument("--seeds", default="10", help="count (0..N-1) or comma list")
        p.add_argument("--variants", default="no_neighbors,with_neighbors")
        p.add_argument("--plot", action="store_true", help="also render the sweep plot")
        _add_train_flags(p)
        if name == "sweep-observability":
            p.add_argument("--fractions", default=",".join(map(str, OBS_FRACTIONS)))
        elif name == "sweep-trainsize":
            p.add_argument("--fractions", default=",".join(map(str, TRAIN_FRACTIONS)))
        else:
            p.add_argument("--snr-levels", default=",".join(str(int(s)) for s in SNR_LEVELS),
                           help="dB values; 'inf' adds the noise-free reference")
        if name != "sweep-trainsize":
            p.add_argument("--epsilon-grid", default=None,
                           help="comma list; re-select epsilon per sweep point by cross-validation")
            p.add_argument("--cv-folds", type=int, default=3)

    p = sub.add_parser("compare", help="Mann-Whitney comparison of two variants in a report")
    common(p)
    p.add_argument("--report", required=False, help="report directory")
    p.add_argument("--sweep", default="observability", help="report name inside the directory")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--variant-a", default="with_neighbors")
    p.add_argument("--variant-b", default="no_neighbors")
    p.add_argument("--fault-type", default="ALL")
    p.add_argument("--exclude-full", action="store_true", help="drop full-observability / 100%% cells")

    p = sub.add_parser("plot", help="render accuracy curves of a report")
    common(p)
    p.add_argument("--report", required=False)
    p.add_argument("--sweep", default="observability")
    p.add_argument("--fault-type", default="ALL")
    p.add_argument("--out", help="image path (default <report>/<sweep>.png)")
    return parser


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}", EXIT_INPUT) from exc
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(cfg) - known
        if unknown:
            raise CliError(f"unknown config keys: {sorted(unknown)}", EXIT_INPUT)
        sub.set_defaults(**cfg)
        args = parser.parse_args(argv)
    return args


def _require(args, *names):
    for n in names:
        if getattr(args, n, None) in (None, ""):
            raise CliError(f"--{n.replace('_', '-')} is required", EXIT_INPUT)


def _resolved(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("jobs", "log_level", "config")}


# ------------------------------------------------------------------ commands

def cmd_simulate(args) -> Path:
    _require(args, "case")
    try:
        topo = load_case(args.case)
    except (OSError, ValueError, TopologyError) as exc:
        raise CliError(f"cannot load case {args.case}: {exc}", EXIT_INPUT) from exc
    try:
        if args.plan:
            plan = ScenarioPlan.from_dict(json.loads(Path(args.plan).read_text()))
        else:
            types = [t for t in args.types.split(",") if t]
            plan = ScenarioPlan(counts={t: args.per_line for t in types if args.per_line > 0},
                                none_count=args.none, fault_admittance=tuple(args.fault_admittance),
                                location=args.location, injection_jitter=args.jitter)
        if plan.total(topo.m) == 0:
            raise ValueError("scenario plan is empty")
    except (OSError, ValueError, TypeError) as exc:
        raise CliError(f"invalid plan: {exc}", EXIT_INPUT) from exc
    out = _out_path(args.out, "dataset.lfds")
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        scenarios = generate_dataset(topo, plan, args.seed, jobs=args.jobs)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_INPUT) from exc
    digest = save_scenarios(out, topo, scenarios, plan=plan, seed=args.seed)
    _write_json(Path(f"{out}.config.json"), {"resolved": _resolved(args), "plan": plan.to_dict(),
                                              "grid_digest": topo.digest(), "dataset_digest": digest})
    print(f"{out}: {len(scenarios)} scenarios, digest {digest}")
    return out


def _load_dataset_file(path):
    try:
        return load_scenarios(path)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"cannot read dataset {path}: {exc}", EXIT_INPUT) from exc


def _featurize(args, topo, scenarios):
    Y0 = build_admittance(topo)
    mask = full_mask(topo.n) if args.obs_fraction >= 1.0 else make_mask(
        topo.n, args.obs_fraction, args.mask_policy, args.mask_seed, topo.slack)
    return build_dataset(scenarios, topo, Y0, mask, tuple(args.split), args.split_seed,
                         standardize=not args.no_standardize)


def cmd_train(args) -> Path:
    _require(args, "dataset")
    topo, scenarios, header = _load_dataset_file(args.dataset)
    try:
        ds = _featurize(args, topo, scenarios)
        config = _train_config(args)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_INPUT) from exc
    out = _out_path(args.out, "run")
    out.mkdir(parents=True, exist_ok=True)
    if args.cv:
        grid = {"learning_rate": _floats(args.cv_learning_rates), "batch_size": _ints(args.cv_batch_sizes),
                "epsilon_mix": _floats(args.cv_epsilons)}
        config = cross_validate(ds, grid, args.cv_folds, args.seed, base=config, jobs=args.jobs)
    resolved = {"resolved": _resolved(args), "train_config": config.to_dict(),
                "dataset_digest": file_digest(args.dataset), "dataset_path": str(Path(args.dataset).resolve()),
                "samples_provenance": ds.provenance}
    _write_json(out / "config.json", resolved)
    hist_path = out / "history.jsonl"
    with open(hist_path, "w") as fh:
        def record(rec):
            fh.write(canonical_json(rec) + "\n")
        try:
            params, history = train(ds, config, on_record=record)
        except (TrainingDivergence, FloatingPointError) as exc:
            record({"kind": "diverged", "message": str(exc)})
            raise CliError(f"training diverged: {exc}", EXIT_TRAIN) from exc
        record({"kind": "summary", "stop_step": history.stop_step, "best_step": history.best_step,
                "best_val_loss": history.best_val_loss, "stopped_early": history.stopped_early,
                "epoch_orders": history.epoch_orders})
    # the digest covers what determines the weights, not where files live
    content = {k: v for k, v in resolved.items() if k not in ("dataset_path", "resolved")}
    save_checkpoint(out / "checkpoint.lfck", params, None, config_digest=digest_obj(content),
                    extra={"best_step": history.best_step})
    print(f"{out}: best step {history.best_step}, validation loss {history.best_val_loss:.6f}")
    return out


def cmd_eval(args) -> Path:
    _require(args, "run")
    run = Path(args.run)
    try:
        resolved = json.loads((run / "config.json").read_text())
        params, _, _ = load_checkpoint(run / "checkpoint.lfck")
    except (OSError, ValueError) as exc:
        raise CliError(f"run {run} is incomplete: {exc}", EXIT_EVAL) from exc
    dataset_path = args.dataset or resolved["dataset_path"]
    if not Path(dataset_path).exists():
        raise CliError(f"dataset {dataset_path} referenced by the run is missing", EXIT_EVAL)
    topo, scenarios, _ = _load_dataset_file(dataset_path)
    ra = argparse.Namespace(**resolved["resolved"])
    ds = _featurize(ra, topo, scenarios)
    report = evaluate_run(params, ds, args.top_k)
    report.config = {"run": str(run), "samples_provenance": ds.provenance}
    write_report(report, run, "eval")
    for c in report.sorted_cells():
        print(f"{c.fault_type:>4s} accuracy {c.accuracy:.2f}")
    return run


def _sweep(args, kind: str) -> Path:
    _require(args, "dataset")
    topo, scenarios, header = _load_dataset_file(args.dataset)
    try:
        settings = _sweep_settings(args)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_INPUT) from exc
    grid = _floats(args.epsilon_grid) if getattr(args, "epsilon_grid", None) else None
    if kind == "observability":
        report = run_observability_sweep(topo, scenarios, settings, _floats(args.fractions), jobs=args.jobs,
                                         epsilon_grid=grid, cv_folds=args.cv_folds, cv_seed=args.seed)
    elif kind == "trainsize":
        report = run_trainsize_sweep(topo, scenarios, settings, _floats(args.fractions), jobs=args.jobs)
    else:
        report = run_snr_sweep(topo, scenarios, settings, _floats(args.snr_levels), noise_seed=args.seed,
                               epsilon_grid=grid, cv_folds=args.cv_folds, jobs=args.jobs)
    report.config["dataset_digest"] = file_digest(args.dataset)
    out = _out_path(args.out, "report")
    paths = write_report(report, out, kind)
    _write_json(out / f"{kind}_config.json", _resolved(args))
    if args.plot:
        plot_report(report, out / f"{kind}.png")
    failed = [c for c in report.cells if c.accuracy is None]
    print(f"{paths['table']}: {len(report.cells)} cells, {len(failed)} failed, digest {report.digest()}")
    return out


def cmd_compare(args) -> Path:
    _require(args, "report")
    try:
        report = read_report(args.report, args.sweep)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read report: {exc}", EXIT_EVAL) from exc
    if args.exclude_full:
        report.cells = [c for c in report.cells if getattr(c, report.axis) != 1.0]
    try:
        sig = compare_variants(report, args.alpha, args.variant_a, args.variant_b, args.fault_type)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_EVAL) from exc
    _write_json(Path(args.report) / f"{args.sweep}_compare.json", sig)
    print(f"U={sig['U']:.1f} p={sig['p_value']:.4g} reject={sig['reject']} "
          f"(mean {sig['variant_a']} {sig['mean_a']:.2f} vs {sig['variant_b']} {sig['mean_b']:.2f})")
    return Path(args.report)


def cmd_plot(args) -> Path:
    _require(args, "report")
    try:
        report = read_report(args.report, args.sweep)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read report: {exc}", EXIT_EVAL) from exc
    out = Path(args.out) if args.out else Path(args.report) / f"{args.sweep}.png"
    plot_report(report, out, args.fault_type)
    print(out)
    return out


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep-observability": lambda a: _sweep(a, "observability"),
    "sweep-trainsize": lambda a: _sweep(a, "trainsize"),
    "sweep-snr": lambda a: _sweep(a, "snr"),
    "compare": cmd_compare,
    "plot": cmd_plot,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    started = time.time()
    try:
        args = parse_args(argv)
        logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
        target = COMMANDS[args.command](args)
    except CliError as exc:
        print(f"linefault: error: {exc}", file=sys.stderr)
        return exc.code
    # wall-clock data lives beside the outputs so the outputs themselves stay reproducible
    target = Path(target)
    meta = target / f"{args.command}.meta.json" if target.is_dir() else Path(f"{target}.meta.json")
    _write_meta(meta, argv, started)
    return 0


if __name__ == "__main__":
    sys.exit(main())
