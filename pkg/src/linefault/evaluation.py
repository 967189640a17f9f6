"""Metrics, candidate ranking, Mann-Whitney U test and the experiment sweeps."""
from __future__ import annotations

import csv
import json
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from ._util import canonical_json, digest_obj, parallel_map, substream
from .faults import FAULT_TYPES, FaultScenario, add_noise_to_scenarios
from .features import Dataset, SampleSet, build_dataset, full_mask, make_mask
from .grid import GridTopology, build_admittance
from .nn import ModelParams, predict
from .training import TrainConfig, TrainingDivergence, cross_validate, train

log = logging.getLogger(__name__)

REPORT_FORMAT = "linefault-report/1"
OBS_FRACTIONS = (1.0, 0.30, 0.25, 0.20, 0.15)
TRAIN_FRACTIONS = tuple(round(0.1 * k, 1) for k in range(10, 0, -1))
SNR_LEVELS = (40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 100.0)
ALL = "ALL"


def accuracy(predictions: Sequence[int], labels: Sequence[int]) -> float:
    """Percentage of predictions equal to their label."""
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if p.shape != y.shape:
        raise ValueError("predictions and labels differ in length")
    if p.size == 0:
        raise ValueError("accuracy of an empty set")
    return 100.0 * float(np.count_nonzero(p == y)) / p.size


class RankedCandidates(list):
    """``[(class_id, probability), ...]`` in descending probability; class ``m`` is the normal state."""


def rank_lines(probabilities: np.ndarray, k: int) -> RankedCandidates:
    p = np.asarray(probabilities, dtype=float)
    if not 1 <= k <= len(p):
        raise ValueError(f"k must lie in [1, {len(p)}]")
    order = np.lexsort((np.arange(len(p)), -p))[:k]
    return RankedCandidates((int(i), float(p[i])) for i in order)


def rankdata(values: np.ndarray) -> np.ndarray:
    """1-based ranks in ascending order; tied values share their average rank."""
    v = np.asarray(values, dtype=float)
    order = np.argsort(v, kind="mergesort")
    sv = v[order]
    ranks = np.empty(len(v))
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


class MannWhitneyResult(NamedTuple):
    u1: float
    u2: float
    statistic: float
    p_value: float
    reject: bool
    z: float


def _norm_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def mann_whitney_u(sample_a, sample_b, alpha: float = 0.05, alternative: str = "greater") -> MannWhitneyResult:
    """Rank-sum test of ``sample_a`` against ``sample_b``.

    ``u1 = n1*n2 + n1(n1+1)/2 - R1`` counts pairs where b beats a, ``u2`` the
    reverse, and ``statistic = max(u1, u2)``. The p-value uses the normal
    approximation with tie-corrected variance and a 0.5 continuity correction;
    ``alternative="greater"`` tests whether a tends to exceed b.
    """
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    n1, n2 = len(a), len(b)
    if n1 < 3 or n2 < 3:
        raise ValueError("Mann-Whitney test needs at least 3 observations per sample")
    if alternative not in ("greater", "two_sided"):
        raise ValueError("alternative must be 'greater' or 'two_sided'")
    ranks = rankdata(np.concatenate([a, b]))
    r1, r2 = ranks[:n1].sum(), ranks[n1:].sum()
    u1 = n1 * n2 + n1 * (n1 + 1) / 2.0 - r1
    u2 = n1 * n2 + n2 * (n2 + 1) / 2.0 - r2
    big_u = max(u1, u2)
    N = n1 + n2
    _, counts = np.unique(ranks, return_counts=True)
    tie = float(np.sum(counts ** 3 - counts))
    var = n1 * n2 / 12.0 * ((N + 1) - tie / (N * (N - 1)))
    if var <= 0:
        log.warning("Mann-Whitney: all observations identical; returning p = 1")
        return MannWhitneyResult(u1, u2, big_u, 1.0, False, 0.0)
    mu = n1 * n2 / 2.0
    if alternative == "greater":
        z = (u2 - mu - 0.5) / math.sqrt(var)
        p = _norm_sf(z)
    else:
        z = (big_u - mu - 0.5) / math.sqrt(var)
        p = min(1.0, 2.0 * _norm_sf(z))
    return MannWhitneyResult(u1, u2, big_u, p, p < alpha, z)


@dataclass(frozen=True)
class Cell:
    sweep: str
    variant: str
    fault_type: str
    obs_fraction: float
    train_fraction: float
    snr_db: float
    seed: int
    accuracy: float | None
    status: str = "ok"

    def key(self) -> tuple:
        return (self.sweep, self.variant, self.fault_type, self.obs_fraction, self.train_fraction,
                self.snr_db, self.seed)


SWEEP_AXIS = {"observability": "obs_fraction", "trainsize": "train_fraction", "snr": "snr_db", "eval": "obs_fraction"}


@dataclass
class EvalReport:
    sweep: str
    cells: list[Cell] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    significance: dict = field(default_factory=dict)
    rankings: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def sorted_cells(self) -> list[Cell]:
        return sorted(self.cells, key=lambda c: c.key())

    @property
    def axis(self) -> str:
        return SWEEP_AXIS[self.sweep]

    def values(self, variant: str, fault_type: str = ALL, **fixed) -> dict[float, list[float]]:
        """Per-seed accuracies grouped by the sweep axis value (failed cells skipped)."""
        out: dict[float, list[float]] = defaultdict(list)
        for c in self.sorted_cells():
            if c.variant != variant or c.fault_type != fault_type or c.accuracy is None:
                continue
            if any(getattr(c, k) != v for k, v in fixed.items()):
                continue
            out[getattr(c, self.axis)].append(c.accuracy)
        return dict(out)

    def means(self, variant: str, fault_type: str = ALL) -> dict[float, float]:
        return {k: float(np.mean(v)) for k, v in self.values(variant, fault_type).items()}

    def variants(self) -> list[str]:
        return sorted({c.variant for c in self.cells})

    def fault_types(self) -> list[str]:
        present = {c.fault_type for c in self.cells}
        return [t for t in (ALL, *FAULT_TYPES) if t in present]

    def digest(self) -> str:
        return digest_obj({"sweep": self.sweep, "cells": [asdict(c) for c in self.sorted_cells()],
                           "config": self.config, "significance": self.significance})


def per_type_accuracy(params: ModelParams, samples: SampleSet) -> dict[str, float]:
    pred = np.argmax(predict(params, samples.X), axis=1)
    labels = samples.labels
    out = {ALL: accuracy(pred, labels)}
    for t in FAULT_TYPES:
        sel = samples.fault_types == t
        if sel.any():
            out[t] = accuracy(pred[sel], labels[sel])
    return out


def _cell_job(args):
    sweep, dataset, config, coords = args
    try:
        params, _ = train(dataset, config)
        accs = per_type_accuracy(params, dataset.test)
        return [Cell(sweep, config.variant, t, **coords, seed=config.seed, accuracy=a) for t, a in accs.items()]
    except (TrainingDivergence, ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        log.warning("cell %s %s seed %d failed: %s", config.variant, coords, config.seed, exc)
        return [Cell(sweep, config.variant, ALL, **coords, seed=config.seed, accuracy=None,
                     status=f"failed: {exc}")]


def _variant_config(base: TrainConfig, variant: str, seed: int) -> TrainConfig:
    return replace(base, variant=variant, seed=seed)


def _run_cells(sweep: str, jobs_in: list, jobs: int) -> list[Cell]:
    cells = []
    for out in parallel_map(_cell_job, jobs_in, jobs):
        cells.extend(out)
    return cells


@dataclass(frozen=True)
class SweepSettings:
    """Shared knobs for all sweeps."""

    base: TrainConfig = TrainConfig()
    variants: tuple[str, ...] = ("no_neighbors", "with_neighbors")
    seeds: tuple[int, ...] = tuple(range(10))
    split_ratios: tuple[float, float, float] = (0.7, 0.15, 0.15)
    split_seed: int = 0
    mask_policy: str = "first_d"
    mask_seed: int = 0
    obs_fraction: float = 1.0
    standardize: bool = True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["base"] = self.base.to_dict()
        return d


def _dataset(topology, scenarios, settings: SweepSettings, obs_fraction: float) -> Dataset:
    Y0 = build_admittance(topology)
    mask = full_mask(topology.n) if obs_fraction >= 1.0 else make_mask(
        topology.n, obs_fraction, settings.mask_policy, settings.mask_seed, topology.slack)
    return build_dataset(scenarios, topology, Y0, mask, settings.split_ratios, settings.split_seed,
                         standardize=settings.standardize)


def _select_epsilon(ds: Dataset, base: TrainConfig, settings: SweepSettings, epsilon_grid, cv_folds: int,
                    seed: int, jobs: int) -> TrainConfig:
    """Re-pick ``epsilon_mix`` by cross-validation on the train split when a grid is given."""
    if epsilon_grid is None or len(epsilon_grid) < 2 or "with_neighbors" not in settings.variants:
        return base
    picked = cross_validate(ds, {"epsilon_mix": list(epsilon_grid)}, cv_folds, seed,
                            base=replace(base, variant="with_neighbors"), jobs=jobs)
    return replace(base, epsilon_mix=picked.epsilon_mix)


def run_observability_sweep(topology: GridTopology, scenarios: list[FaultScenario],
                            settings: SweepSettings = SweepSettings(),
                            fractions: Iterable[float] = OBS_FRACTIONS, jobs: int = 1,
                            epsilon_grid: Sequence[float] | None = None, cv_folds: int = 3,
                            cv_seed: int = 0) -> EvalReport:
    """Accuracy per (variant, fraction, fault type, seed); features recomputed per mask from raw scenarios.

    With more than one value in ``epsilon_grid`` the neighbor weight is chosen
    by cross-validation separately for each fraction.
    """
    fractions = [float(f) for f in fractions]
    jobs_in = []
    chosen = {}
    for frac in fractions:
        ds = _dataset(topology, scenarios, settings, frac)
        base = _select_epsilon(ds, settings.base, settings, epsilon_grid, cv_folds, cv_seed, jobs)
        chosen[repr(frac)] = base.epsilon_mix
        coords = {"obs_fraction": frac, "train_fraction": 1.0, "snr_db": math.inf}
        for variant in settings.variants:
            for seed in settings.seeds:
                jobs_in.append(("observability", ds, _variant_config(base, variant, seed), coords))
    config = {"settings": settings.to_dict(), "fractions": fractions}
    if epsilon_grid is not None:
        config.update(epsilon_grid=list(epsilon_grid), cv_folds=cv_folds, cv_seed=cv_seed)
    return EvalReport("observability", _run_cells("observability", jobs_in, jobs), config=config,
                      meta={"chosen_epsilon": chosen})


def subsample_train(dataset: Dataset, fraction: float, rng: np.random.Generator) -> Dataset:
    """Stratified subsample of the train split keeping at least one sample per present label."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("train fraction must lie in (0, 1]")
    if fraction >= 1.0:
        return dataset
    labels = dataset.train.labels
    keep = []
    for lab in np.unique(labels):
        idx = np.flatnonzero(labels == lab)
        idx = idx[rng.permutation(len(idx))]
        keep.extend(idx[:max(1, int(round(fraction * len(idx))))])
    sub = dataset.train.subset(np.sort(np.asarray(keep, dtype=int)))
    return replace(dataset, train=sub)


def run_trainsize_sweep(topology: GridTopology, scenarios: list[FaultScenario],
                        settings: SweepSettings = SweepSettings(),
                        fractions: Iterable[float] = TRAIN_FRACTIONS, jobs: int = 1) -> EvalReport:
    base_ds = _dataset(topology, scenarios, settings, settings.obs_fraction)
    jobs_in = []
    for frac in fractions:
        coords = {"obs_fraction": float(settings.obs_fraction), "train_fraction": float(frac), "snr_db": math.inf}
        for seed in settings.seeds:
            ds = subsample_train(base_ds, frac, substream(seed, "subsample", int(round(frac * 1000))))
            for variant in settings.variants:
                jobs_in.append(("trainsize", ds, _variant_config(settings.base, variant, seed), coords))
    return EvalReport("trainsize", _run_cells("trainsize", jobs_in, jobs),
                      config={"settings": settings.to_dict(), "fractions": [float(f) for f in fractions]})


def run_snr_sweep(topology: GridTopology, scenarios: list[FaultScenario],
                  settings: SweepSettings = SweepSettings(), snr_levels: Iterable[float] = SNR_LEVELS,
                  noise_seed: int = 0, epsilon_grid: Sequence[float] | None = None, cv_folds: int = 3,
                  jobs: int = 1) -> EvalReport:
    """Accuracy vs SNR with identical-SNR noise on train and test phasors.

    With more than one value in ``epsilon_grid`` the neighbor weight is
    re-selected by cross-validation at each noise level.
    """
    jobs_in = []
    chosen = {}
    for snr in snr_levels:
        noisy = scenarios
        if math.isfinite(snr):
            level_seed = int(substream(noise_seed, "snr", int(round(snr * 10))).integers(0, 2**62))
            noisy = add_noise_to_scenarios(scenarios, snr, level_seed)
        ds = _dataset(topology, noisy, settings, settings.obs_fraction)
        base = _select_epsilon(ds, settings.base, settings, epsilon_grid, cv_folds, noise_seed, jobs)
        chosen[repr(float(snr))] = base.epsilon_mix
        coords = {"obs_fraction": float(settings.obs_fraction), "train_fraction": 1.0, "snr_db": float(snr)}
        for variant in settings.variants:
            for seed in settings.seeds:
                jobs_in.append(("snr", ds, _variant_config(base, variant, seed), coords))
    return EvalReport("snr", _run_cells("snr", jobs_in, jobs),
                      config={"settings": settings.to_dict(), "snr_levels": [float(s) for s in snr_levels],
                              "noise_seed": noise_seed,
                              "epsilon_grid": None if epsilon_grid is None else list(epsilon_grid)},
                      meta={"chosen_epsilon": chosen})


def paired_observations(report: EvalReport, variant_a: str, variant_b: str,
                        fault_type: str = ALL) -> tuple[list[float], list[float]]:
    """Accuracies of two variants on matching (axis value, seed) cells, in key order."""
    def index(variant):
        return {(c.obs_fraction, c.train_fraction, c.snr_db, c.seed): c.accuracy for c in report.sorted_cells()
                if c.variant == variant and c.fault_type == fault_type and c.accuracy is not None}
    ia, ib = index(variant_a), index(variant_b)
    keys = sorted(set(ia) & set(ib))
    return [ia[k] for k in keys], [ib[k] for k in keys]


MIN_OBSERVATIONS = 10


def compare_variants(report: EvalReport, alpha: float = 0.05, variant_a: str = "with_neighbors",
                     variant_b: str = "no_neighbors", fault_type: str = ALL,
                     min_observations: int = MIN_OBSERVATIONS) -> dict:
    """One-sided test that ``variant_a`` accuracies exceed ``variant_b``'s."""
    a, b = paired_observations(report, variant_a, variant_b, fault_type)
    if variant_a == variant_b:
        a = b = [c.accuracy for c in report.sorted_cells()
                 if c.variant == variant_a and c.fault_type == fault_type and c.accuracy is not None]
    if len(a) < min_observations or len(b) < min_observations:
        raise ValueError(f"compare_variants needs at least {min_observations} paired observations per variant, "
                         f"got {len(a)} and {len(b)}")
    res = mann_whitney_u(a, b, alpha, "greater")
    out = {"variant_a": variant_a, "variant_b": variant_b, "fault_type": fault_type, "alpha": alpha,
           "n_a": len(a), "n_b": len(b), "mean_a": float(np.mean(a)), "mean_b": float(np.mean(b)),
           "U": res.statistic, "U1": res.u1, "U2": res.u2, "z": res.z, "p_value": res.p_value,
           "reject": bool(res.reject)}
    report.significance = out
    return out


def degradation_gap(report: EvalReport, variant: str, fault_type: str = ALL, full: float = 1.0,
                    partial: Sequence[float] = (0.30, 0.25, 0.20, 0.15)) -> float:
    """Mean over partial fractions of (full-observability mean accuracy - partial mean accuracy)."""
    means = report.means(variant, fault_type)
    return float(np.mean([means[full] - means[p] for p in partial]))


def evaluate_run(params: ModelParams, dataset: Dataset, top_k: int = 5, split: str = "test") -> EvalReport:
    samples = dataset.split(split)
    probs = predict(params, samples.X)
    accs = per_type_accuracy(params, samples)
    cells = [Cell("eval", "model", t, 1.0, 1.0, math.inf, 0, a) for t, a in accs.items()]
    k = min(top_k, probs.shape[1])
    rankings = [{"scenario_id": int(sid), "label": int(lab),
                 "candidates": [[c, p] for c, p in rank_lines(pr, k)]}
                for sid, lab, pr in zip(samples.scenario_ids, samples.labels, probs)]
    return EvalReport("eval", cells, rankings=rankings)


# ---------------------------------------------------------------- report files

CELL_COLUMNS = ("sweep", "variant", "fault_type", "obs_fraction", "train_fraction", "snr_db", "seed",
                "accuracy", "status")


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_report(report: EvalReport, out_dir, name: str | None = None) -> dict[str, Path]:
    """Write ``<name>_cells.csv`` (long format), ``<name>_table.csv`` (means) and ``<name>_summary.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    name = name or report.sweep
    paths = {"cells": out / f"{name}_cells.csv", "table": out / f"{name}_table.csv",
             "summary": out / f"{name}_summary.json"}
    with open(paths["cells"], "w", newline="") as fh:
        fh.write(f"# {REPORT_FORMAT} cells\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CELL_COLUMNS)
        for c in report.sorted_cells():
            w.writerow([_fmt(getattr(c, col)) for col in CELL_COLUMNS])
    variants = report.variants()
    ftypes = report.fault_types()
    axis_vals = sorted({getattr(c, report.axis) for c in report.cells}, reverse=True)
    with open(paths["table"], "w", newline="") as fh:
        fh.write(f"# {REPORT_FORMAT} table axis={report.axis}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([report.axis] + [f"{t}:{v}" for t in ftypes for v in variants])
        means = {(t, v): report.means(v, t) for t in ftypes for v in variants}
        for x in axis_vals:
            row = [_fmt(float(x))]
            for t in ftypes:
                for v in variants:
                    m = means[(t, v)].get(x)
                    row.append("" if m is None else f"{m:.2f}")
            w.writerow(row)
    summary = {"format": REPORT_FORMAT, "sweep": report.sweep, "digest": report.digest(),
               "config": report.config, "significance": report.significance, "meta": report.meta}
    if report.rankings:
        summary["rankings"] = report.rankings
    paths["summary"].write_text(json.dumps(json.loads(canonical_json(summary)), indent=1, sort_keys=True) + "\n")
    return paths


def read_report(out_dir, name: str) -> EvalReport:
    out = Path(out_dir)
    cells_path = out / f"{name}_cells.csv"
    summary_path = out / f"{name}_summary.json"
    if not cells_path.exists() or not summary_path.exists():
        raise FileNotFoundError(f"report {name!r} not found in {out}")
    summary = json.loads(summary_path.read_text())
    if summary.get("format") != REPORT_FORMAT:
        raise ValueError(f"{summary_path}: unsupported report format")
    cells = []
    with open(cells_path) as fh:
        rows = csv.DictReader(line for line in fh if not line.startswith("#"))
        for r in rows:
            cells.append(Cell(r["sweep"], r["variant"], r["fault_type"], float(r["obs_fraction"]),
                              float(r["train_fraction"]), float(r["snr_db"]), int(r["seed"]),
                              None if r["accuracy"] == "" else float(r["accuracy"]), r["status"]))
    return EvalReport(summary["sweep"], cells, summary.get("config", {}), summary.get("significance", {}),
                      summary.get("rankings", []), summary.get("meta", {}))


def plot_report(report: EvalReport, path, fault_type: str = ALL) -> Path:
    """Mean accuracy against the sweep axis, one curve per variant, with per-seed scatter."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for variant in report.variants():
        vals = report.values(variant, fault_type)
        xs = sorted(vals)
        xplot = [x if math.isfinite(x) else max([v for v in xs if math.isfinite(v)] or [0]) + 10 for x in xs]
        ax.plot(xplot, [np.mean(vals[x]) for x in xs], marker="o", label=variant)
        for xp, x in zip(xplot, xs):
            ax.scatter([xp] * len(vals[x]), vals[x], s=6, alpha=0.3)
    ax.set_xlabel(report.axis)
    ax.set_ylabel("accuracy, %")
    ax.set_title(f"{report.sweep} sweep ({fault_type})")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path
