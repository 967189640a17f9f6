"""Samples from scenarios: substitution features, observability masks and neighbor targets.

Features are ``psi = dU @ Y0`` where ``dU`` is the during-minus-pre fault voltage
change (zero at unobserved buses) and ``Y0`` the pre-fault network admittance
matrix; the network consumes ``[Re psi, Im psi]``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ._util import digest_arrays, read_records, substream, write_records
from .faults import NONE, FaultScenario
from .grid import GridTopology, line_hop_distances

log = logging.getLogger(__name__)

SAMPLES_MAGIC = b"LFSM"
SAMPLES_FORMAT = "linefault-samples/1"
SPLITS = ("train", "validation", "test")


@dataclass(frozen=True)
class ObservabilityMask:
    observed_buses: frozenset[int]
    fraction: float
    n: int

    def vector(self) -> np.ndarray:
        v = np.zeros(self.n, dtype=bool)
        v[sorted(self.observed_buses)] = True
        return v

    def apply(self, delta_u: np.ndarray) -> np.ndarray:
        """Zero-fill unobserved entries (last axis indexes buses)."""
        return np.where(self.vector(), delta_u, 0)


def full_mask(n: int) -> ObservabilityMask:
    return ObservabilityMask(frozenset(range(n)), 1.0, n)


def make_mask(n: int, fraction: float, policy: str = "first_d", rng_seed: int = 0,
              slack: int = 0) -> ObservabilityMask:
    """PMU placement covering ``round(fraction * n)`` buses, always including the slack.

    ``first_d`` takes the slack plus the lowest-numbered remaining buses, which is
    buses ``0..d-1`` when the slack is bus 0 (as in the shipped cases).
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    d = int(round(fraction * n))
    if d < 1:
        raise ValueError(f"fraction {fraction} observes no bus on a {n}-bus grid")
    others = [i for i in range(n) if i != slack]
    if policy == "first_d":
        chosen = others[: d - 1]
    elif policy == "random":
        rng = substream(rng_seed, "mask")
        chosen = [others[i] for i in rng.choice(len(others), size=d - 1, replace=False)]
    else:
        raise ValueError(f"unknown mask policy {policy!r}")
    return ObservabilityMask(frozenset([slack, *chosen]), fraction, n)


def compute_features(scenario: FaultScenario | np.ndarray, Y0: np.ndarray,
                     mask: ObservabilityMask | None = None) -> np.ndarray:
    """``[Re psi; Im psi]`` for one scenario, or row-wise for a stacked ``(N, n)`` array of voltage deltas."""
    du = scenario.delta_u if isinstance(scenario, FaultScenario) else np.asarray(scenario)
    if du.shape[-1] != Y0.shape[0]:
        raise ValueError(f"voltage delta has {du.shape[-1]} buses, admittance matrix has {Y0.shape[0]}")
    if mask is not None:
        if mask.n != Y0.shape[0]:
            raise ValueError("mask size does not match the grid")
        du = mask.apply(du)
    psi = du @ Y0
    return np.concatenate([psi.real, psi.imag], axis=-1)


def build_targets(fault_line: int | None, topology: GridTopology, hops: int = 1,
                  hop_decay: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """One-hot target and neighbor target for a fault at ``fault_line`` (``None`` = normal state).

    With ``hops=1`` the neighbor target spreads unit mass uniformly over the lines
    adjacent to the faulted one. ``hops > 1`` extends the support to the k-hop ring
    with weight ``hop_decay**(hop-1)`` before normalization.
    """
    m = topology.m
    y = np.zeros(m + 1)
    y_hat = np.zeros(m + 1)
    if fault_line is None:
        y[m] = 1.0
        return y, y_hat
    y[fault_line] = 1.0
    dist = line_hop_distances(topology, fault_line, hops)
    if not dist:
        return y, y_hat
    if hops == 1:
        w = 1.0 / len(dist)
        for i in dist:
            y_hat[i] = w
    else:
        for i, h in dist.items():
            y_hat[i] = hop_decay ** (h - 1)
        y_hat /= y_hat.sum()
    return y, y_hat


def label_of(scenario: FaultScenario, m: int) -> int:
    return m if scenario.spec.fault_type == NONE else int(scenario.spec.line_id)


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    y: np.ndarray
    y_hat: np.ndarray
    scenario_id: int
    fault_type: str


@dataclass
class SampleSet:
    """Column-stacked samples of one split."""

    X: np.ndarray
    Y: np.ndarray
    Y_hat: np.ndarray
    scenario_ids: np.ndarray
    fault_types: np.ndarray

    def __len__(self) -> int:
        return len(self.X)

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.Y, axis=1)

    def subset(self, idx) -> SampleSet:
        idx = np.asarray(idx, dtype=int)
        return SampleSet(self.X[idx], self.Y[idx], self.Y_hat[idx], self.scenario_ids[idx], self.fault_types[idx])

    def __iter__(self):
        for i in range(len(self)):
            yield Sample(self.X[i], self.Y[i], self.Y_hat[i], int(self.scenario_ids[i]), str(self.fault_types[i]))

    @classmethod
    def concat(cls, parts: list[SampleSet]) -> SampleSet:
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                     ("X", "Y", "Y_hat", "scenario_ids", "fault_types")))


@dataclass
class Dataset:
    train: SampleSet
    validation: SampleSet
    test: SampleSet
    n: int
    m: int
    provenance: str = ""
    feature_mean: np.ndarray | None = None
    feature_std: np.ndarray | None = None
    warnings: list[str] = field(default_factory=list)

    def split(self, name: str) -> SampleSet:
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)

    def digest(self) -> str:
        parts = []
        for s in SPLITS:
            ss = self.split(s)
            parts += [ss.X, ss.Y, ss.Y_hat, ss.scenario_ids]
        return digest_arrays(*parts)


def stratified_split(labels: np.ndarray, ratios: tuple[float, float, float], rng: np.random.Generator,
                     warnings: list[str] | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-label shuffle and split. Classes too small for every requested split stay in train."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must be three non-negative numbers summing to 1")
    needed = sum(r > 0 for r in ratios)
    parts: tuple[list, list, list] = ([], [], [])
    for lab in np.unique(labels):
        idx = np.flatnonzero(labels == lab)
        idx = idx[rng.permutation(len(idx))]
        c = len(idx)
        if c < needed:
            msg = f"class {int(lab)} has {c} samples for {needed} splits; assigned to train"
            log.warning(msg)
            if warnings is not None:
                warnings.append(msg)
            parts[0].extend(idx)
            continue
        n_val = int(round(ratios[1] * c))
        n_test = int(round(ratios[2] * c))
        if ratios[1] > 0:
            n_val = max(n_val, 1)
        if ratios[2] > 0:
            n_test = max(n_test, 1)
        if ratios[0] > 0:
            n_train = c - n_val - n_test
            while n_train < 1:
                if n_val >= n_test and n_val > 1:
                    n_val -= 1
                elif n_test > 1:
                    n_test -= 1
                else:
                    break
                n_train = c - n_val - n_test
        else:
            n_val = c - n_test
        parts[1].extend(idx[:n_val])
        parts[2].extend(idx[n_val:n_val + n_test])
        parts[0].extend(idx[n_val + n_test:])
    return tuple(np.sort(np.asarray(p, dtype=int)) for p in parts)


def build_samples(scenarios: list[FaultScenario], topology: GridTopology, Y0: np.ndarray,
                  mask: ObservabilityMask | None = None, hops: int = 1) -> SampleSet:
    m = topology.m
    du = np.array([sc.delta_u for sc in scenarios]).reshape(len(scenarios), topology.n)
    X = compute_features(du, Y0, mask)
    targets = [build_targets(None if sc.spec.fault_type == NONE else sc.spec.line_id, topology, hops)
               for sc in scenarios]
    Y = np.array([t[0] for t in targets]).reshape(len(scenarios), m + 1)
    Y_hat = np.array([t[1] for t in targets]).reshape(len(scenarios), m + 1)
    ids = np.arange(len(scenarios))
    ftypes = np.array([sc.spec.fault_type for sc in scenarios], dtype="<U4")
    return SampleSet(X, Y, Y_hat, ids, ftypes)


def build_dataset(scenarios: list[FaultScenario], topology: GridTopology, Y0: np.ndarray,
                  mask: ObservabilityMask | None = None, split_ratios=(0.7, 0.15, 0.15),
                  rng_seed: int = 0, *, standardize: bool = True, hops: int = 1) -> Dataset:
    """Featurize, stratify by label into train/validation/test and z-score with train statistics."""
    allsamples = build_samples(scenarios, topology, Y0, mask, hops)
    warnings: list[str] = []
    tr, va, te = stratified_split(allsamples.labels, split_ratios, substream(rng_seed, "split"), warnings)
    mean = std = None
    if standardize and len(tr):
        mean = allsamples.X[tr].mean(axis=0)
        std = allsamples.X[tr].std(axis=0)
        # constant columns (e.g. far from every observed bus) pass through unscaled
        std = np.where(std > 1e-12, std, 1.0)
        allsamples.X = (allsamples.X - mean) / std
    prov = digest_arrays(allsamples.X, allsamples.Y, allsamples.Y_hat, tr, va, te)
    return Dataset(allsamples.subset(tr), allsamples.subset(va), allsamples.subset(te), topology.n, topology.m,
                   provenance=prov, feature_mean=mean, feature_std=std, warnings=warnings)


def _matrix(ss: SampleSet) -> np.ndarray:
    return np.hstack([ss.X, ss.Y, ss.Y_hat])


def column_names(n: int, m: int) -> list[str]:
    return ([f"re_psi_{i}" for i in range(n)] + [f"im_psi_{i}" for i in range(n)]
            + [f"y_{k}" for k in range(m + 1)] + [f"yhat_{k}" for k in range(m + 1)])


def export_csv(path, dataset: Dataset, split: str) -> None:
    """Delimited export. Column order: 2n features, m+1 one-hot targets, m+1 neighbor targets."""
    ss = dataset.split(split)
    with open(path, "w") as fh:
        fh.write(f"# {SAMPLES_FORMAT} provenance={dataset.provenance} split={split}\n")
        fh.write(",".join(["scenario_id", "fault_type", *column_names(dataset.n, dataset.m)]) + "\n")
        M = _matrix(ss)
        for sid, ft, row in zip(ss.scenario_ids, ss.fault_types, M):
            fh.write(f"{int(sid)},{ft}," + ",".join(repr(float(v)) for v in row) + "\n")


def export_binary(path, dataset: Dataset, split: str) -> None:
    ss = dataset.split(split)
    header = {"format": SAMPLES_FORMAT, "provenance": dataset.provenance, "split": split,
              "n": dataset.n, "m": dataset.m}
    write_records(path, SAMPLES_MAGIC, header, {
        "matrix": _matrix(ss), "scenario_ids": ss.scenario_ids.astype("<i8"),
        "fault_types": ss.fault_types.astype("<U4"),
    })


def read_binary(path) -> tuple[dict, SampleSet]:
    header, arr = read_records(path, SAMPLES_MAGIC)
    n, m = header["n"], header["m"]
    M = arr["matrix"]
    ss = SampleSet(M[:, :2 * n], M[:, 2 * n:2 * n + m + 1], M[:, 2 * n + m + 1:],
                   arr["scenario_ids"], arr["fault_types"])
    return header, ss
