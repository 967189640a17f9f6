"""Quasi-static fault simulation: AC power flow, fault admittance, noise and dataset generation.

The pre-fault state is the Newton-Raphson power-flow solution. The during-fault
state keeps the pre-fault nodal current injections frozen and re-solves the
linear network equation with a shunt fault admittance attached to the faulted
line's terminals.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ._util import file_digest, parallel_map, read_records, substream, write_records
from .grid import GridTopology, build_admittance, dumps_case, parse_case

log = logging.getLogger(__name__)

FAULT_TYPES = ("TP", "LG", "DLG", "LL")
NONE = "NONE"
TYPE_CODES = {t: i for i, t in enumerate((*FAULT_TYPES, NONE))}
TYPE_NAMES = {i: t for t, i in TYPE_CODES.items()}

# Positive-sequence severity factors per fault type.
DEFAULT_SEVERITY = {"TP": 1.0, "DLG": 0.6, "LL": 0.45, "LG": 0.3}

DATASET_MAGIC = b"LFDS"
DATASET_FORMAT = "linefault-dataset/1"


class PowerFlowDivergence(RuntimeError):
    def __init__(self, message: str, mismatch: float, iterations: int):
        super().__init__(message)
        self.mismatch = mismatch
        self.iterations = iterations


class SingularNetworkError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class VoltageState:
    voltages: np.ndarray
    iterations: int = 0
    mismatch: float = 0.0

    @property
    def v(self) -> np.ndarray:
        return np.abs(self.voltages)

    @property
    def theta(self) -> np.ndarray:
        return np.angle(self.voltages)


@dataclass(frozen=True)
class FaultSpec:
    fault_type: str
    line_id: int | None = None
    fault_admittance_magnitude: float = 20.0
    location_along_line: float = 0.5

    def __post_init__(self):
        if self.fault_type not in TYPE_CODES:
            raise ValueError(f"unknown fault type {self.fault_type!r}")
        if (self.fault_type == NONE) != (self.line_id is None):
            raise ValueError("fault_type NONE must come with line_id=None and vice versa")
        if self.fault_admittance_magnitude < 0:
            raise ValueError("fault admittance magnitude must be >= 0")
        if not 0.0 <= self.location_along_line <= 1.0:
            raise ValueError("location_along_line must lie in [0, 1]")

    @property
    def label(self) -> int | None:
        return self.line_id


@dataclass(frozen=True)
class FaultScenario:
    spec: FaultSpec
    pre_fault: VoltageState
    during_fault: VoltageState
    injection_profile_id: str = ""

    @property
    def delta_u(self) -> np.ndarray:
        return self.during_fault.voltages - self.pre_fault.voltages


def power_mismatch(Y: np.ndarray, V: np.ndarray, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Complex per-bus mismatch ``S_calc - S_spec``."""
    return V * np.conj(Y @ V) - (p + 1j * q)


def solve_powerflow(topology: GridTopology, tol: float = 1e-8, max_iter: int = 50,
                    Y: np.ndarray | None = None) -> VoltageState:
    """Full Newton-Raphson in polar coordinates from a flat start."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    if Y is None:
        Y = build_admittance(topology)
    kinds = [b.kind for b in topology.buses]
    pv = np.array([i for i, k in enumerate(kinds) if k == "PV"], dtype=int)
    pq = np.array([i for i, k in enumerate(kinds) if k == "PQ"], dtype=int)
    pvpq = np.r_[pv, pq]
    p = np.array([b.p_inj for b in topology.buses])
    q = np.array([b.q_inj for b in topology.buses])
    vm = np.array([1.0 if k == "PQ" else b.v_setpoint for k, b in zip(kinds, topology.buses)])
    va = np.zeros(topology.n)
    npvpq = len(pvpq)

    it = 0
    while True:
        V = vm * np.exp(1j * va)
        mis = power_mismatch(Y, V, p, q)
        F = np.r_[mis.real[pvpq], mis.imag[pq]]
        norm = float(np.max(np.abs(F))) if F.size else 0.0
        if norm < tol:
            return VoltageState(V, iterations=it, mismatch=norm)
        if it >= max_iter or not np.isfinite(norm):
            raise PowerFlowDivergence(
                f"power flow did not converge in {max_iter} iterations (mismatch {norm:.3e})", norm, it)
        Ibus = Y @ V
        Vn = V / vm
        dS_dVm = np.diag(V) @ np.conj(Y @ np.diag(Vn)) + np.diag(np.conj(Ibus) * Vn)
        dS_dVa = 1j * np.diag(V) @ np.conj(np.diag(Ibus) - Y @ np.diag(V))
        J = np.block([
            [dS_dVa[np.ix_(pvpq, pvpq)].real, dS_dVm[np.ix_(pvpq, pq)].real],
            [dS_dVa[np.ix_(pq, pvpq)].imag, dS_dVm[np.ix_(pq, pq)].imag],
        ])
        dx = np.linalg.solve(J, -F)
        va[pvpq] += dx[:npvpq]
        vm[pq] += dx[npvpq:]
        it += 1


def fault_shunt(spec: FaultSpec, severity: dict[str, float] | None = None) -> float:
    factors = DEFAULT_SEVERITY if severity is None else severity
    return spec.fault_admittance_magnitude * factors[spec.fault_type]


def apply_fault(Y0: np.ndarray, topology: GridTopology, spec: FaultSpec,
                severity: dict[str, float] | None = None) -> np.ndarray:
    """Faulted admittance matrix: shunt split ``(1-loc)`` to the from bus and ``loc`` to the to bus."""
    if spec.fault_type == NONE:
        raise ValueError("apply_fault called with fault type NONE")
    line = topology.lines[spec.line_id]
    yf = fault_shunt(spec, severity)
    loc = spec.location_along_line
    Yf = Y0.copy()
    Yf[line.from_bus, line.from_bus] += (1.0 - loc) * yf
    Yf[line.to_bus, line.to_bus] += loc * yf
    return Yf


def jitter_injections(topology: GridTopology, jitter: float, rng: np.random.Generator) -> GridTopology:
    if not 0.0 <= jitter <= 0.5:
        raise ValueError("injection jitter must lie in [0, 0.5]")
    factor = rng.uniform(1.0 - jitter, 1.0 + jitter, size=topology.n)
    p = np.array([b.p_inj for b in topology.buses]) * factor
    q = np.array([b.q_inj for b in topology.buses]) * factor
    return topology.with_injections(p, q)


def simulate_scenario(topology: GridTopology, spec: FaultSpec, injection_jitter: float = 0.1,
                      rng_seed: int = 0, *, severity: dict[str, float] | None = None,
                      tol: float = 1e-8, max_iter: int = 50) -> FaultScenario:
    Y0 = build_admittance(topology)
    loaded = jitter_injections(topology, injection_jitter, substream(rng_seed, "injection"))
    pre = solve_powerflow(loaded, tol=tol, max_iter=max_iter, Y=Y0)
    if spec.fault_type == NONE:
        during = pre
    else:
        Yf = apply_fault(Y0, topology, spec, severity)
        if np.linalg.cond(Yf) > 1e14:
            raise SingularNetworkError(f"faulted admittance matrix is singular for {spec}")
        during = VoltageState(np.linalg.solve(Yf, Y0 @ pre.voltages))
    return FaultScenario(spec, pre, during, injection_profile_id=f"{rng_seed}")


def add_noise(signal: np.ndarray, snr_db: float, rng_seed: int | np.random.Generator) -> np.ndarray:
    """Add circular complex Gaussian noise at ``snr_db`` relative to the signal's mean-square.

    ``snr_db = inf`` is the no-noise sentinel and returns a copy of the input.
    """
    signal = np.asarray(signal, dtype=complex)
    if math.isinf(snr_db) and snr_db > 0:
        return signal.copy()
    if not math.isfinite(snr_db):
        raise ValueError("snr_db must be finite or +inf")
    p_signal = float(np.mean(np.abs(signal) ** 2))
    if p_signal == 0.0:
        raise ValueError("signal has zero power")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else substream(rng_seed, "noise")
    p_noise = p_signal / 10.0 ** (snr_db / 10.0)
    sigma = math.sqrt(p_noise / 2.0)
    noise = rng.normal(0.0, sigma, signal.shape) + 1j * rng.normal(0.0, sigma, signal.shape)
    return signal + noise


def measured_snr_db(clean: np.ndarray, noisy: np.ndarray) -> float:
    noise = np.asarray(noisy) - np.asarray(clean)
    return 10.0 * math.log10(np.mean(np.abs(clean) ** 2) / np.mean(np.abs(noise) ** 2))


def add_noise_to_scenarios(scenarios: list[FaultScenario], snr_db: float, seed: int) -> list[FaultScenario]:
    """Noise both phasor snapshots of every scenario; stream keyed by (seed, scenario index)."""
    if math.isinf(snr_db):
        return list(scenarios)
    out = []
    for i, sc in enumerate(scenarios):
        rng = substream(seed, "measurement-noise", i)
        pre = VoltageState(add_noise(sc.pre_fault.voltages, snr_db, rng))
        during = VoltageState(add_noise(sc.during_fault.voltages, snr_db, rng))
        out.append(FaultScenario(sc.spec, pre, during, sc.injection_profile_id))
    return out


@dataclass
class ScenarioPlan:
    """How many scenarios to simulate.

    ``counts`` maps fault type -> scenarios per line. Fault admittance magnitude is
    drawn log-uniformly from ``fault_admittance`` and the location uniformly from
    [0, 1] unless ``location`` fixes it.
    """

    counts: dict[str, int] = field(default_factory=dict)
    none_count: int = 0
    lines: list[int] | None = None
    fault_admittance: tuple[float, float] = (5.0, 50.0)
    location: float | None = None
    injection_jitter: float = 0.1
    mixed_test: bool = True

    def __post_init__(self):
        for t, c in self.counts.items():
            if t not in FAULT_TYPES:
                raise ValueError(f"unknown fault type in plan: {t!r}")
            if c < 0:
                raise ValueError("plan counts must be non-negative")
        if self.none_count < 0:
            raise ValueError("none_count must be non-negative")
        lo, hi = self.fault_admittance
        if not 0 < lo <= hi:
            raise ValueError("fault_admittance range must satisfy 0 < lo <= hi")
        self.fault_admittance = (float(lo), float(hi))

    def total(self, m: int) -> int:
        nlines = m if self.lines is None else len(self.lines)
        return nlines * sum(self.counts.values()) + self.none_count

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fault_admittance"] = list(self.fault_admittance)
        d["counts"] = {t: self.counts[t] for t in FAULT_TYPES if t in self.counts}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ScenarioPlan:
        d = dict(d)
        if "fault_admittance" in d:
            d["fault_admittance"] = tuple(d["fault_admittance"])
        return cls(**d)


def plan_specs(topology: GridTopology, plan: ScenarioPlan, rng_seed: int) -> list[tuple[FaultSpec, int]]:
    """Deterministic (spec, injection seed) list in plan order: type, line, repetition, then NONE."""
    lines = list(range(topology.m)) if plan.lines is None else list(plan.lines)
    for k in lines:
        if not 0 <= k < topology.m:
            raise ValueError(f"plan references line {k}, grid has {topology.m} lines")
    if plan.total(topology.m) == 0:
        raise ValueError("scenario plan is empty")
    lo, hi = plan.fault_admittance
    out = []
    idx = 0
    for ftype in FAULT_TYPES:
        for k in lines:
            for _ in range(plan.counts.get(ftype, 0)):
                rng = substream(rng_seed, "scenario", idx)
                mag = float(math.exp(rng.uniform(math.log(lo), math.log(hi))))
                loc = float(rng.uniform(0.0, 1.0)) if plan.location is None else float(plan.location)
                inj = int(rng.integers(0, 2**62))
                out.append((FaultSpec(ftype, k, mag, loc), inj))
                idx += 1
    for _ in range(plan.none_count):
        rng = substream(rng_seed, "scenario", idx)
        out.append((FaultSpec(NONE, None, 0.0, 0.0), int(rng.integers(0, 2**62))))
        idx += 1
    return out


def _simulate_job(args):
    topology, spec, jitter, seed = args
    return simulate_scenario(topology, spec, jitter, seed)


def generate_dataset(topology: GridTopology, plan: ScenarioPlan, rng_seed: int, jobs: int = 1) -> list[FaultScenario]:
    specs = plan_specs(topology, plan, rng_seed)
    return parallel_map(_simulate_job, [(topology, s, plan.injection_jitter, seed) for s, seed in specs], jobs)


def _scenario_dtype(n: int) -> np.dtype:
    return np.dtype([
        ("fault_type", "<i1"), ("line_id", "<i4"), ("fault_admittance", "<f8"), ("location", "<f8"),
        ("profile", "<i8"), ("pre", "<c16", (n,)), ("during", "<c16", (n,)),
    ])


def save_scenarios(path, topology: GridTopology, scenarios: list[FaultScenario], *,
                   plan: ScenarioPlan | None = None, seed: int | None = None,
                   noise: dict | None = None) -> str:
    """Write a dataset file; returns its content digest."""
    n = topology.n
    rec = np.zeros(len(scenarios), dtype=_scenario_dtype(n))
    for i, sc in enumerate(scenarios):
        rec[i] = (
            TYPE_CODES[sc.spec.fault_type], -1 if sc.spec.line_id is None else sc.spec.line_id,
            sc.spec.fault_admittance_magnitude, sc.spec.location_along_line,
            int(sc.injection_profile_id or 0), sc.pre_fault.voltages, sc.during_fault.voltages,
        )
    case_text = dumps_case(topology)
    header = {
        "format": DATASET_FORMAT,
        "case": case_text,
        "grid_digest": topology.digest(),
        "plan": None if plan is None else plan.to_dict(),
        "seed": seed,
        "noise": noise,
        "count": len(scenarios),
    }
    write_records(path, DATASET_MAGIC, header, {"scenarios": rec})
    return file_digest(path)


def load_scenarios(path) -> tuple[GridTopology, list[FaultScenario], dict]:
    header, arrays = read_records(path, DATASET_MAGIC)
    if header.get("format") != DATASET_FORMAT:
        raise ValueError(f"{path}: unsupported dataset format {header.get('format')!r}")
    topology = parse_case(header["case"])
    out = []
    for r in arrays["scenarios"]:
        ftype = TYPE_NAMES[int(r["fault_type"])]
        line = None if ftype == NONE else int(r["line_id"])
        spec = FaultSpec(ftype, line, float(r["fault_admittance"]), float(r["location"]))
        pre = VoltageState(np.array(r["pre"]))
        during = pre if ftype == NONE and np.array_equal(r["pre"], r["during"]) else VoltageState(np.array(r["during"]))
        out.append(FaultScenario(spec, pre, during, str(int(r["profile"]))))
    return topology, out, header
