"""Grid topology, bus admittance matrix and line-neighborhood queries.

Case file format
----------------
Plain text with two sections. ``#`` starts a comment; blank lines are ignored.

::

    [buses]
    # id  kind   p_inj  q_inj  v_set  g_shunt  b_shunt  [extra columns ignored]
    0     slack  0.0    0.0    1.0    0.0      0.0
    1     PQ     -0.9   -0.3   1.0    0.0      0.0

    [lines]
    # from  to  r      x      b_charging
    0       1   0.01   0.085  0.176

Bus ids must be ``0..n-1`` in order. All values are per-unit. ``p_inj``/``q_inj``
are net injections (generation minus load). Series impedance ``r + jx`` is
converted to admittance ``1/(r + jx)``; ``b_charging`` is the total line
charging susceptance, split half per end.
"""
from __future__ import annotations

import hashlib
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

BUS_KINDS = ("slack", "PV", "PQ")


class TopologyError(ValueError):
    """Raised for malformed or disconnected grids."""


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    p_inj: float = 0.0
    q_inj: float = 0.0
    v_setpoint: float = 1.0
    shunt_admittance: complex = 0j


@dataclass(frozen=True)
class Line:
    id: int
    from_bus: int
    to_bus: int
    series_admittance: complex
    charging_shunt: complex = 0j


@dataclass(frozen=True)
class GridTopology:
    """Immutable grid description. ``adjacency[i]`` holds the ids of lines sharing a bus with line ``i``."""

    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    adjacency: tuple[frozenset[int], ...] = field(init=False, repr=False)
    name: str = ""

    def __post_init__(self):
        buses = tuple(self.buses)
        lines = tuple(self.lines)
        object.__setattr__(self, "buses", buses)
        object.__setattr__(self, "lines", lines)
        n = len(buses)
        if n == 0:
            raise TopologyError("grid has no buses")
        for i, bus in enumerate(buses):
            if bus.id != i:
                raise TopologyError(f"bus ids must be 0..n-1 in order, got {bus.id} at position {i}")
            if bus.kind not in BUS_KINDS:
                raise TopologyError(f"bus {i}: unknown kind {bus.kind!r}")
        n_slack = sum(b.kind == "slack" for b in buses)
        if n_slack != 1:
            raise TopologyError(f"exactly one slack bus required, found {n_slack}")
        for k, line in enumerate(lines):
            if line.id != k:
                raise TopologyError(f"line ids must be 0..m-1 in order, got {line.id} at position {k}")
            if not (0 <= line.from_bus < n and 0 <= line.to_bus < n):
                raise TopologyError(f"line {k}: endpoint out of range")
            if line.from_bus == line.to_bus:
                raise TopologyError(f"line {k}: self-loop at bus {line.from_bus}")
            if line.series_admittance == 0:
                raise TopologyError(f"line {k}: zero series admittance")

        incident: list[list[int]] = [[] for _ in range(n)]
        for line in lines:
            incident[line.from_bus].append(line.id)
            incident[line.to_bus].append(line.id)
        adjacency = []
        for line in lines:
            nb = set(incident[line.from_bus]) | set(incident[line.to_bus])
            nb.discard(line.id)
            adjacency.append(frozenset(nb))
        object.__setattr__(self, "adjacency", tuple(adjacency))

    @property
    def n(self) -> int:
        return len(self.buses)

    @property
    def m(self) -> int:
        return len(self.lines)

    @property
    def slack(self) -> int:
        return next(b.id for b in self.buses if b.kind == "slack")

    def is_connected(self) -> bool:
        seen = {0}
        todo = deque([0])
        nbrs: list[set[int]] = [set() for _ in range(self.n)]
        for line in self.lines:
            nbrs[line.from_bus].add(line.to_bus)
            nbrs[line.to_bus].add(line.from_bus)
        while todo:
            for j in nbrs[todo.popleft()]:
                if j not in seen:
                    seen.add(j)
                    todo.append(j)
        return len(seen) == self.n

    def with_injections(self, p: np.ndarray, q: np.ndarray) -> GridTopology:
        """Copy with replaced bus injections (values for the slack bus are kept but unused)."""
        buses = tuple(
            Bus(b.id, b.kind, float(p[b.id]), float(q[b.id]), b.v_setpoint, b.shunt_admittance)
            for b in self.buses
        )
        return GridTopology(buses, self.lines, name=self.name)

    def digest(self) -> str:
        return hashlib.sha256(dumps_case(self).encode()).hexdigest()


def build_admittance(topology: GridTopology) -> np.ndarray:
    """Dense ``n x n`` complex bus admittance matrix (pi-model lines, parallel lines summed)."""
    if not topology.is_connected():
        raise TopologyError("topology is disconnected")
    n = topology.n
    Y = np.zeros((n, n), dtype=complex)
    for bus in topology.buses:
        Y[bus.id, bus.id] += bus.shunt_admittance
    for line in topology.lines:
        f, t, y = line.from_bus, line.to_bus, line.series_admittance
        half = line.charging_shunt / 2
        Y[f, f] += y + half
        Y[t, t] += y + half
        Y[f, t] -= y
        Y[t, f] -= y
    return Y


def _check_line(topology: GridTopology, line_id: int) -> None:
    if not 0 <= line_id < topology.m:
        raise IndexError(f"line id {line_id} out of range [0, {topology.m})")


def line_neighbors(topology: GridTopology, line_id: int) -> set[int]:
    """Lines sharing at least one endpoint with ``line_id``, excluding itself."""
    _check_line(topology, line_id)
    return set(topology.adjacency[line_id])


def k_hop_line_neighbors(topology: GridTopology, line_id: int, k: int) -> set[int]:
    if k < 1:
        raise ValueError("k must be >= 1")
    return set(line_hop_distances(topology, line_id, k))


def line_hop_distances(topology: GridTopology, line_id: int, k: int) -> dict[int, int]:
    """Map of line id -> hop distance (1..k) in the line graph, excluding ``line_id``."""
    _check_line(topology, line_id)
    dist = {line_id: 0}
    frontier = [line_id]
    for hop in range(1, k + 1):
        nxt = []
        for a in frontier:
            for b in topology.adjacency[a]:
                if b not in dist:
                    dist[b] = hop
                    nxt.append(b)
        if not nxt:
            break
        frontier = nxt
    del dist[line_id]
    return dist


def parse_case(text: str, name: str = "") -> GridTopology:
    section = None
    buses: list[Bus] = []
    lines: list[Line] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        row = raw.split("#", 1)[0].strip()
        if not row:
            continue
        if row.startswith("["):
            section = row.strip("[]").strip().lower()
            if section not in ("buses", "lines"):
                raise TopologyError(f"line {lineno}: unknown section {row}")
            continue
        cols = row.split()
        try:
            if section == "buses":
                buses.append(Bus(
                    id=int(cols[0]), kind=cols[1], p_inj=float(cols[2]), q_inj=float(cols[3]),
                    v_setpoint=float(cols[4]), shunt_admittance=complex(float(cols[5]), float(cols[6])),
                ))
            elif section == "lines":
                r, x, b = float(cols[2]), float(cols[3]), float(cols[4])
                lines.append(Line(
                    id=len(lines), from_bus=int(cols[0]), to_bus=int(cols[1]),
                    series_admittance=1 / complex(r, x), charging_shunt=complex(0.0, b),
                ))
            else:
                raise TopologyError(f"line {lineno}: data outside a section")
        except (IndexError, ValueError, ZeroDivisionError) as exc:
            if isinstance(exc, TopologyError):
                raise
            raise TopologyError(f"line {lineno}: cannot parse {raw.strip()!r}: {exc}") from exc
    topo = GridTopology(tuple(buses), tuple(lines), name=name)
    if not topo.is_connected():
        raise TopologyError("topology is disconnected")
    return topo


def dumps_case(topology: GridTopology) -> str:
    """Serialize to the case format. Impedances are written with full ``repr`` precision."""
    out = ["[buses]"]
    for b in topology.buses:
        s = b.shunt_admittance
        out.append(f"{b.id} {b.kind} {b.p_inj!r} {b.q_inj!r} {b.v_setpoint!r} {s.real!r} {s.imag!r}")
    out.append("[lines]")
    for ln in topology.lines:
        z = 1 / ln.series_admittance
        out.append(f"{ln.from_bus} {ln.to_bus} {z.real!r} {z.imag!r} {ln.charging_shunt.imag!r}")
    return "\n".join(out) + "\n"


BUILTIN_CASES = ("case9", "case39")


def load_case(path_or_name: str | Path) -> GridTopology:
    """Load a case file, or one of the bundled cases by name (``case9``, ``case39``)."""
    key = str(path_or_name)
    if key in BUILTIN_CASES:
        text = resources.files("linefault.cases").joinpath(f"{key}.txt").read_text()
        return parse_case(text, name=key)
    path = Path(path_or_name)
    return parse_case(path.read_text(), name=path.stem)
