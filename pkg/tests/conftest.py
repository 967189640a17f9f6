import numpy as np
import pytest

from linefault.grid import Bus, GridTopology, Line, load_case


def make_grid(edges, n=None, y=1 - 10j, charging=0j, shunts=None, kinds=None, p=None, q=None, v=None):
    """Grid from an edge list; bus 0 is the slack unless ``kinds`` says otherwise."""
    n = n if n is not None else 1 + max(max(e) for e in edges)
    kinds = kinds or ["slack"] + ["PQ"] * (n - 1)
    buses = tuple(
        Bus(i, kinds[i],
            0.0 if p is None else p[i], 0.0 if q is None else q[i],
            1.0 if v is None else v[i], 0j if shunts is None else shunts[i])
        for i in range(n)
    )
    ys = y if isinstance(y, (list, tuple)) else [y] * len(edges)
    lines = tuple(Line(k, a, b, ys[k], charging) for k, (a, b) in enumerate(edges))
    return GridTopology(buses, lines)


def random_connected_edges(rng, n, m):
    """Random spanning tree plus extra distinct edges."""
    edges = []
    perm = rng.permutation(n)
    for i in range(1, n):
        edges.append((int(perm[i]), int(perm[rng.integers(0, i)])))
    seen = {frozenset(e) for e in edges}
    m = min(m, n * (n - 1) // 2)
    while len(edges) < m:
        a, b = (int(x) for x in rng.choice(n, 2, replace=False))
        if frozenset((a, b)) not in seen:
            seen.add(frozenset((a, b)))
            edges.append((a, b))
    return edges


@pytest.fixture(scope="session")
def case9():
    return load_case("case9")


@pytest.fixture(scope="session")
def case39():
    return load_case("case39")


@pytest.fixture
def path4():
    # a-b-c-d with lines 0:(a,b) 1:(b,c) 2:(c,d)
    return make_grid([(0, 1), (1, 2), (2, 3)])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
