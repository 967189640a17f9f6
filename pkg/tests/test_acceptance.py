"""Acceptance criteria, one test per criterion.

Each test prints a single ``CRITERION <k>: PASS|FAIL ...`` line to the terminal
(outside pytest's capture) and then asserts the same condition. Criteria 6-8
share one observability sweep on the 39-bus case; it dominates the runtime.
"""
import json
import math
import os
import time

import numpy as np
import pytest

from linefault.cli import main as cli_main
from linefault.evaluation import ALL, SweepSettings, compare_variants, degradation_gap, mann_whitney_u, \
    run_observability_sweep
from linefault.faults import ScenarioPlan, add_noise, generate_dataset, measured_snr_db, solve_powerflow
from linefault.features import build_targets
from linefault.grid import line_neighbors, load_case
from linefault.training import TrainConfig

from conftest import make_grid, random_connected_edges
from gradcheck import worst_draw_error

PARTIAL = (0.30, 0.25, 0.20, 0.15)
SEEDS = tuple(range(10))
JOBS = int(os.environ.get("LINEFAULT_JOBS", os.cpu_count() or 1))
# 16 scenarios per (line, type) on 46 lines plus 64 normal-state samples: 3008 total, ~2100 train
PLAN = ScenarioPlan(counts={t: 16 for t in ("TP", "LG", "DLG", "LL")}, none_count=64)
DATA_SEED = 7
TRAIN = TrainConfig(learning_rate=1e-3, batch_size=64, epsilon_mix=0.3, max_steps=4000, early_stop_window=100,
                    eval_every=10)
# the neighbor weight is chosen per fraction by 2-fold cross-validation on the train split
EPSILON_GRID = (0.1, 0.3)


def report(capsys, k, ok, detail):
    with capsys.disabled():
        print(f"\nCRITERION {k}: {'PASS' if ok else 'FAIL'} - {detail}")
    return ok


def test_criterion_1_gradient_correctness(capsys):
    t0 = time.time()
    worst = worst_draw_error(np.random.default_rng(2024), draws=100)
    elapsed = time.time() - t0
    ok = worst < 1e-4 and elapsed < 60
    assert report(capsys, 1, ok, f"max relative error {worst:.2e} over 100 draws in {elapsed:.1f}s")


def test_criterion_2_power_flow_oracle(capsys):
    st = solve_powerflow(load_case("case9"))
    flat = solve_powerflow(make_grid([(0, 1), (1, 2), (2, 3), (3, 0)]))
    exact = flat.iterations == 0 and np.array_equal(flat.voltages, np.ones(4, dtype=complex))
    ok = st.mismatch < 1e-8 and st.iterations <= 10 and exact
    assert report(capsys, 2, ok, f"9-bus mismatch {st.mismatch:.1e} in {st.iterations} iterations; "
                                 f"zero-injection flat start exact: {exact}")


def test_criterion_3_neighbor_targets(capsys):
    rng = np.random.default_rng(3)
    bad = checked = 0
    for _ in range(50):
        n = int(rng.integers(3, 25))
        topo = make_grid(random_connected_edges(rng, n, int(rng.integers(n - 1, 2 * n + 1))), n)
        for j in range(topo.m):
            _, y_hat = build_targets(j, topo)
            nb = set(line_neighbors(topo, j))
            total = y_hat.sum()
            checked += 1
            if not (min(abs(total), abs(total - 1)) < 1e-12 and y_hat[j] == 0
                    and set(np.flatnonzero(y_hat)) == nb and (total > 0.5) == bool(nb)):
                bad += 1
    assert report(capsys, 3, bad == 0, f"{checked} fault lines on 50 random graphs, {bad} violations")


def test_criterion_4_mann_whitney(capsys):
    rng = np.random.default_rng(4)
    sum_bad = 0
    for _ in range(1000):
        n1, n2 = int(rng.integers(3, 40)), int(rng.integers(3, 40))
        a, b = np.round(rng.normal(0, 1, n1), 1), np.round(rng.normal(0.2, 1, n2), 1)
        res = mann_whitney_u(a, b)
        sum_bad += res.u1 + res.u2 != n1 * n2
    oracle_bad = 0
    for _ in range(100):
        n1, n2 = int(rng.integers(3, 13)), int(rng.integers(3, 13))
        a, b = rng.integers(0, 6, n1), rng.integers(0, 6, n2)
        res = mann_whitney_u(a, b)
        u1 = sum((y > x) + 0.5 * (y == x) for x in a for y in b)
        u2 = sum((x > y) + 0.5 * (y == x) for x in a for y in b)
        oracle_bad += (res.u1 != u1) or (res.u2 != u2) or (res.statistic != max(u1, u2))
    ok = sum_bad == 0 and oracle_bad == 0
    assert report(capsys, 4, ok, f"U1+U2 identity failures {sum_bad}/1000; pairwise-oracle mismatches {oracle_bad}/100")


def test_criterion_5_noise_calibration(capsys):
    topo = load_case("case39")
    v = solve_powerflow(topo).voltages
    errs = {}
    for target in (40.0, 70.0, 100.0):
        measured = [measured_snr_db(v, add_noise(v, target, s)) for s in range(20)]
        errs[target] = float(np.mean(measured) - target)
    ok = all(abs(e) <= 0.5 for e in errs.values())
    detail = ", ".join(f"{int(t)} dB: {e:+.3f}" for t, e in errs.items())
    assert report(capsys, 5, ok, f"mean measured-minus-target over 20 seeds: {detail}")


@pytest.fixture(scope="module")
def sweep():
    topo = load_case("case39")
    scenarios = generate_dataset(topo, PLAN, DATA_SEED, jobs=JOBS)
    settings = SweepSettings(base=TRAIN, seeds=SEEDS)
    t0 = time.time()
    rep = run_observability_sweep(topo, scenarios, settings, fractions=(1.0, *PARTIAL), jobs=JOBS,
                                  epsilon_grid=EPSILON_GRID, cv_folds=2)
    rep.meta["elapsed_s"] = time.time() - t0
    return rep


def _gains(rep):
    with_m, no_m = rep.means("with_neighbors"), rep.means("no_neighbors")
    return {f: with_m[f] - no_m[f] for f in PARTIAL}, with_m, no_m


@pytest.mark.slow
def test_criterion_6_neighbor_gain_trend(sweep, capsys):
    gains, with_m, no_m = _gains(sweep)
    n_train_cells = len([c for c in sweep.cells if c.fault_type == ALL and c.accuracy is not None])
    ok = all(g >= 0 for g in gains.values()) and max(gains.values()) >= 2.0
    detail = "; ".join(f"{int(round(f * 100))}%: with {with_m[f]:.2f} vs no {no_m[f]:.2f} ({gains[f]:+.2f})"
                       for f in PARTIAL)
    eps = ", ".join(f"{float(k):g}: {v}" for k, v in sweep.meta["chosen_epsilon"].items())
    assert report(capsys, 6, ok, f"{detail}; cross-validated epsilon per fraction {{{eps}}}; "
                                 f"{n_train_cells} trained cells in {sweep.meta['elapsed_s'] / 60:.1f} min")


@pytest.mark.slow
def test_criterion_7_significance(sweep, capsys):
    gains, _, _ = _gains(sweep)
    materialized = all(g >= 0 for g in gains.values()) and max(gains.values()) >= 2.0
    partial = type(sweep)(sweep.sweep, [c for c in sweep.cells if c.obs_fraction in PARTIAL])
    sig = compare_variants(partial, 0.05)
    shuffled = [c.accuracy for c in partial.sorted_cells() if c.variant == "no_neighbors" and c.fault_type == ALL]
    shuffled = list(np.random.default_rng(7).permutation(shuffled))
    placebo = mann_whitney_u(shuffled, [c.accuracy for c in partial.sorted_cells()
                                        if c.variant == "no_neighbors" and c.fault_type == ALL], 0.05)
    placebo_ok = not placebo.reject
    if materialized:
        ok = sig["reject"] and placebo_ok and sig["n_a"] >= 20
        why = "gains present, test must reject"
    else:
        ok = placebo_ok
        why = "criterion 6 gains absent, rejection not required"
    assert report(capsys, 7, ok, f"n={sig['n_a']} paired, U={sig['U']:.1f}, p={sig['p_value']:.4f}, "
                                 f"reject={sig['reject']} ({why}); placebo p={placebo.p_value:.3f} "
                                 f"reject={placebo.reject}")


@pytest.mark.slow
def test_criterion_8_degradation_gap(sweep, capsys):
    gap_with = degradation_gap(sweep, "with_neighbors")
    gap_no = degradation_gap(sweep, "no_neighbors")
    drop_with = sweep.means("with_neighbors")[1.0] - sweep.means("with_neighbors")[0.15]
    drop_no = sweep.means("no_neighbors")[1.0] - sweep.means("no_neighbors")[0.15]
    ok = drop_with <= drop_no
    assert report(capsys, 8, ok, f"full-to-15% drop with {drop_with:.2f} vs no {drop_no:.2f}; "
                                 f"mean gap over 30-15%: with {gap_with:.2f} vs no {gap_no:.2f}")


def _pipeline(root):
    tiny = ["--max-steps", "60", "--eval-every", "10", "--early-stop-window", "3", "--hidden", "16"]
    ds = root / "ds.lfds"
    assert cli_main(["simulate", "--case", "case39", "--per-line", "1", "--types", "LG,LL", "--none", "4",
                     "--seed", "11", "--out", str(ds)]) == 0
    assert cli_main(["train", "--dataset", str(ds), "--out", str(root / "run"), "--seed", "3", *tiny]) == 0
    assert cli_main(["sweep-observability", "--dataset", str(ds), "--out", str(root / "rep"), "--seeds", "10",
                     "--fractions", "0.3,0.15", *tiny]) == 0
    assert cli_main(["compare", "--report", str(root / "rep")]) == 0
    files = [ds, root / "run" / "checkpoint.lfck", root / "run" / "history.jsonl",
             root / "rep" / "observability_cells.csv", root / "rep" / "observability_summary.json",
             root / "rep" / "observability_compare.json"]
    from linefault._util import file_digest
    return [file_digest(f) for f in files]


def test_criterion_9_determinism(tmp_path, capsys):
    a = tmp_path / "a"
    b = tmp_path / "b"
    a.mkdir()
    b.mkdir()
    da, db = _pipeline(a), _pipeline(b)
    # report summaries embed no paths, so whole-file digests must agree
    ok = da == db
    assert report(capsys, 9, ok, f"{sum(x == y for x, y in zip(da, db))}/{len(da)} artifact digests identical "
                                 f"across two simulate-train-sweep-compare runs")
