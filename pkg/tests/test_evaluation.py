import math

import numpy as np
import pytest
from scipy import stats

from linefault.evaluation import (
    ALL, OBS_FRACTIONS, SNR_LEVELS, TRAIN_FRACTIONS, Cell, EvalReport, SweepSettings, accuracy,
    compare_variants, degradation_gap, evaluate_run, mann_whitney_u, plot_report, rank_lines, rankdata,
    read_report, run_observability_sweep, run_snr_sweep, run_trainsize_sweep, subsample_train, write_report,
)
from linefault.faults import ScenarioPlan, generate_dataset
from linefault.features import build_dataset, full_mask
from linefault.grid import build_admittance, load_case
from linefault.training import TrainConfig, train


def pairwise_u(a, b):
    """Pairs where the second sample wins, ties counted half."""
    return sum((y > x) + 0.5 * (y == x) for x in a for y in b)


def test_accuracy_examples():
    assert accuracy([1, 2, 3], [1, 2, 3]) == 100.0
    assert accuracy([0, 0, 0], [1, 2, 3]) == 0.0
    assert round(accuracy([0] * 70 + [1], [0] * 71), 2) == 98.59


def test_accuracy_errors_and_permutation(rng):
    with pytest.raises(ValueError):
        accuracy([], [])
    with pytest.raises(ValueError):
        accuracy([1], [1, 2])
    p, y = rng.integers(0, 5, 40), rng.integers(0, 5, 40)
    perm = rng.permutation(40)
    assert accuracy(p[perm], y[perm]) == accuracy(p, y)


def test_rank_lines_examples(rng):
    p = rng.dirichlet(np.ones(8))
    full = rank_lines(p, 8)
    assert [c for c, _ in full] == sorted(range(8), key=lambda i: (-p[i], i))
    assert [c for c, _ in rank_lines(np.full(6, 1 / 6), 4)] == [0, 1, 2, 3]
    for k in range(1, 9):
        assert rank_lines(p, k) == full[:k]
    with pytest.raises(ValueError):
        rank_lines(p, 0)


def test_rank_lines_ties_by_lower_id():
    assert [c for c, _ in rank_lines([0.1, 0.3, 0.3, 0.2, 0.1], 5)] == [1, 2, 3, 0, 4]


def test_rankdata_matches_scipy(rng):
    for _ in range(50):
        v = rng.integers(0, 6, int(rng.integers(1, 20))).astype(float)
        np.testing.assert_array_equal(rankdata(v), stats.rankdata(v))


def test_mann_whitney_worked_example():
    a, b = [3, 4, 2, 6, 2, 5], [9, 7, 5, 10, 6, 8]
    res = mann_whitney_u(a, b, alternative="two_sided")
    ranks = rankdata(a + b)
    assert ranks[:6].sum() == 23.0 and ranks[6:].sum() == 55.0
    assert res.u1 == pairwise_u(a, b) == 34.0
    assert res.u2 == pairwise_u(b, a) == 2.0
    assert res.statistic == 34.0


def test_mann_whitney_extremes():
    same = [1.0, 2.0, 3.0, 4.0]
    res = mann_whitney_u(same, same)
    assert res.u1 == res.u2 == 8.0 and not res.reject
    sep = mann_whitney_u([10, 11, 12, 13, 14], [1, 2, 3, 4, 5])
    assert sep.statistic == 25.0 and sep.u2 == 25.0 and sep.reject


def test_mann_whitney_degenerate():
    res = mann_whitney_u([2.0] * 5, [2.0] * 4)
    assert res.p_value == 1.0 and not res.reject


def test_mann_whitney_input_checks():
    with pytest.raises(ValueError):
        mann_whitney_u([1, 2], [1, 2, 3])
    with pytest.raises(ValueError):
        mann_whitney_u([1, 2, 3], [1, 2, 3], alternative="less")


def test_u_sum_and_pairwise_oracle(rng):
    for _ in range(300):
        n1, n2 = int(rng.integers(3, 13)), int(rng.integers(3, 13))
        a = rng.integers(0, 8, n1).astype(float)
        b = rng.integers(0, 8, n2).astype(float)
        res = mann_whitney_u(a, b)
        assert res.u1 + res.u2 == n1 * n2
        assert res.u1 == pairwise_u(a, b) and res.u2 == pairwise_u(b, a)


@pytest.mark.parametrize("alternative,scipy_alt", [("greater", "greater"), ("two_sided", "two-sided")])
def test_p_value_matches_scipy(rng, alternative, scipy_alt):
    for _ in range(100):
        n1, n2 = int(rng.integers(5, 30)), int(rng.integers(5, 30))
        a = np.round(rng.normal(0.3, 1, n1), 1)
        b = np.round(rng.normal(0, 1, n2), 1)
        if np.all(np.concatenate([a, b]) == a[0]):
            continue
        ref = stats.mannwhitneyu(a, b, alternative=scipy_alt, use_continuity=True, method="asymptotic")
        assert mann_whitney_u(a, b, alternative=alternative).p_value == pytest.approx(ref.pvalue, rel=1e-9, abs=1e-15)


def report_from(with_accs, no_accs):
    cells = [Cell("observability", "with_neighbors", ALL, 0.3, 1.0, math.inf, s, a) for s, a in enumerate(with_accs)]
    cells += [Cell("observability", "no_neighbors", ALL, 0.3, 1.0, math.inf, s, a) for s, a in enumerate(no_accs)]
    return EvalReport("observability", cells)


def test_compare_variants_examples(rng):
    base = list(rng.uniform(50, 70, 12))
    assert not compare_variants(report_from(base, base))["reject"]
    shifted = compare_variants(report_from([x + 5 for x in base], base))
    a, b = [x + 5 for x in base], base
    assert shifted["U2"] == pairwise_u(b, a)
    assert shifted["reject"] and shifted["alpha"] == 0.05


def test_compare_variants_placebo_and_minimum(rng):
    accs = list(rng.uniform(50, 70, 20))
    rep = report_from(accs, list(rng.uniform(50, 70, 20)))
    assert not compare_variants(rep, variant_a="with_neighbors", variant_b="with_neighbors")["reject"]
    with pytest.raises(ValueError, match="10"):
        compare_variants(report_from(accs[:9], accs[:9]))


def test_degradation_gap():
    cells = []
    for v, accs in (("a", {1.0: 90, 0.3: 80, 0.25: 78, 0.2: 76, 0.15: 74}),):
        for f, acc in accs.items():
            cells.append(Cell("observability", v, ALL, f, 1.0, math.inf, 0, float(acc)))
    assert degradation_gap(EvalReport("observability", cells), "a") == pytest.approx(13.0)


TINY = TrainConfig(channels1=2, channels2=2, kernel=3, hidden=8, batch_size=16, max_steps=20, eval_every=5,
                   early_stop_window=3)


@pytest.fixture(scope="module")
def case9_scenarios():
    topo = load_case("case9")
    return topo, generate_dataset(topo, ScenarioPlan(counts={"LG": 4, "TP": 4}, none_count=8), 6)


def test_observability_sweep_schema_and_determinism(case9_scenarios):
    topo, scs = case9_scenarios
    settings = SweepSettings(base=TINY, seeds=(0, 1))
    rep = run_observability_sweep(topo, scs, settings)
    again = run_observability_sweep(topo, scs, settings)
    assert rep.digest() == again.digest()
    for ft in (ALL, "LG", "TP"):
        for v in ("no_neighbors", "with_neighbors"):
            vals = rep.values(v, ft)
            assert sorted(vals) == sorted(OBS_FRACTIONS) and all(len(x) == 2 for x in vals.values())
    assert all(0 <= c.accuracy <= 100 for c in rep.cells)


def test_trainsize_sweep_schema(case9_scenarios):
    topo, scs = case9_scenarios
    rep = run_trainsize_sweep(topo, scs, SweepSettings(base=TINY, seeds=(0,), variants=("no_neighbors",)))
    assert sorted(rep.values("no_neighbors")) == sorted(TRAIN_FRACTIONS)
    assert len(TRAIN_FRACTIONS) == 10 and TRAIN_FRACTIONS[0] == 1.0 and TRAIN_FRACTIONS[-1] == 0.1


def test_subsample_keeps_label_shares(case9_scenarios):
    topo, scs = case9_scenarios
    ds = build_dataset(scs, topo, build_admittance(topo), full_mask(9), rng_seed=0)
    labels = ds.train.labels
    for frac in (0.5, 0.3, 0.1):
        sub = subsample_train(ds, frac, np.random.default_rng(1))
        got = np.bincount(sub.train.labels, minlength=10)
        want = [max(1, int(round(frac * c))) if c else 0 for c in np.bincount(labels, minlength=10)]
        assert list(got) == want
        assert set(sub.train.scenario_ids) <= set(ds.train.scenario_ids)
    assert subsample_train(ds, 1.0, np.random.default_rng(1)) is ds


def test_snr_sweep_schema_and_clean_sentinel(case9_scenarios):
    topo, scs = case9_scenarios
    settings = SweepSettings(base=TINY, seeds=(0,), variants=("with_neighbors",))
    rep = run_snr_sweep(topo, scs, settings, snr_levels=(*SNR_LEVELS, math.inf))
    assert sorted(rep.values("with_neighbors")) == sorted((*SNR_LEVELS, math.inf))
    clean = run_observability_sweep(topo, scs, settings, fractions=(1.0,))
    assert rep.values("with_neighbors")[math.inf] == clean.values("with_neighbors")[1.0]


def test_near_clean_snr_tracks_clean_accuracy(case9_scenarios):
    topo, scs = case9_scenarios
    cfg = TrainConfig(channels1=4, channels2=4, hidden=32, batch_size=16, max_steps=400, eval_every=10,
                      early_stop_window=10, learning_rate=3e-3)
    settings = SweepSettings(base=cfg, seeds=(0, 1), variants=("with_neighbors",))
    rep = run_snr_sweep(topo, scs, settings, snr_levels=(100.0, math.inf))
    means = rep.means("with_neighbors")
    assert abs(means[100.0] - means[math.inf]) <= 2.0


def test_snr_sweep_reselects_epsilon(case9_scenarios):
    topo, scs = case9_scenarios
    settings = SweepSettings(base=TINY, seeds=(0,), variants=("with_neighbors",))
    rep = run_snr_sweep(topo, scs, settings, snr_levels=(60.0,), epsilon_grid=(0.0, 0.3), cv_folds=2)
    assert rep.meta["chosen_epsilon"]["60.0"] in (0.0, 0.3)


def test_failed_cell_is_marked(case9_scenarios):
    topo, scs = case9_scenarios
    # three distinct labels: every class is too small to split, so validation is empty
    rep = run_observability_sweep(topo, [scs[0], scs[4], scs[8]], SweepSettings(base=TINY, seeds=(0,), variants=("no_neighbors",)),
                                  fractions=(1.0,))
    assert len(rep.cells) == 1 and rep.cells[0].accuracy is None and rep.cells[0].status.startswith("failed")


def test_report_round_trip_and_plot(case9_scenarios, tmp_path):
    topo, scs = case9_scenarios
    rep = run_observability_sweep(topo, scs, SweepSettings(base=TINY, seeds=(0,)), fractions=(1.0, 0.3))
    paths = write_report(rep, tmp_path)
    back = read_report(tmp_path, "observability")
    assert back.digest() == rep.digest()
    header = paths["table"].read_text().splitlines()[1].split(",")
    assert header[0] == "obs_fraction" and "ALL:with_neighbors" in header
    png = plot_report(rep, tmp_path / "obs.png")
    assert png.read_bytes()[:4] == b"\x89PNG"
    with pytest.raises(FileNotFoundError):
        read_report(tmp_path, "snr")


def test_evaluate_run_rankings(case9_scenarios):
    topo, scs = case9_scenarios
    ds = build_dataset(scs, topo, build_admittance(topo), full_mask(9), rng_seed=0)
    params, _ = train(ds, TINY)
    rep = evaluate_run(params, ds, top_k=3)
    assert len(rep.rankings) == len(ds.test)
    for r in rep.rankings:
        probs = [p for _, p in r["candidates"]]
        assert len(probs) == 3 and probs == sorted(probs, reverse=True)


def test_observability_sweep_reselects_epsilon_per_fraction(case9_scenarios):
    topo, scs = case9_scenarios
    settings = SweepSettings(base=TINY, seeds=(0,))
    rep = run_observability_sweep(topo, scs, settings, fractions=(1.0, 0.3), epsilon_grid=(0.1, 0.3), cv_folds=2)
    assert set(rep.meta["chosen_epsilon"]) == {"1.0", "0.3"}
    assert all(e in (0.1, 0.3) for e in rep.meta["chosen_epsilon"].values())
    assert rep.config["epsilon_grid"] == [0.1, 0.3]
