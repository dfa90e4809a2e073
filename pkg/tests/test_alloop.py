import dataclasses

import numpy as np
import pytest

from conftest import small_config
from hybrid_al.alloop import (
    STRATEGIES,
    BudgetExhausted,
    DatasetContext,
    ExperimentConfig,
    RunCache,
    Strategy,
    _assert_no_leakage,
    csv_header,
    initial_state,
    run_experiment,
    run_iteration,
    run_suite,
    run_upper_bound,
    select,
)
from hybrid_al.data import PoolState, SampleKey, split_pools
from hybrid_al.uncertainty import UncertaintyScore, select_candidates


def random_pipeline_state(ctx, rng, rule="volume"):
    """Random split plus random uncertainty scores; no model needed."""
    vols = [ctx.volumes[v] for v in ctx.order]
    n_train = int(rng.integers(1, 3))
    pools = split_pools(vols, (n_train, len(vols) - n_train - 2, 1, 1), int(rng.integers(0, 2**31)), rule)
    scores = {
        k: UncertaintyScore(k, np.zeros(5), float(rng.choice([rng.uniform(0, 1), 0.5])))
        for k in pools.unlabeled
    }
    return pools, scores


def test_strategy_validation():
    with pytest.raises(ValueError):
        Strategy("entropy")
    with pytest.raises(ValueError):
        Strategy("unc", candidate_factor=0.5)
    assert Strategy("unc+hres").lam_for("volume") == 0.5
    assert Strategy("unc+hres").lam_for("slice") == 0.25
    assert Strategy("unc+hres", lam=0.1).lam_for("slice") == 0.1


def test_experiment_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(rule="patch")
    with pytest.raises(ValueError):
        ExperimentConfig(iterations=0)


@pytest.mark.parametrize("rule", ["volume", "slice"])
def test_hres_lambda_zero_equals_sim(small_ctx, rule):
    rng = np.random.default_rng(0)
    for it in range(20):
        pools, scores = random_pipeline_state(small_ctx, rng, rule)
        k = 1 if rule == "volume" else int(rng.integers(1, 5))
        a = select(small_ctx, pools, Strategy("unc+hres", lam=0.0), k, scores, 0, it, rule)
        b = select(small_ctx, pools, Strategy("unc+sim"), k, scores, 0, it, rule)
        assert a == b


def test_factor_one_fixes_membership(small_ctx):
    rng = np.random.default_rng(1)
    for it in range(20):
        pools, scores = random_pipeline_state(small_ctx, rng, "slice")
        k = int(rng.integers(1, 6))
        top = set(select_candidates(pools.unlabeled, {q: s.scalar for q, s in scores.items()}, 1.0, k))
        for name in ("unc", "unc+sim", "unc+mi", "unc+hres"):
            got = select(small_ctx, pools, Strategy(name, candidate_factor=1.0), k, scores, 0, it, "slice")
            assert set(got) == top and len(got) == k


def test_rand_is_seeded_and_inside_pool(small_ctx):
    rng = np.random.default_rng(2)
    pools, _ = random_pipeline_state(small_ctx, rng, "slice")
    a = select(small_ctx, pools, Strategy("rand"), 3, {}, 5, 1, "slice")
    assert a == select(small_ctx, pools, Strategy("rand"), 3, {}, 5, 1, "slice")
    assert a != select(small_ctx, pools, Strategy("rand"), 3, {}, 5, 2, "slice")
    assert set(a) <= set(pools.unlabeled) and len(set(a)) == 3


def test_leakage_guard():
    pools = PoolState([SampleKey("a")], [SampleKey("b")], ["c"], ["d"], "volume")
    _assert_no_leakage(pools, [SampleKey("b")])
    with pytest.raises(AssertionError):
        _assert_no_leakage(pools, [SampleKey("d")])


def test_iteration_budget_accounting(small_ctx):
    cfg = small_config("unc+hres", rule="slice", budget=4)
    state = initial_state(small_ctx, cfg)
    n0 = len(state.pools.training)
    assert n0 == 4  # one volume of depth 4
    for i in range(1, 3):
        state, row = run_iteration(small_ctx, state, cfg)
        assert row.n_train_units == len(state.pools.training) == n0 + i * 4
        assert len(row.selected) == 4
        assert not {k.volume_id for k in state.pools.training} & set(state.pools.test + state.pools.validation)
        assert 0 <= row.dsc_mean <= 1 and row.rac_mean <= 1


def test_run_experiment_rows_and_csv(tmp_path, small_ctx):
    cfg = small_config("unc")
    rec = run_experiment(cfg, tmp_path, small_ctx)
    assert [r.iteration for r in rec.rows] == [1, 2]
    assert [r.n_train_units for r in rec.rows] == [2, 3]
    lines = (tmp_path / "unc_volume_seed0.csv").read_text().splitlines()
    assert lines[0].split(",") == csv_header(4)
    assert len(lines) == 3
    assert lines[1].split(",")[-2] == str(rec.rows[0].selected[0])
    assert lines[1].endswith(",")  # wall_ms blank unless requested


def test_successive_moves_drain_the_pool(small_ctx):
    rec = run_experiment(small_config("rand", iterations=5), None, small_ctx)
    assert [r.n_train_units for r in rec.rows] == [2, 3, 4, 5, 6]
    assert len({r.selected[0] for r in rec.rows}) == 5


def test_budget_exhaustion_stops_cleanly(tmp_path, small_ctx):
    cfg = small_config("rand", iterations=4, budget=2)
    rec = run_experiment(cfg, tmp_path, small_ctx)
    assert rec.stopped_early and len(rec.rows) == 2
    assert len((tmp_path / "rand_volume_seed0.csv").read_text().splitlines()) == 3


def test_wall_time_recorded_when_requested(small_ctx):
    rec = run_experiment(small_config("rand", iterations=1, record_wall_time=True), None, small_ctx)
    assert rec.rows[0].wall_ms > 0


def test_run_is_deterministic(tmp_path, small_ctx):
    cfg = small_config("unc+hres")
    run_experiment(cfg, tmp_path / "a", small_ctx)
    run_experiment(cfg, tmp_path / "b", DatasetContext.from_spec(cfg.data))
    a = (tmp_path / "a" / "unc+hres_volume_seed0.csv").read_bytes()
    assert a == (tmp_path / "b" / "unc+hres_volume_seed0.csv").read_bytes()


def test_cache_does_not_change_results(small_ctx):
    cfgs = [small_config(s) for s in ("unc", "unc+mi")]
    cache = RunCache()
    shared = [run_experiment(c, None, small_ctx, cache) for c in cfgs]
    fresh = [run_experiment(c, None, small_ctx) for c in cfgs]
    assert cache.hits > 0
    for a, b in zip(shared, fresh):
        assert [r.dsc_mean for r in a.rows] == [r.dsc_mean for r in b.rows]
        assert [r.selected for r in a.rows] == [r.selected for r in b.rows]


def test_upper_bound_row(small_ctx):
    rec = run_upper_bound(small_config(), None, small_ctx)
    (row,) = rec.rows
    assert row.strategy == "upper_bound" and row.iteration == 0 and row.n_train_units == 6


def test_suite_cross_product_and_failures(tmp_path):
    cfgs = [small_config(s, iterations=1) for s in STRATEGIES]
    recs = run_suite(cfgs, [0, 1], tmp_path, upper_bound=True)
    assert len(recs) == 12
    assert all(r.error is None for r in recs)
    assert len(list(tmp_path.glob("*.csv"))) == 12
    bad = dataclasses.replace(cfgs[0], splits=(1, 5, 1, 2))  # does not sum to 8
    recs = run_suite([bad, cfgs[1]], [0], None)
    assert recs[0].error and recs[1].error is None


def test_suite_jobs_do_not_change_results(tmp_path):
    cfgs = [small_config(s, iterations=1) for s in ("rand", "unc")]
    run_suite(cfgs, [0, 1], tmp_path / "serial")
    run_suite(cfgs, [0, 1], tmp_path / "parallel", jobs=2)
    for p in sorted((tmp_path / "serial").glob("*.csv")):
        assert p.read_bytes() == (tmp_path / "parallel" / p.name).read_bytes()
