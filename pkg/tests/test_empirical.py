import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ndesim import empirical
from ndesim.core import (
    ActionSpace,
    DiscreteState,
    Situation,
    car_following_grid,
    free_driving_grid,
    standard_action_space,
)
from ndesim.driver_models import IdmParams
from ndesim.empirical import (
    CountTables,
    EmpiricalModels,
    SparseCounts,
    build_all_models,
    build_model,
    count_actions,
    estimate_targets,
    exclude_crash_states,
    fill_uncovered,
    idm_fallback_filler,
    inevitable_crash_mask,
    load_model,
    load_targets,
    save_model,
    save_targets,
    smooth_and_normalize,
    smoothing_kernel,
)
from ndesim.ndd import LabeledSample, SITUATION_CODE, SampleBatch

from oracles import max_brake_min_range


def labeled(situation, grid, values, action):
    return LabeledSample(situation, DiscreteState(grid, grid.index_of(values)), action)


def test_count_actions_tallies_rows():
    fd = free_driving_grid()
    samples = [labeled(Situation.FREE_DRIVING, fd, (30.05,), a) for a in (21, 21, 22)]
    tables = count_actions(samples)
    row = tables.dense[Situation.FREE_DRIVING][fd.index_of((30.05,))[0]]
    assert row[21] == 2 and row[22] == 1
    assert row.sum() == 3


def test_count_actions_empty():
    tables = count_actions([])
    assert tables.dense[Situation.FREE_DRIVING].sum() == 0
    assert tables.dense[Situation.CAR_FOLLOWING].sum() == 0


def test_crash_mask_examples():
    grid = car_following_grid()
    mask = inevitable_crash_mask(grid).reshape(grid.shape)
    axv, axr, axrr = grid.axes

    def at(v, r, rr):
        return mask[axv.index(v), axr.index(r), axrr.index(rr)]

    assert at(30.0, 1.0, -10.0)      # doomed: needs 1 - 100/8 < 0
    assert not at(30.0, 100.0, 0.0)  # non-closing gap
    assert not at(30.0, 10.0, 5.0)   # opening gap


def test_crash_mask_matches_numeric_integration():
    grid = car_following_grid()
    mask = inevitable_crash_mask(grid).reshape(grid.shape)
    axv, axr, axrr = grid.axes
    rng = np.random.default_rng(3)
    for _ in range(200):
        ir = int(rng.integers(0, axr.n_bins))
        irr = int(rng.integers(0, axrr.n_bins))
        r = float(axr.center(ir))
        rr = float(axrr.center(irr))
        min_range = max_brake_min_range(r, rr)
        doomed = min_range <= 1e-9 and rr < 0
        assert mask[0, ir, irr] == doomed, (r, rr, min_range)


def test_smoothing_window_one_is_identity():
    acts = standard_action_space()
    row = np.zeros(33)
    row[5] = 3.0
    row[21] = 7.0
    out = smooth_and_normalize(row, acts, window=1)
    assert np.allclose(out, row / row.sum())


def test_smoothing_spreads_spike():
    acts = standard_action_space()
    row = np.zeros(33)
    row[21] = 9.0  # single spike in the acceleration block
    out = smooth_and_normalize(row, acts, window=3)
    assert out[20] == pytest.approx(1.0 / 3.0)
    assert out[21] == pytest.approx(1.0 / 3.0)
    assert out[22] == pytest.approx(1.0 / 3.0)


def test_smoothing_even_window_rejected():
    acts = standard_action_space()
    with pytest.raises(ValueError):
        smooth_and_normalize(np.ones(33), acts, window=4)


def test_lc_columns_untouched_and_rows_normalised():
    acts = standard_action_space()
    row = np.zeros(33)
    row[0] = 2.0
    row[32] = 1.0
    row[10] = 5.0
    row[11] = 2.0
    out = smooth_and_normalize(row, acts, window=5)
    assert out.sum() == pytest.approx(1.0, abs=1e-12)
    assert out[0] == pytest.approx(0.2)   # 2/10: LC mass only renormalised
    assert out[32] == pytest.approx(0.1)


@given(st.integers(0, 2**31 - 1), st.sampled_from([1, 3, 5, 7]))
@settings(max_examples=30, deadline=None)
def test_smoothing_preserves_longitudinal_mass(seed, window):
    acts = standard_action_space()
    rng = np.random.default_rng(seed)
    row = rng.integers(0, 50, size=33).astype(float)
    K = smoothing_kernel(31, window)
    smoothed = row[1:32] @ K
    assert smoothed.sum() == pytest.approx(row[1:32].sum(), abs=1e-9)


def test_empirical_convergence_probability():
    # For n=1e4 i.i.d. draws from a fixed PMF over 31 bins, the empirical
    # PMF is within Hellinger 0.05 with probability >= 0.99.
    from ndesim.metrics import hellinger
    rng = np.random.default_rng(12)
    p = rng.dirichlet(np.ones(31) * 2)
    ok = 0
    trials = 200
    for _ in range(trials):
        counts = rng.multinomial(10_000, p)
        ok += hellinger(counts / counts.sum(), p) <= 0.05
    assert ok / trials >= 0.99


def test_sparse_counts_round_trip():
    keys = np.array([5, 5, 9, 5, 9, 100], dtype=np.int64)
    actions = np.array([0, 2, 2, 0, 2, 1], dtype=np.int16)
    sc = SparseCounts.from_arrays(keys, actions, n_actions=33)
    uk, totals = sc.state_totals()
    assert uk.tolist() == [5, 9, 100]
    assert totals.tolist() == [3, 2, 1]
    rows = sc.covered_rows(min_samples=2)
    assert set(rows) == {5, 9}
    assert rows[5][0] == 2 and rows[5][2] == 1
    assert rows[9][2] == 2


def test_build_model_marks_uncovered_rows():
    fd = free_driving_grid()
    samples = [labeled(Situation.FREE_DRIVING, fd, (30.05,), 21) for _ in range(60)]
    samples += [labeled(Situation.FREE_DRIVING, fd, (25.05,), 21) for _ in range(10)]
    tables = count_actions(samples)
    model = build_model(Situation.FREE_DRIVING, tables, window=1, min_samples=50)
    covered = model.covered_mask()
    assert covered[fd.index_of((30.05,))[0]]
    assert not covered[fd.index_of((25.05,))[0]]
    assert model.table[fd.index_of((25.05,))[0]].sum() == 0.0
    model.validate()


def test_fill_uncovered_with_idm_rows():
    fd = free_driving_grid()
    acts = standard_action_space()
    samples = [labeled(Situation.FREE_DRIVING, fd, (30.05,), 21) for _ in range(60)]
    tables = count_actions(samples)
    model = build_model(Situation.FREE_DRIVING, tables, window=1, min_samples=50)
    filler = idm_fallback_filler(fd, acts, IdmParams(), 0.3)
    filled = fill_uncovered(model, filler)
    assert filled.covered_mask().all()
    assert filled.filled_mask.sum() == fd.n_states - 1
    # original covered row is untouched
    b = fd.index_of((30.05,))[0]
    assert np.allclose(filled.table[b], model.table[b])
    filled.validate()


def test_exclude_crash_states_zeroes_rows():
    cf = car_following_grid()
    samples = [labeled(Situation.CAR_FOLLOWING, cf, (30.5, 1.5, -10.5), 1)
               for _ in range(60)]
    tables = count_actions(samples)
    mask = exclude_crash_states(tables)
    s = cf.index_of((30.5, 1.5, -10.5))
    flat = cf.ravel(s)
    assert mask[flat]
    assert tables.dense[Situation.CAR_FOLLOWING][flat].sum() == 0.0


def test_model_serialization_round_trip(tmp_path):
    fd = free_driving_grid()
    samples = [labeled(Situation.FREE_DRIVING, fd, (30.05,), 21) for _ in range(60)]
    tables = count_actions(samples)
    model = build_model(Situation.FREE_DRIVING, tables, window=5, min_samples=50)
    p = tmp_path / "fd.model"
    save_model(p, model, provenance={"note": "test"})
    again = load_model(p)
    assert np.allclose(again.table, model.table)
    assert np.array_equal(np.asarray(again.coverage), np.asarray(model.coverage))
    assert again.situation is model.situation
    assert again.grid == model.grid
    # byte-stable writes
    p2 = tmp_path / "fd2.model"
    save_model(p2, model, provenance={"note": "test"})
    assert p.read_bytes() == p2.read_bytes()


def test_sparse_model_serialization(tmp_path):
    from ndesim.core import LateralGrids
    grid = LateralGrids().grids[Situation.CUT_IN]
    samples = [labeled(Situation.CUT_IN, grid, (30.5, 30.5, 20.5, 30.5, 15.5), 0)
               for _ in range(55)]
    tables = count_actions(samples)
    model = build_model(Situation.CUT_IN, tables, window=1, min_samples=50)
    assert not model.is_dense
    p = tmp_path / "cutin.model"
    save_model(p, model)
    again = load_model(p)
    assert set(again.table) == set(model.table)
    k = next(iter(model.table))
    assert np.allclose(again.table[k], model.table[k])
    assert again.lc_prob(k) == pytest.approx(1.0)


def test_targets_positive_and_crash_zeroed(tmp_path):
    fd = free_driving_grid()
    cf = car_following_grid()
    samples = [labeled(Situation.FREE_DRIVING, fd, (30.05,), 21) for _ in range(60)]
    samples += [labeled(Situation.CAR_FOLLOWING, cf, (30.5, 40.5, 0.5), 21)
                for _ in range(60)]
    tables = count_actions(samples)
    targets = estimate_targets(tables)
    assert targets.pi_v.min() > 0
    assert targets.pi_v.sum() == pytest.approx(1.0)
    assert targets.cf_pi.sum() == pytest.approx(1.0)
    assert np.all(targets.cf_pi[targets.crash_mask] == 0.0)
    assert np.all(targets.cf_pi[~targets.crash_mask] > 0)
    p = tmp_path / "targets.npz"
    save_targets(p, targets)
    back = load_targets(p)
    assert np.allclose(back.pi_v, targets.pi_v)
    assert np.allclose(back.cf_pi, targets.cf_pi)
    assert np.allclose(back.init.joint_vrr, targets.init.joint_vrr)


def test_empirical_models_bundle_lookup():
    fd = free_driving_grid()
    cf = car_following_grid()
    samples = [labeled(Situation.FREE_DRIVING, fd, (30.05,), 21) for _ in range(40)]
    samples += [labeled(Situation.FREE_DRIVING, fd, (30.05,), 23) for _ in range(60)]
    samples += [labeled(Situation.CAR_FOLLOWING, cf, (30.5, 40.5, 0.5), 19)
                for _ in range(60)]
    tables = count_actions(samples)
    models = build_all_models(tables, window=1, min_samples=50)
    bundle = EmpiricalModels(models)
    q, ok = bundle.longitudinal(np.array([True]), np.array([30.05]),
                                np.array([np.nan]), np.array([np.nan]))
    assert ok[0]
    assert q[0, 20] == pytest.approx(0.4)
    assert q[0, 22] == pytest.approx(0.6)
    q, ok = bundle.longitudinal(np.array([True]), np.array([39.9]),
                                np.array([np.nan]), np.array([np.nan]))
    assert not ok[0]  # uncovered speed bin
    q, ok = bundle.longitudinal(np.array([False]), np.array([30.5]),
                                np.array([40.5]), np.array([0.5]))
    assert ok[0] and q[0, 18] == pytest.approx(1.0)


def test_count_tables_merge_matches_joint_count():
    fd = free_driving_grid()
    s1 = [labeled(Situation.FREE_DRIVING, fd, (30.05,), 21) for _ in range(5)]
    s2 = [labeled(Situation.FREE_DRIVING, fd, (31.05,), 22) for _ in range(7)]
    t1 = count_actions(s1)
    t2 = count_actions(s2)
    joint = count_actions(s1 + s2)
    merged = t1.merge(t2)
    assert np.allclose(merged.dense[Situation.FREE_DRIVING],
                       joint.dense[Situation.FREE_DRIVING])
