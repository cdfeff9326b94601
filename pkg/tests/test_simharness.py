from dataclasses import replace

import numpy as np
import pytest

from rigidttt import arrays, kspace, simharness as sh


def traj(B=8, R=4.0, order="interleaved", shape=(32, 32), seed=0):
    return kspace.make_trajectory(kspace.make_mask(shape, R, seed=seed), B, order, seed=seed)


def test_canonical_levels():
    pairs = [(lv.n_events, lv.m_max) for lv in sh.CANONICAL_LEVELS]
    assert pairs == [(0, 0), (1, 2), (5, 2), (10, 2), (1, 5), (1, 10), (5, 5), (10, 5), (5, 10), (10, 10)]
    assert sh.SeverityLevel(10, 5).label() == "(10,5)"
    with pytest.raises(ValueError):
        sh.SeverityLevel(-1, 2)


def test_inter_shot_no_motion_is_all_zero():
    sc = sh.simulate_inter_shot(traj(), sh.SeverityLevel(0, 0), 3)
    np.testing.assert_array_equal(sc.motion.params, 0.0)


@pytest.mark.parametrize("ndim", [2, 3])
def test_inter_shot_single_event(ndim):
    for seed in range(20):
        sc = sh.simulate_inter_shot(traj(), sh.SeverityLevel(1, 2), seed, ndim)
        P = 3 if ndim == 2 else 6
        assert sc.motion.params.shape == (8, P)
        assert len(np.unique(sc.motion.params, axis=0)) == 2
        assert np.all(np.abs(sc.motion.params) <= 2)
        np.testing.assert_array_equal(sc.motion.params[0], 0.0)
        # constant between events: the states change exactly once
        changes = np.any(np.diff(sc.motion.params, axis=0) != 0, axis=1)
        assert changes.sum() == 1
        np.testing.assert_array_equal(sc.trajectory.line_state, sc.trajectory.shot_of_line)


def test_inter_shot_is_seeded_and_validates_event_count():
    a = sh.simulate_inter_shot(traj(), sh.SeverityLevel(5, 5), 11)
    b = sh.simulate_inter_shot(traj(), sh.SeverityLevel(5, 5), 11)
    np.testing.assert_array_equal(a.motion.params, b.motion.params)
    c = sh.simulate_inter_shot(traj(), sh.SeverityLevel(5, 5), 12)
    assert not np.array_equal(a.motion.params, c.motion.params)
    with pytest.raises(ValueError):
        sh.simulate_inter_shot(traj(B=8), sh.SeverityLevel(8, 2), 0)


def test_intra_path_without_peaks_is_linear():
    path = sh.intra_path([0.0, 1.0, -2.0], [4.0, 1.0, 2.0], 8)
    pos = (np.arange(8) + 0.5) / 8
    expected = np.array([0.0, 1.0, -2.0]) + pos[:, None] * np.array([4.0, 0.0, 4.0])
    np.testing.assert_allclose(path, expected, rtol=0, atol=1e-15)


def test_intra_path_passes_through_peak():
    path = sh.intra_path([0.0], [0.0], 4, peaks=[(0.375, [3.0])])
    assert path[1, 0] == pytest.approx(3.0)
    assert np.all(path <= 3.0)


@pytest.mark.parametrize("n_events,expected", [(1, 1), (5, 3), (4, 2)])
def test_intra_event_count_is_ceiling_of_half(n_events, expected):
    t = traj(B=8, order="random")
    sc = sh.simulate_intra_shot(t, sh.SeverityLevel(n_events, 5), 1)
    assert len(sc.intra_shots) == expected
    for s in sc.intra_shots:
        assert len(np.unique(sc.trajectory.line_state[t.positions_of_shot(s)])) == len(t.shots[s])


def test_intra_paths_stay_in_hull_of_knots():
    t = traj(B=8, order="random")
    for seed in range(100):
        sc = sh.simulate_intra_shot(t, sh.SeverityLevel(1, 5), seed)
        per_line = sc.per_line()
        np.testing.assert_array_equal(per_line[t.positions_of_shot(0)], 0.0)
        for s in sc.intra_shots:
            start = sc.shot_motion[s - 1]
            end = sc.shot_motion[s + 1] if s + 1 < t.num_shots else sc.shot_motion[s]
            lo = np.minimum(np.minimum(start, end), -5.0)
            hi = np.maximum(np.maximum(start, end), 5.0)
            seg = per_line[t.positions_of_shot(s)]
            assert np.all(seg >= lo - 1e-12) and np.all(seg <= hi + 1e-12)


def test_motion_mae():
    assert sh.motion_mae(np.zeros((4, 3)), np.full((4, 3), 0.5)) == 0.5


# ------------------------------------------------------------------ experiments

SMALL = sh.ExperimentSpec(shape=(32, 32), d=8, bandwidth=12.0)


def test_known_equals_motion_free_reconstruction_without_motion():
    p = sh.build_problem(SMALL, sh.SeverityLevel(0, 0), 0)
    res = sh.run_trial(p, ("known", "none"))
    free = sh.reconstruct(p, p.shot_op, p.shot_op.zero_motion())
    assert res["known"].psnr == arrays.psnr(p.x, free)
    assert res["known"].psnr == res["none"].psnr
    assert res["known"].motion_mae == 0.0


def test_problem_measurements_follow_true_motion():
    p = sh.build_problem(SMALL, sh.SeverityLevel(1, 2), 1)
    np.testing.assert_array_equal(p.y, p.true_op.forward(p.x, p.scenario.motion))
    assert p.prior.scale == pytest.approx(32 * 32 / p.y.shape[1])


def test_known_motion_beats_no_correction_under_severe_motion():
    spec = replace(SMALL, shots=16)
    for seed in range(3):
        p = sh.build_problem(spec, sh.SeverityLevel(10, 10), seed)
        res = sh.run_trial(p, ("known", "none"))
        assert res["known"].psnr > res["none"].psnr


def test_run_experiment_rows_and_csv(tmp_path):
    rows = sh.run_experiment(SMALL, sh.SeverityLevel(1, 2), ("known", "none"), seeds=(0, 1))
    assert [r[:3] for r in rows] == [["(1,2)", "known", 0], ["(1,2)", "none", 0], ["(1,2)", "known", 1],
                                     ["(1,2)", "none", 1]]
    path = tmp_path / "r.csv"
    sh.write_results_csv(path, rows)
    assert path.read_text().splitlines()[0] == ",".join(sh.RESULT_HEADER)


def test_run_trial_rejects_unknown_method():
    p = sh.build_problem(SMALL, sh.SeverityLevel(0, 0), 0)
    with pytest.raises(ValueError):
        sh.run_trial(p, ("magic",))


# ------------------------------------------------------------------ N_splits sweep


def test_nsplits_row_count():
    rows = sh.sweep_nsplits(SMALL, [sh.SeverityLevel(1, 5), sh.SeverityLevel(1, 2)], (2, 4, 8), seeds=(0, 1),
                            estimate=False)
    assert len(rows) == 2 * 3 * 2
    assert all(np.isnan(r[4]) for r in rows)


def test_nsplits_at_lines_per_shot_matches_full_resolution():
    spec = replace(SMALL, intra=True, order="random")
    p = sh.build_problem(spec, sh.SeverityLevel(1, 5), 0)
    per_shot = len(p.shot_traj.shots[0])
    t, m, groups = sh.discretize_intra(p.scenario, p.shot_traj, per_shot)
    np.testing.assert_array_equal(m[t.line_state], p.scenario.per_line())
    full = sh.run_trial(p, ("known",))["known"].psnr
    (row,) = sh.sweep_nsplits(SMALL, [sh.SeverityLevel(1, 5)], (per_shot,), seeds=(0,), estimate=False)
    assert row[3] == full


def test_coarser_splits_lose_psnr():
    ok, seeds = 0, range(20)
    rows1 = sh.sweep_nsplits(SMALL, [sh.SeverityLevel(1, 5)], (1,), seeds=seeds, estimate=False)
    rows10 = sh.sweep_nsplits(SMALL, [sh.SeverityLevel(1, 5)], (10,), seeds=seeds, estimate=False)
    for a, b in zip(rows1, rows10):
        ok += a[3] <= b[3]
    assert ok >= 0.95 * len(seeds)


def test_nsplits_estimation_path():
    (row,) = sh.sweep_nsplits(SMALL, [sh.SeverityLevel(1, 5)], (4,), seeds=(0,))
    assert np.isfinite(row[4]) and np.isfinite(row[5])
