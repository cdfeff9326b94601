import numpy as np
import pytest

from oracles import rel
from rigidttt import arrays, kspace, priors, solvers, ttt
from rigidttt.motion import MotionOperator
from rigidttt.simharness import ExperimentSpec, SeverityLevel, build_problem


@pytest.fixture(scope="module")
def problem():
    return build_problem(ExperimentSpec(), SeverityLevel(1, 2), 0)


def full_op(shape, B=4, C=4):
    traj = kspace.make_trajectory(kspace.make_mask(shape, 1), B)
    return MotionOperator(shape, kspace.make_coils(shape, C), traj)


def test_config_invariants():
    with pytest.raises(ValueError):
        solvers.L1Config(steps=0)
    with pytest.raises(ValueError):
        solvers.L1Config(lam=-1.0)
    with pytest.raises(ValueError):
        solvers.AltOptConfig(max_iters=-1)
    with pytest.raises(ValueError):
        solvers.AltOptConfig(recon_lr=0.0)


def test_l1_without_regulariser_recovers_fully_sampled_image():
    shape = (64, 64)
    op = full_op(shape)
    x = kspace.make_phantom(shape, "ellipses", seed=0)
    y = op.forward(x, op.zero_motion())
    out = solvers.l1_reconstruct(y, op, op.zero_motion(), solvers.L1Config(lam=0.0))
    assert rel(out, x) <= 1e-3


def test_l1_objective_is_non_increasing(problem):
    res = solvers.l1_reconstruct_traced(problem.y, problem.true_op, problem.scenario.motion, problem.spec.l1)
    assert len(res.trace) == problem.spec.l1.steps + 1
    assert all(b <= a * (1 + 1e-12) for a, b in zip(res.trace, res.trace[1:]))


def test_l1_with_true_motion_beats_no_correction(problem):
    known = solvers.l1_reconstruct(problem.y, problem.true_op, problem.scenario.motion)
    none = solvers.l1_reconstruct(problem.y, problem.shot_op, problem.shot_op.zero_motion())
    assert arrays.psnr(problem.x, known) > arrays.psnr(problem.x, none)


def test_excluding_every_state_is_an_error(problem):
    op = problem.shot_op
    with pytest.raises(ValueError):
        solvers.l1_reconstruct(problem.y, op, op.zero_motion(), excluded=range(op.num_states))


def test_exclusion_removes_exactly_the_state_lines(problem):
    op = problem.shot_op
    m = problem.scenario.shot_motion
    y = problem.y.copy()
    lines = op.line_state == 3
    garbage = y.copy()
    garbage[:, lines] = 1e3 * (1 + 1j)
    a = solvers.l1_reconstruct(y, op, m, excluded=[3])
    b = solvers.l1_reconstruct(garbage, op, m, excluded=[3])
    np.testing.assert_array_equal(a, b)
    c = solvers.l1_reconstruct(garbage, op, m)
    assert not np.allclose(a, c)


def test_l1_divergence_is_reported_with_trace(problem):
    op = problem.shot_op
    cfg = solvers.L1Config(absolute_scale=True, lr=5e7, steps=5)
    with pytest.raises(solvers.SolverDivergedError) as err:
        solvers.l1_reconstruct(problem.y, op, op.zero_motion(), cfg)
    assert len(err.value.trace) >= 2


def test_threshold_with_empty_flag_set_equals_plain_l1(problem):
    m = problem.scenario.shot_motion
    rep = ttt.DCReport(np.zeros(problem.shot_op.num_states), 0.575)
    a = solvers.threshold_and_reconstruct(problem.y, problem.shot_op, m, rep)
    b = solvers.l1_reconstruct(problem.y, problem.shot_op, m)
    np.testing.assert_array_equal(a, b)


def test_threshold_zero_flags_everything_and_errors(problem):
    m = problem.scenario.shot_motion
    rep = ttt.dc_loss_per_state(problem.y, problem.shot_op, m, problem.prior, threshold=0.0)
    assert rep.flagged == list(range(problem.shot_op.num_states))
    with pytest.raises(ValueError):
        solvers.threshold_and_reconstruct(problem.y, problem.shot_op, m, rep)


def test_thresholding_a_corrupted_state_improves_psnr(problem):
    m = problem.scenario.shot_motion.copy()
    m[5, 2] += 10.0
    rep = ttt.dc_loss_per_state(problem.y, problem.shot_op, m, problem.prior)
    assert rep.flagged == [5]
    th = solvers.threshold_and_reconstruct(problem.y, problem.shot_op, m, rep)
    plain = solvers.l1_reconstruct(problem.y, problem.shot_op, m)
    assert arrays.psnr(problem.x, th) > arrays.psnr(problem.x, plain)


# ------------------------------------------------------------------ DC layer


def test_dc_layer_keeps_consistent_init():
    shape = (32, 32)
    op = full_op(shape)
    x = kspace.make_phantom(shape, "ellipses", seed=1)
    y = op.forward(x, op.zero_motion())
    res = solvers.dc_layer_refine(x, y, op, op.zero_motion())
    assert rel(res.image, x) <= 1e-3


def test_dc_layer_large_lambda_stays_at_init(problem):
    x0 = problem.prior.apply(problem.shot_op.corrected_zf(problem.y, problem.shot_op.zero_motion()))
    res = solvers.dc_layer_refine(x0, problem.y, problem.shot_op, problem.shot_op.zero_motion(), lam=1e6)
    assert rel(res.image, x0) <= 1e-3


def test_dc_layer_reduces_data_term_from_corrupted_init(problem):
    op, m = problem.true_op, problem.scenario.motion
    x0 = problem.x + 0.3 * np.abs(problem.x).max() * np.random.default_rng(2).normal(size=problem.x.shape)
    ny = np.abs(problem.y).sum()

    def data_term(x):
        return np.abs(op.forward(x, m) - problem.y).sum() / ny

    res = solvers.dc_layer_refine(x0, problem.y, op, m)
    assert data_term(res.image) < data_term(x0)
    assert min(res.trace) == res.trace[0] or min(res.trace) < res.trace[0]


def test_dc_layer_rejects_zero_inputs(problem):
    op = problem.shot_op
    with pytest.raises(ValueError):
        solvers.dc_layer_refine(np.zeros(op.shape), problem.y, op, op.zero_motion())


# ------------------------------------------------------------------ alternating optimisation


def test_altopt_zero_iterations_returns_zero_motion_and_zf(problem):
    op = problem.shot_op
    res = solvers.altopt(problem.y, op, solvers.AltOptConfig(max_iters=0))
    np.testing.assert_array_equal(res.motion.params, 0.0)
    np.testing.assert_allclose(res.image, op.adjoint(problem.y, op.zero_motion()), rtol=1e-12, atol=1e-12)
    assert res.trace == []


def test_altopt_without_motion_steps_keeps_zero_motion(problem):
    res = solvers.altopt(problem.y, problem.shot_op, solvers.AltOptConfig(max_iters=5, motion_lr=0.0))
    np.testing.assert_array_equal(res.motion.params, 0.0)
    assert len(res.trace) == 5


def test_altopt_is_stable_on_motion_free_data():
    p = build_problem(ExperimentSpec(), SeverityLevel(0, 0), 1)
    res = solvers.altopt(p.y, p.shot_op, p.spec.altopt)
    assert np.max(np.abs(res.motion.params)) <= 0.25


def test_altopt_improves_on_no_correction():
    wins, trials = 0, 5
    for seed in range(trials):
        p = build_problem(ExperimentSpec(), SeverityLevel(1, 2), seed)
        res = solvers.altopt(p.y, p.shot_op, p.spec.altopt)
        a = arrays.psnr(p.x, solvers.l1_reconstruct(p.y, p.shot_op, res.motion))
        b = arrays.psnr(p.x, solvers.l1_reconstruct(p.y, p.shot_op, p.shot_op.zero_motion()))
        wins += a > b
    assert wins >= 0.8 * trials
