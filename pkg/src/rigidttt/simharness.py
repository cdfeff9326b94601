"""Severity-graded motion simulation and paired reconstruction experiments.

A severity level ``(N_e, M_max)`` places ``N_e`` motion events on the gaps
between shots; at each event every parameter is redrawn uniformly from
``[-M_max, M_max]`` (voxels / degrees). The first shot is always the zero
state. Intra-shot events replace the affected shot's single state by one
state per line following a piecewise-linear path.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import arrays, kspace, priors, solvers, ttt
from .motion import MotionOperator, MotionTrajectory, num_params


@dataclass(frozen=True)
class SeverityLevel:
    n_events: int
    m_max: float

    def __post_init__(self):
        if self.n_events < 0 or self.m_max < 0:
            raise ValueError("severity components must be nonnegative")

    def label(self) -> str:
        return f"({self.n_events},{self.m_max:g})"


CANONICAL_LEVELS = tuple(SeverityLevel(e, m) for e, m in
                         [(0, 0), (1, 2), (5, 2), (10, 2), (1, 5), (1, 10), (5, 5), (10, 5), (5, 10), (10, 10)])


@dataclass
class SimulatedScenario:
    motion: MotionTrajectory  # ground truth, one row per state of ``trajectory``
    trajectory: kspace.SamplingTrajectory  # true per-line states
    shot_motion: np.ndarray  # (B, P) per-shot parameters before intra-shot paths
    intra_shots: list
    level: SeverityLevel
    seed: int

    def per_line(self) -> np.ndarray:
        return self.motion.params[self.trajectory.line_state]


def _event_shots(B, level, rng):
    if level.n_events >= B:
        raise ValueError(f"{level.n_events} events need more than {B} shots")
    return np.sort(rng.choice(np.arange(1, B), size=level.n_events, replace=False)) if level.n_events else np.zeros(0, int)


def _shot_states(B, P, level, events, rng):
    states = np.zeros((B, P))
    cur = np.zeros(P)
    ev = set(int(e) for e in events)
    for s in range(B):
        if s in ev:
            cur = rng.uniform(-level.m_max, level.m_max, size=P)
        states[s] = cur
    return states


def simulate_inter_shot(traj: kspace.SamplingTrajectory, level: SeverityLevel, seed: int, ndim: int = 2) -> SimulatedScenario:
    rng = np.random.default_rng(seed)
    B = traj.num_shots
    P = num_params(ndim)
    events = _event_shots(B, level, rng)
    states = _shot_states(B, P, level, events, rng)
    t = traj.with_states(traj.shot_of_line)
    return SimulatedScenario(MotionTrajectory(states, ndim), t, states, [], level, seed)


def intra_path(start, end, n_lines: int, peaks=()) -> np.ndarray:
    """Per-line parameters along knots ``(0, start), peaks..., (1, end)``.

    ``peaks`` holds ``(position in (0, 1), parameter vector)`` pairs; line
    ``i`` sits at position ``(i + 0.5) / n_lines``.
    """
    start = np.asarray(start, dtype=float)
    end = np.asarray(end, dtype=float)
    knots_t = [0.0] + [float(p) for p, _ in peaks] + [1.0]
    knots_v = np.array([start] + [np.asarray(v, dtype=float) for _, v in peaks] + [end])
    order = np.argsort(knots_t, kind="stable")
    kt = np.asarray(knots_t)[order]
    kv = knots_v[order]
    pos = (np.arange(n_lines) + 0.5) / n_lines
    return np.stack([np.interp(pos, kt, kv[:, j]) for j in range(kv.shape[1])], axis=1)


def simulate_intra_shot(traj: kspace.SamplingTrajectory, level: SeverityLevel, seed: int, ndim: int = 2,
                        max_peaks: int = 2) -> SimulatedScenario:
    """``ceil(N_e / 2)`` events become intra-shot; their shot gets one state per line."""
    rng = np.random.default_rng(seed)
    B = traj.num_shots
    P = num_params(ndim)
    events = _event_shots(B, level, rng)
    states = _shot_states(B, P, level, events, rng)
    n_intra = math.ceil(level.n_events / 2)
    intra = sorted(int(s) for s in rng.choice(events, size=n_intra, replace=False)) if n_intra else []
    rows = []
    line_state = np.empty(traj.num_lines, dtype=np.int64)
    for s in range(B):
        pos = traj.positions_of_shot(s)
        if s not in intra:
            line_state[pos] = len(rows)
            rows.append(states[s])
            continue
        end = states[s + 1] if s + 1 < B else states[s]
        n_peaks = int(rng.integers(0, max_peaks + 1))
        peaks = [(float(rng.uniform(0, 1)), rng.uniform(-level.m_max, level.m_max, size=P)) for _ in range(n_peaks)]
        path = intra_path(states[s - 1], end, len(pos), peaks)
        for i, p in enumerate(pos):
            line_state[p] = len(rows)
            rows.append(path[i])
    t = traj.with_states(line_state)
    return SimulatedScenario(MotionTrajectory(np.array(rows), ndim), t, states, intra, level, seed)


# ------------------------------------------------------------------ experiments


@dataclass(frozen=True)
class ExperimentSpec:
    """Desk-scale problem: subspace phantom, coils, mask and shot layout."""

    shape: tuple = (64, 64)
    d: int = 16
    bandwidth: float = 24.0
    coils: int = 4
    shots: int = 8
    acceleration: float = 4.0
    mask_kind: str = "uniform-random"
    order: str = "interleaved"
    intra: bool = False
    recon: str = "l1"
    ttt: ttt.TTTConfig | None = None
    l1: solvers.L1Config = solvers.L1Config()
    altopt: solvers.AltOptConfig = solvers.AltOptConfig()

    def ttt_config(self, seed: int) -> ttt.TTTConfig:
        base = self.ttt or ttt.TTTConfig.for_field_of_view(max(self.shape[:2]))
        return replace(base, seed=seed, intra=self.intra)


@dataclass
class Problem:
    """Everything a trial needs: phantom, operators, measurements and prior."""

    spec: ExperimentSpec
    seed: int
    x: np.ndarray
    basis: np.ndarray
    coils: kspace.CoilSensitivities
    shot_traj: kspace.SamplingTrajectory
    scenario: SimulatedScenario
    y: np.ndarray
    true_op: MotionOperator
    shot_op: MotionOperator
    prior: priors.Reconstructor


def build_problem(spec: ExperimentSpec, level: SeverityLevel, seed: int) -> Problem:
    shape = tuple(spec.shape)
    ndim = len(shape)
    U = kspace.subspace_basis(shape, spec.d, seed=seed, bandwidth=spec.bandwidth)
    x = kspace.make_phantom(shape, "subspace", {"basis": U}, seed=seed)
    coils = kspace.make_coils(shape, spec.coils, seed=seed)
    mask = kspace.make_mask(shape[:2], spec.acceleration, spec.mask_kind, seed=seed)
    traj = kspace.make_trajectory(mask, spec.shots, spec.order, seed=seed)
    sim = simulate_intra_shot if spec.intra else simulate_inter_shot
    scenario = sim(traj, level, seed + 7919, ndim)
    true_op = MotionOperator(shape, coils, scenario.trajectory)
    y = true_op.forward(x, scenario.motion)
    shot_op = MotionOperator(shape, coils, traj)
    samples = int(np.prod(true_op.base.shape[:2]))
    prior = priors.subspace_projector(U, 1, samples, shape)
    return Problem(spec, seed, x, U, coils, traj, scenario, y, true_op, shot_op, prior)


def motion_mae(true_per_line, est_per_line) -> float:
    """Mean absolute parameter error over lines (states weighted by line count)."""
    return float(np.mean(np.abs(np.asarray(true_per_line) - np.asarray(est_per_line))))


def reconstruct(problem: Problem, op: MotionOperator, m, excluded=(), recon: str | None = None) -> np.ndarray:
    recon = recon or problem.spec.recon
    if recon == "l1":
        return solvers.l1_reconstruct(problem.y, op, m, problem.spec.l1, excluded)
    if recon == "dclayer":
        x0 = problem.prior.apply(op.corrected_zf(problem.y, m))
        return solvers.dc_layer_refine(x0, problem.y, op, m).image
    raise ValueError(f"unknown reconstruction {recon!r}")


METHODS = ("ttt", "ttt+th", "altopt", "altopt+th", "known", "none")


@dataclass
class TrialOutcome:
    method: str
    psnr: float
    motion_mae: float
    flagged_count: int
    image: np.ndarray = field(repr=False, default=None)
    extra: dict = field(default_factory=dict)


def run_trial(problem: Problem, methods=METHODS) -> dict:
    """Evaluate each method on one simulated problem. Returns ``{method: TrialOutcome}``."""
    spec = problem.spec
    true_line = problem.scenario.per_line()
    out = {}
    cache = {}

    def ttt_estimate():
        if "ttt" not in cache:
            cfg = spec.ttt_config(problem.seed)
            cache["ttt"] = ttt.run_full(problem.y, problem.shot_op, problem.prior, cfg)
        return cache["ttt"]

    def altopt_estimate():
        if "altopt" not in cache:
            res = solvers.altopt(problem.y, problem.shot_op, spec.altopt)
            report = ttt.dc_loss_per_state(problem.y, problem.shot_op, res.motion, problem.prior,
                                           spec.ttt_config(problem.seed).dc_threshold)
            cache["altopt"] = (res, report)
        return cache["altopt"]

    for method in methods:
        if method == "known":
            op, m, excl, flagged = problem.true_op, problem.scenario.motion.params, (), 0
        elif method == "none":
            op, m, excl, flagged = problem.shot_op, problem.shot_op.zero_motion(), (), 0
        elif method in ("ttt", "ttt+th"):
            res = ttt_estimate()
            op = problem.shot_op.with_trajectory(res.trajectory) if res.trajectory is not problem.shot_traj else problem.shot_op
            m = res.motion.params
            excl = res.report.flagged if method == "ttt+th" else ()
            flagged = len(res.report.flagged)
        elif method in ("altopt", "altopt+th"):
            res, report = altopt_estimate()
            op, m = problem.shot_op, res.motion.params
            excl = report.flagged if method == "altopt+th" else ()
            flagged = len(report.flagged)
        else:
            raise ValueError(f"unknown method {method!r}")
        if len(excl) == op.num_states:
            excl = ()  # nothing would remain; fall back to the unthresholded reconstruction
        img = reconstruct(problem, op, m, excl)
        est_line = np.asarray(m)[op.line_state]
        out[method] = TrialOutcome(method, arrays.psnr(problem.x, img), motion_mae(true_line, est_line), flagged, img)
    return out


RESULT_HEADER = ["level", "method", "seed", "psnr", "motion_mae", "flagged_count"]


def run_experiment(spec: ExperimentSpec, level: SeverityLevel, methods=METHODS, seeds=(0,)) -> list:
    """Rows ``(level, method, seed, psnr, motion_mae, flagged_count)`` in seed order."""
    rows = []
    for seed in seeds:
        problem = build_problem(spec, level, int(seed))
        res = run_trial(problem, methods)
        for method in methods:
            o = res[method]
            rows.append([level.label(), method, int(seed), o.psnr, o.motion_mae, o.flagged_count])
    return rows


def write_results_csv(path, rows) -> None:
    arrays.write_csv(path, RESULT_HEADER, rows)


# ------------------------------------------------------------------ N_splits sweep


def discretize_intra(scenario: SimulatedScenario, shot_traj: kspace.SamplingTrajectory, n_splits: int):
    """Known motion with each intra-shot shot split into ``n_splits`` averaged groups.

    Returns ``(trajectory, motion, groups)`` where ``groups`` lists the
    state indices of each split shot; states are numbered in acquisition
    order as in :func:`simulate_intra_shot`.
    """
    per_line = scenario.per_line()
    rows = []
    line_state = np.empty(shot_traj.num_lines, dtype=np.int64)
    groups = []
    for s in range(shot_traj.num_shots):
        pos = shot_traj.positions_of_shot(s)
        if s not in scenario.intra_shots:
            line_state[pos] = len(rows)
            rows.append(per_line[pos[0]])
            continue
        group = []
        for g in np.array_split(pos, min(n_splits, len(pos))):
            line_state[g] = len(rows)
            group.append(len(rows))
            rows.append(per_line[g].mean(axis=0))
        groups.append(group)
    return shot_traj.with_states(line_state), np.array(rows), groups


NSPLIT_HEADER = ["level", "n_splits", "seed", "psnr_known_discretized", "psnr_ttt", "motion_mae_ttt"]


def sweep_nsplits(spec: ExperimentSpec, levels, values=(5, 10, 20), seeds=(0,), estimate: bool = True) -> list:
    """Intra-shot scenarios with known inter-shot states, discretised per ``n_splits``.

    For each value reports the PSNR with discretised known motion and,
    if ``estimate``, the PSNR and motion error after estimating only the
    split states (phases 2 and 3 from states reset to their neighbours).
    """
    spec = replace(spec, intra=True, order="random" if spec.order == "interleaved" else spec.order)
    rows = []
    for level in levels:
        for value in values:
            for seed in seeds:
                problem = build_problem(spec, level, int(seed))
                traj, m_known, groups = discretize_intra(problem.scenario, problem.shot_traj, int(value))
                op = problem.shot_op.with_trajectory(traj)
                psnr_known = arrays.psnr(problem.x, reconstruct(problem, op, m_known))
                psnr_ttt = mae = float("nan")
                split = [i for g in groups for i in g]
                if estimate and split:
                    m0 = m_known.copy()
                    for g in groups:
                        nb = [j for j in (g[0] - 1, g[-1] + 1) if 0 <= j < len(m0) and j not in split]
                        m0[g] = np.mean(m_known[nb], axis=0) if nb else 0.0
                    cfg = spec.ttt_config(int(seed))
                    m_est, _ = ttt.optimize_states(problem.y, op, m0, split, cfg, problem.prior)
                    psnr_ttt = arrays.psnr(problem.x, reconstruct(problem, op, m_est))
                    mae = motion_mae(problem.scenario.per_line(), m_est[op.line_state])
                rows.append([level.label(), int(value), int(seed), psnr_known, psnr_ttt, mae])
    return rows
