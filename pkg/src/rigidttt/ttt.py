"""Motion estimation by test-time training of the motion parameters.

The data-consistency (DC) loss of a motion estimate ``m`` is::

    L(m) = || A(m) f(A(m)^H W(m) y) - y ||_1 / || y ||_1

where ``A(m)`` is the motion-aware acquisition, ``W(m)`` the density
compensation of the rotated coordinates and ``f`` a frozen reconstructor.
``run_full`` minimises it in three phases: one state per shot, then only the
states whose per-state loss exceeds a threshold (after resetting and,
optionally, splitting them), then all states jointly.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import arrays
from .kspace import SamplingTrajectory
from .motion import MotionOperator, MotionTrajectory
from .priors import Reconstructor, SliceWise


# ------------------------------------------------------------------ configuration


@dataclass(frozen=True)
class TTTConfig:
    phase1_iters: int = 70
    phase1_lr: float = 4.0
    decay_factor: float = 4.0
    decay_at: tuple = (40, 60)
    phase2_iters: int = 30
    phase2_lr: float = 0.5
    phase3_iters: int = 30
    phase3_lr: float = 0.05
    extra_iters: int = 30
    extra_decay_after: int = 10
    dc_threshold: float = 0.575
    n_splits: int = 10
    clamp_bounds: tuple = (5.0, 8.0, 10.0, 12.0, 15.0)
    clamp_until: tuple = (15, 30, 45, 60, 150)
    rot_only_warmup_steps: int = 5
    grad_slice_count: int = 5
    fix_first_state: bool = True
    intra: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "decay_at", tuple(int(v) for v in self.decay_at))
        object.__setattr__(self, "clamp_bounds", tuple(float(v) for v in self.clamp_bounds))
        object.__setattr__(self, "clamp_until", tuple(int(v) for v in self.clamp_until))
        for name in ("phase1_lr", "phase2_lr", "phase3_lr", "decay_factor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("phase1_iters", "phase2_iters", "phase3_iters", "extra_iters", "extra_decay_after",
                     "rot_only_warmup_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        d = self.decay_at
        if any(b <= a for a, b in zip(d, d[1:])):
            raise ValueError("decay_at must be strictly increasing")
        if d and self.phase1_iters and d[-1] >= self.phase1_iters:
            raise ValueError("decay_at entries must be below phase1_iters")
        if len(self.clamp_bounds) != len(self.clamp_until):
            raise ValueError("clamp_bounds and clamp_until must have equal length")
        if self.n_splits < 1:
            raise ValueError("n_splits must be at least 1")
        if self.grad_slice_count < 1:
            raise ValueError("grad_slice_count must be positive")

    @classmethod
    def from_dict(cls, doc: dict) -> "TTTConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown TTT options: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v) for f in fields(self)}

    @classmethod
    def for_field_of_view(cls, fov: int, reference_fov: int = 256, **overrides) -> "TTTConfig":
        """Defaults with every learning rate scaled by ``fov / reference_fov``.

        Adam steps are measured in voxels/degrees, so step sizes tuned for a
        256-voxel field of view overshoot the loss basin of smaller images.
        """
        base = cls()
        s = fov / reference_fov
        doc = {"phase1_lr": base.phase1_lr * s, "phase2_lr": base.phase2_lr * s, "phase3_lr": base.phase3_lr * s}
        doc.update(overrides)
        return cls(**doc)

    def phase1_lr_at(self, it: int) -> float:
        """Learning rate of phase-1 iteration ``it`` (0-based)."""
        n = sum(1 for d in self.decay_at if it >= d)
        return self.phase1_lr / self.decay_factor**n

    def clamp_bound(self, step: int):
        """Parameter bound active at global optimizer step ``step`` (None = unclamped)."""
        for bound, until in zip(self.clamp_bounds, self.clamp_until):
            if step < until:
                return bound
        return None


@dataclass
class DCReport:
    per_state_loss: np.ndarray
    threshold: float
    flagged: list = field(init=False)

    def __post_init__(self):
        self.per_state_loss = np.asarray(self.per_state_loss, dtype=float)
        self.flagged = [int(i) for i in np.flatnonzero(self.per_state_loss > self.threshold)]

    def csv_text(self) -> str:
        return arrays.csv_text(["state", "loss", "flagged"],
                               [[i, float(v), i in self.flagged] for i, v in enumerate(self.per_state_loss)])

    def to_csv(self, path) -> None:
        arrays.write_csv(path, ["state", "loss", "flagged"],
                         [[i, float(v), i in self.flagged] for i, v in enumerate(self.per_state_loss)])


# ------------------------------------------------------------------ losses


def _prediction(op: MotionOperator, y, m, recon: Reconstructor):
    z = op.corrected_zf(y, m)
    xhat = recon.apply(z)
    return z, xhat, op.forward(xhat, m)


def _l1_norm(y) -> float:
    n = float(np.sum(np.abs(y)))
    if n == 0:
        raise ValueError("measurements are identically zero")
    return n


def dc_loss(y, op: MotionOperator, m, recon: Reconstructor) -> float:
    norm = _l1_norm(y)
    _, _, pred = _prediction(op, y, m, recon)
    return float(np.sum(np.abs(pred - y)) / norm)


def dc_loss_per_state(y, op: MotionOperator, m, recon: Reconstructor, threshold: float = 0.575) -> DCReport:
    """Relative l1 residual restricted to the lines of each state."""
    _l1_norm(y)
    _, _, pred = _prediction(op, y, m, recon)
    b = op.num_states
    ls = op.line_state
    res = np.bincount(ls, weights=np.abs(pred - y).sum(axis=(0, 2)), minlength=b)
    ref = np.bincount(ls, weights=np.abs(y).sum(axis=(0, 2)), minlength=b)
    with np.errstate(invalid="ignore", divide="ignore"):
        loss = np.where(ref > 0, res / np.where(ref > 0, ref, 1.0), 0.0)
    return DCReport(loss, threshold)


def dc_loss_on_lines(y, op: MotionOperator, m, recon: Reconstructor, lines) -> float:
    """Relative l1 residual restricted to the given line indices.

    Useful for comparing estimates whose state layouts differ, e.g. one
    shot-level state against the sub-states it was split into.
    """
    _l1_norm(y)
    lines = np.asarray(lines, dtype=np.int64)
    _, _, pred = _prediction(op, y, m, recon)
    ref = float(np.abs(y[:, lines]).sum())
    if ref == 0:
        raise ValueError("measurements on the selected lines are identically zero")
    return float(np.abs(pred[:, lines] - y[:, lines]).sum() / ref)


def _slice_mask(shape, axis, count, rng):
    mask = np.zeros(shape)
    idx = rng.choice(shape[axis], size=min(count, shape[axis]), replace=False)
    sl = [slice(None)] * len(shape)
    sl[axis] = idx
    mask[tuple(sl)] = 1.0
    return mask


def _density_grad(y, op: MotionOperator, m, w_img, h: float = 1e-3):
    """Gradient contribution of the density weights' dependence on the angles.

    ``w_img`` is the cotangent of the corrected ZF image. The loss gradient
    with respect to each weight is analytic; the weights' derivative with
    respect to each state's angles is a central difference (the weights
    come out of a fixed-iteration algorithm, so they are smooth in ``m``).
    """
    g = np.zeros(m.shape)
    if not op.density:
        return g
    a = op.forward(w_img, m)
    dl_dw = np.real(np.conj(a) * y).sum(axis=0)  # (L, R)
    D = op.ndim
    for s in range(m.shape[0]):
        for j in range(D, m.shape[1]):
            mp, mm = m.copy(), m.copy()
            mp[s, j] += h
            mm[s, j] -= h
            dw = (op.density_weights(mp) - op.density_weights(mm)) / (2 * h)
            g[s, j] = float(np.sum(dl_dw * dw))
    return g


def dc_loss_and_grad(y, op: MotionOperator, m, recon: Reconstructor, slice_mask=None, density_grad: bool = False):
    """DC loss and its gradient with respect to ``m`` (shape (b, P)).

    By default the density weights are treated as constants (each one costs
    an iterative density estimate per state and angle, which is too slow
    inside the optimisation loop); ``density_grad=True`` adds their
    contribution so the result is the full derivative of :func:`dc_loss`.
    If ``slice_mask`` is given, the gradient path through the reconstructor
    input is restricted to the voxels where the mask is nonzero.
    """
    m = np.asarray(m, dtype=float)
    norm = _l1_norm(y)
    weights = op.density_weights(m)
    wy = y * weights[None]
    z = op.adjoint(wy, m)
    xhat = recon.apply(z)
    r = op.forward(xhat, m) - y
    mag = np.abs(r)
    loss = float(mag.sum() / norm)
    u = np.where(mag > 0, r / np.where(mag > 0, mag, 1.0), 0.0) / norm
    g = op.grad_motion(xhat, m, u)
    v = op.adjoint(u, m)
    if slice_mask is not None:
        v = v * slice_mask
    w = recon.vjp(z, v)
    g = g + op.grad_motion(w, m, wy)
    if density_grad:
        g = g + _density_grad(y, op, m, w)
    return loss, g


# ------------------------------------------------------------------ optimizer


class Adam:
    def __init__(self, shape, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, params, grad, lr):
        """Return updated parameters (``params`` is not modified)."""
        grad = np.asarray(grad, dtype=float)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad**2
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        return np.asarray(params, dtype=float) - lr * mhat / (np.sqrt(vhat) + self.eps)


def adam_step(state: Adam, params, grad, lr):
    return state.step(params, grad, lr)


# ------------------------------------------------------------------ optimisation loop


@dataclass
class TraceRow:
    iteration: int
    phase: str
    loss: float


@dataclass
class _Loop:
    y: np.ndarray
    op: MotionOperator
    recon: Reconstructor
    cfg: TTTConfig
    rng: np.random.Generator
    step: int = 0
    trace: list = field(default_factory=list)

    def gradient(self, m):
        recon = self.recon
        mask = None
        if self.op.ndim == 3:
            axis = int(self.rng.integers(3))
            if isinstance(recon, SliceWise):
                recon = recon.with_axis(axis)
            mask = _slice_mask(self.op.shape, axis, self.cfg.grad_slice_count, self.rng)
        return dc_loss_and_grad(self.y, self.op, m, recon, mask)

    def run(self, m, iters, lr_fn, trainable, phase, adam=None, warmup=0):
        """Optimise rows ``trainable`` of ``m`` for ``iters`` steps."""
        m = np.array(m, dtype=float)
        adam = adam or Adam(m.shape)
        active = np.zeros(m.shape, dtype=bool)
        active[list(trainable)] = True
        D = self.op.ndim
        for it in range(iters):
            loss, g = self.gradient(m)
            self.trace.append(TraceRow(len(self.trace), phase, loss))
            mask = active.copy()
            if it < warmup:
                mask[:, :D] = False
            new = adam.step(m, np.where(mask, g, 0.0), lr_fn(it))
            m = np.where(mask, new, m)
            bound = self.cfg.clamp_bound(self.step)
            if bound is not None:
                m = np.clip(m, -bound, bound)
            self.step += 1
        return m, adam


def _free_states(b, cfg):
    return [i for i in range(b) if not (cfg.fix_first_state and i == 0)]


def run_phase1(y, op: MotionOperator, recon: Reconstructor, cfg: TTTConfig, loop: _Loop | None = None):
    """Phase 1: one state per shot, from m = 0. Returns ``(m, trace, adam)``."""
    loop = loop or _Loop(np.asarray(y), op, recon, cfg, np.random.default_rng(cfg.seed))
    m0 = op.zero_motion()
    m, adam = loop.run(m0, cfg.phase1_iters, cfg.phase1_lr_at, _free_states(op.num_states, cfg),
                       "phase1", warmup=cfg.rot_only_warmup_steps)
    return MotionTrajectory(m, op.ndim), loop.trace, adam


def reset_and_split(m, report: DCReport, traj: SamplingTrajectory, cfg: TTTConfig, intra: bool = False):
    """Reset flagged states to the mean of their nearest unflagged neighbours.

    With ``intra`` each flagged state's lines are split, in acquisition
    order, into ``cfg.n_splits`` contiguous groups with their own states.
    Returns ``(motion, trajectory, trainable_states)``.
    """
    params = m.params if isinstance(m, MotionTrajectory) else np.asarray(m, dtype=float)
    ndim = {3: 2, 6: 3}[params.shape[1]]
    b = params.shape[0]
    flagged = set(report.flagged)
    if not flagged:
        return MotionTrajectory(params.copy(), ndim), traj, []
    unflagged = [i for i in range(b) if i not in flagged]
    if cfg.fix_first_state:
        params = params.copy()
        params[0] = 0.0  # the reference state is zero by definition
    if not unflagged:
        if not cfg.fix_first_state:
            raise ValueError("every state is flagged; nothing to anchor the reset")
        unflagged = [0]
    reset = params.copy()
    for i in sorted(flagged):
        if cfg.fix_first_state and i == 0:
            reset[i] = 0.0
            continue
        prev = [j for j in unflagged if j < i]
        nxt = [j for j in unflagged if j > i]
        anchors = ([prev[-1]] if prev else []) + ([nxt[0]] if nxt else [])
        reset[i] = np.mean(params[anchors], axis=0)
    if not intra:
        trainable = [i for i in sorted(flagged) if not (cfg.fix_first_state and i == 0)]
        return MotionTrajectory(reset, ndim), traj, trainable

    new_state = np.empty_like(traj.line_state)
    rows = []
    trainable = []
    for s in range(b):
        pos = traj.positions_of_state(s)
        if s not in flagged:
            new_state[pos] = len(rows)
            rows.append(reset[s])
            continue
        groups = [g for g in np.array_split(pos, min(cfg.n_splits, max(len(pos), 1))) if len(g)]
        for g in groups:
            idx = len(rows)
            new_state[g] = idx
            rows.append(reset[s])
            if not (cfg.fix_first_state and idx == 0):
                trainable.append(idx)
    return MotionTrajectory(np.array(rows), ndim), traj.with_states(new_state), trainable


@dataclass
class TTTResult:
    motion: MotionTrajectory
    trajectory: SamplingTrajectory
    report: DCReport
    trace: list
    phase1_motion: MotionTrajectory
    phase1_report: DCReport
    trainable: list

    def trace_csv_text(self) -> str:
        return arrays.csv_text(["iteration", "phase", "loss"], [[r.iteration, r.phase, r.loss] for r in self.trace])

    def write_trace_csv(self, path) -> None:
        arrays.write_csv(path, ["iteration", "phase", "loss"], [[r.iteration, r.phase, r.loss] for r in self.trace])


def run_full(y, op: MotionOperator, recon: Reconstructor, cfg: TTTConfig, intra: bool | None = None) -> TTTResult:
    """Three-phase estimation. ``op`` must assign one state per shot."""
    intra = cfg.intra if intra is None else intra
    y = np.asarray(y)
    rng = np.random.default_rng(cfg.seed)
    loop = _Loop(y, op, recon, cfg, rng)
    m1, _, adam = run_phase1(y, op, recon, cfg, loop)
    report1 = dc_loss_per_state(y, op, m1, recon, cfg.dc_threshold)
    if cfg.phase1_iters == 0:
        return TTTResult(m1, op.traj, report1, loop.trace, m1, report1, [])

    if not report1.flagged:
        lr_end = cfg.phase1_lr_at(cfg.phase1_iters - 1)

        def extra_lr(it):
            return lr_end / (cfg.decay_factor if it >= cfg.extra_decay_after else 1.0)

        m, _ = loop.run(m1.params, cfg.extra_iters, extra_lr, _free_states(op.num_states, cfg),
                        "extra", adam=adam)
        motion = MotionTrajectory(m, op.ndim)
        report = dc_loss_per_state(y, op, motion, recon, cfg.dc_threshold)
        return TTTResult(motion, op.traj, report, loop.trace, m1, report1, [])

    m2, traj2, trainable = reset_and_split(m1, report1, op.traj, cfg, intra)
    op2 = op.with_trajectory(traj2) if traj2 is not op.traj else op
    loop.op = op2
    m, _ = loop.run(m2.params, cfg.phase2_iters, lambda it: cfg.phase2_lr, trainable, "phase2")
    m, _ = loop.run(m, cfg.phase3_iters, lambda it: cfg.phase3_lr, _free_states(op2.num_states, cfg), "phase3")
    motion = MotionTrajectory(m, op.ndim)
    report = dc_loss_per_state(y, op2, motion, recon, cfg.dc_threshold)
    return TTTResult(motion, traj2, report, loop.trace, m1, report1, trainable)


def optimize_states(y, op: MotionOperator, m0, trainable, cfg: TTTConfig, recon: Reconstructor | None = None):
    """Phases 2 and 3 restricted to ``trainable`` states, others held fixed.

    Used when all states except a known subset are given. Returns
    ``(motion params, trace)``.
    """
    if recon is None:
        raise ValueError("a reconstructor is required")
    loop = _Loop(np.asarray(y), op, recon, cfg, np.random.default_rng(cfg.seed))
    trainable = [i for i in trainable if not (cfg.fix_first_state and i == 0)]
    m, _ = loop.run(np.asarray(m0, dtype=float), cfg.phase2_iters, lambda it: cfg.phase2_lr, trainable, "phase2")
    m, _ = loop.run(m, cfg.phase3_iters, lambda it: cfg.phase3_lr, trainable, "phase3")
    return m, loop.trace
