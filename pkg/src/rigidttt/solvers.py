"""Final reconstructions given motion estimates, and the alternating baseline.

* ``l1_reconstruct``: subgradient descent on ``||A(m) x - y||^2 + lam ||H x||_1``
  (``H`` = orthonormal Haar transform) from the corrected zero-filled image,
  optionally ignoring the lines of excluded motion states.
* ``dc_layer_refine``: subgradient descent on the relative l1 data term plus a
  relative l1 proximity term to an initial reconstruction.
* ``altopt``: alternate reconstruction steps and motion gradient steps.

By default measurements are normalised to unit l2 norm and the step size is
``0.5 / sigma_max(A)^2`` from a power iteration, which makes the fixed step
counts meaningful for small test problems. ``absolute_scale=True`` instead uses
the raw measurements and the configured learning rates verbatim.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .motion import MotionOperator, MotionTrajectory
from .priors import haar_forward, haar_inverse
from .ttt import DCReport


class SolverDivergedError(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class L1Config:
    steps: int = 50
    lam: float = 1e-3
    levels: int = 3
    absolute_scale: bool = False
    lr: float = 5e7
    power_iters: int = 10

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.levels < 1:
            raise ValueError("need at least one wavelet level")


@dataclass(frozen=True)
class AltOptConfig:
    recon_steps_per_round: int = 2
    motion_steps_per_round: int = 4
    recon_lr: float = 5e7
    recon_lambda: float = 1e-4
    motion_lr: float = 5e-11
    max_iters: int = 500
    early_stop_rel: float = 1e-6
    early_stop_threshold: float | None = None
    motion_step: float = 0.01  # desk scale: first-step size and per-step cap (voxels/degrees)
    levels: int = 3
    absolute_scale: bool = False
    fix_first_state: bool = True
    power_iters: int = 10

    def __post_init__(self):
        if self.recon_steps_per_round < 0 or self.motion_steps_per_round < 0 or self.max_iters < 0:
            raise ValueError("counts must be nonnegative")
        if self.recon_lr <= 0 or self.motion_lr < 0 or self.motion_step < 0:
            raise ValueError("learning rates must be positive")


# ------------------------------------------------------------------ helpers


def _wavelet_levels(shape, levels):
    """Largest level count <= ``levels`` compatible with every axis."""
    lev = levels
    while lev > 0 and any(n % (2**lev) for n in shape):
        lev -= 1
    return lev


def _haar_pair(shape, levels):
    lev = _wavelet_levels(shape, levels)
    if lev == 0:
        return (lambda x: np.asarray(x, dtype=np.complex128)), (lambda c: np.asarray(c, dtype=np.complex128))
    return (lambda x: haar_forward(x, lev)), (lambda c: haar_inverse(c, lev))


def _csign(c):
    mag = np.abs(c)
    return np.where(mag > 0, c / np.where(mag > 0, mag, 1.0), 0.0)


def _line_keep(op: MotionOperator, excluded) -> np.ndarray:
    keep = np.ones(op.line_state.shape[0], dtype=bool)
    for s in excluded or ():
        keep &= op.line_state != int(s)
    if not keep.any():
        raise ValueError("every state is excluded; the data term is empty")
    return keep


def _power_sigma2(op: MotionOperator, m, keep, iters, seed=0):
    """Largest eigenvalue of ``A^H K A`` (K keeps the selected lines)."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(op.shape) + 1j * rng.standard_normal(op.shape)
    v /= np.linalg.norm(v)
    lam = 1.0
    kmask = keep[None, :, None]
    for _ in range(max(iters, 1)):
        w = op.adjoint(op.forward(v, m) * kmask, m)
        lam = float(np.linalg.norm(w))
        if lam == 0:
            return 1.0
        v = w / lam
    return lam


# ------------------------------------------------------------------ L1-wavelet


@dataclass
class SolverResult:
    image: np.ndarray
    trace: list = field(default_factory=list)


def l1_reconstruct(y, op: MotionOperator, m, cfg: L1Config = L1Config(), excluded=()) -> np.ndarray:
    return l1_reconstruct_traced(y, op, m, cfg, excluded).image


def l1_reconstruct_traced(y, op: MotionOperator, m, cfg: L1Config = L1Config(), excluded=()) -> SolverResult:
    m = m.params if isinstance(m, MotionTrajectory) else np.asarray(m, dtype=float)
    y = np.asarray(y)
    keep = _line_keep(op, excluded)
    kmask = keep[None, :, None]
    if cfg.absolute_scale:
        scale, lr = 1.0, cfg.lr
    else:
        scale = float(np.linalg.norm(y * kmask))
        if scale == 0:
            raise ValueError("measurements on the kept lines are identically zero")
        lr = 0.5 / _power_sigma2(op, m, keep, cfg.power_iters)
    yk = y * kmask / scale
    fwd, inv = _haar_pair(op.shape, cfg.levels)
    weights = op.density_weights(m)
    x = op.adjoint(yk * weights[None], m)

    def objective(x):
        r = (op.forward(x, m) - yk) * kmask
        return float(np.sum(np.abs(r) ** 2) + cfg.lam * np.sum(np.abs(fwd(x)))), r

    obj, r = objective(x)
    trace = [obj]
    first = obj
    for _ in range(cfg.steps):
        g = 2 * op.adjoint(r, m) + cfg.lam * inv(_csign(fwd(x)))
        x = x - lr * g
        obj, r = objective(x)
        trace.append(obj)
        if not np.isfinite(obj) or obj > 1e6 * max(first, 1e-300):
            raise SolverDivergedError(f"L1 reconstruction diverged (objective {obj:.3e})", trace)
    return SolverResult(x * scale, trace)


def threshold_and_reconstruct(y, op: MotionOperator, m, report: DCReport, cfg: L1Config = L1Config()) -> np.ndarray:
    """L1 reconstruction with the lines of flagged states removed."""
    return l1_reconstruct(y, op, m, cfg, excluded=report.flagged)


# ------------------------------------------------------------------ DC layer


def dc_layer_refine(x_init, y, op: MotionOperator, m, lam: float = 0.1, steps: int = 50,
                    rel_step: float = 1e-2, lr: float | None = None) -> SolverResult:
    """Refine ``x_init`` towards data consistency under a proximity penalty.

    Objective: ``||A x - y||_1 / ||y||_1 + lam ||x - x_init||_1 / ||x_init||_1``.
    With ``lr`` given, step ``t`` is ``lr / sqrt(t+1)`` times the
    subgradient. Otherwise steps are normalised: each moves a distance
    ``rel_step * ||x_init|| / sqrt(t+1)`` along the subgradient direction,
    which stays stable however the two terms are weighted. The best iterate
    is returned.
    """
    m = m.params if isinstance(m, MotionTrajectory) else np.asarray(m, dtype=float)
    x0 = np.asarray(x_init, dtype=np.complex128)
    y = np.asarray(y)
    ny = float(np.sum(np.abs(y)))
    nx = float(np.sum(np.abs(x0)))
    if ny == 0 or nx == 0:
        raise ValueError("measurements and initial image must be nonzero")

    def obj_grad(x):
        r = op.forward(x, m) - y
        d = x - x0
        val = float(np.sum(np.abs(r)) / ny + lam * np.sum(np.abs(d)) / nx)
        g = op.adjoint(_csign(r), m) / ny + lam * _csign(d) / nx
        return val, g

    x = x0.copy()
    val, g = obj_grad(x)
    best, best_x = val, x.copy()
    trace = [val]
    radius = rel_step * float(np.linalg.norm(x0))
    for t in range(steps):
        if lr is None:
            gn = float(np.linalg.norm(g))
            if gn == 0:
                break
            x = x - radius / np.sqrt(t + 1) / gn * g
        else:
            x = x - lr / np.sqrt(t + 1) * g
        val, g = obj_grad(x)
        trace.append(val)
        if not np.isfinite(val) or val > 1e6 * trace[0]:
            raise SolverDivergedError(f"DC layer diverged (objective {val:.3e})", trace)
        if val < best:
            best, best_x = val, x.copy()
    return SolverResult(best_x, trace)


# ------------------------------------------------------------------ alternating optimisation


@dataclass
class AltOptResult:
    motion: MotionTrajectory
    image: np.ndarray
    trace: list


def altopt(y, op: MotionOperator, cfg: AltOptConfig = AltOptConfig()) -> AltOptResult:
    """Alternate reconstruction and motion steps on the squared residual.

    The data term is the mean squared residual with absolute_scale. At desk scale
    it is the summed squared residual of unit-norm measurements (the same
    minimiser; the regulariser weight then matches ``l1_reconstruct``). The
    trace records the mean squared residual after every round.
    """
    y = np.asarray(y)
    nsamp = y.size
    m = op.zero_motion()
    scale = 1.0 if cfg.absolute_scale else float(np.linalg.norm(y))
    if scale == 0:
        raise ValueError("measurements are identically zero")
    yn = y / scale
    x = op.adjoint(yn, m)
    if cfg.max_iters == 0:
        return AltOptResult(MotionTrajectory(m, op.ndim), x * scale, [])
    fwd, inv = _haar_pair(op.shape, cfg.levels)
    norm = nsamp if cfg.absolute_scale else 1.0
    keep = np.ones(op.line_state.shape[0], dtype=bool)
    recon_lr = cfg.recon_lr if cfg.absolute_scale else 0.5 / _power_sigma2(op, m, keep, cfg.power_iters)
    free = np.ones(m.shape, dtype=bool)
    if cfg.fix_first_state:
        free[0] = False

    def residual(x, m):
        return op.forward(x, m) - yn

    r = residual(x, m)
    first = float(np.mean(np.abs(r) ** 2))
    stop = cfg.early_stop_threshold if cfg.early_stop_threshold is not None else cfg.early_stop_rel * first
    motion_lr = cfg.motion_lr if (cfg.absolute_scale or cfg.motion_lr == 0) else None
    trace = []
    for _ in range(cfg.max_iters):
        for _ in range(cfg.recon_steps_per_round):
            g = 2 * op.adjoint(r, m) / norm + cfg.recon_lambda * inv(_csign(fwd(x)))
            x = x - recon_lr * g
            r = residual(x, m)
        for _ in range(cfg.motion_steps_per_round):
            gm = op.grad_motion(x, m, 2 * r / norm)
            gm = np.where(free, gm, 0.0)
            if motion_lr is None:
                gmax = float(np.max(np.abs(gm)))
                motion_lr = cfg.motion_step / gmax if gmax > 0 else 0.0
            step = motion_lr * gm
            if not cfg.absolute_scale:
                step = np.clip(step, -cfg.motion_step, cfg.motion_step)
            m = m - step
            r = residual(x, m)
        loss = float(np.mean(np.abs(r) ** 2))
        trace.append(loss)
        if not np.isfinite(loss):
            raise SolverDivergedError("alternating optimisation diverged", trace)
        if loss < stop:
            break
    return AltOptResult(MotionTrajectory(m, op.ndim), x * scale, trace)
