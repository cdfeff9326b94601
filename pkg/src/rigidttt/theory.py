"""Random-subspace model of test-time motion estimation with circular shifts.

A signal ``x = U c`` lives in a random ``d``-dimensional subspace of R^n.
It is measured in ``b`` blocks; block ``l`` observes the unitary DFT of
``x`` on a random frequency set ``T_l`` after an unknown circular shift
``m*_l``::

    y_l[j] = exp(i 2 pi m*_l j / n) * (F x)[j],   j in T_l

(a shift ``s`` corresponds to ``np.roll(x, -s)``). For candidate shifts
``m`` the loss is::

    L(m) = || D_m F_T f(F_T^* D_m^* y) - y ||^2,   f(z) = (n / (b k)) U U^T z

with the blocks stacked (a frequency in several blocks contributes one row
per block).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import arrays


@dataclass
class SubspaceModel:
    n: int
    d: int
    b: int
    k: int
    U: np.ndarray
    c: np.ndarray
    m_star: np.ndarray
    blocks: list

    @property
    def x(self) -> np.ndarray:
        return self.U @ self.c

    @property
    def gain(self) -> float:
        return self.n / (self.b * self.k)

    def reconstruct(self, z) -> np.ndarray:
        return self.gain * (self.U @ (self.U.T @ z))


def draw_model(n: int, k: int, d: int, b: int, seed: int = 0, m_star=None) -> SubspaceModel:
    """Draw ``U`` (iid N(0, 1/n)), ``c`` (iid N(0, 1/d)), blocks and shifts.

    Each frequency joins each block independently with probability ``k/n``.
    ``m_star`` defaults to uniform random shifts in ``0..n-1``.
    """
    if not (0 < d < n and 0 < k <= n and b > 0):
        raise ValueError(f"invalid model sizes n={n}, k={k}, d={d}, b={b}")
    rng = np.random.default_rng(seed)
    U = rng.normal(0.0, 1.0 / np.sqrt(n), size=(n, d))
    c = rng.standard_normal(d) / np.sqrt(d)
    blocks = [np.flatnonzero(rng.random(n) < k / n) for _ in range(b)]
    if m_star is None:
        m_star = rng.integers(0, n, size=b)
    m_star = np.asarray(m_star, dtype=np.int64) % n
    if m_star.shape != (b,):
        raise ValueError(f"need {b} shifts")
    return SubspaceModel(n, d, b, k, U, c, m_star, blocks)


def _phases(n, shift, idx):
    return np.exp(2j * np.pi * shift * idx / n)


def simulate_measurements(model: SubspaceModel) -> list:
    fx = np.fft.fft(model.x, norm="ortho")
    return [_phases(model.n, s, T) * fx[T] for s, T in zip(model.m_star, model.blocks)]


def theory_loss(model: SubspaceModel, y, m) -> float:
    m = np.asarray(m, dtype=np.int64)
    if m.shape != (model.b,):
        raise ValueError(f"need {model.b} shifts")
    n = model.n
    spec = np.zeros(n, dtype=np.complex128)
    for s, T, yl in zip(m, model.blocks, y):
        np.add.at(spec, T, np.conj(_phases(n, s, T)) * yl)
    z = np.fft.ifft(spec, norm="ortho")
    fz = np.fft.fft(model.reconstruct(z), norm="ortho")
    loss = 0.0
    for s, T, yl in zip(m, model.blocks, y):
        loss += float(np.sum(np.abs(_phases(n, s, T) * fz[T] - yl) ** 2))
    return loss


def off_true(model: SubspaceModel, a: int, offset: int | None = None, first: int = 1) -> np.ndarray:
    """Shifts with components ``first .. first+a-1`` moved to ``m* + offset`` (default n/4)."""
    if not 0 <= a <= model.b - first:
        raise ValueError(f"a must lie in 0..{model.b - first}")
    offset = model.n // 4 if offset is None else offset
    m = model.m_star.copy()
    m[first : first + a] = (m[first : first + a] + offset) % model.n
    return m


@dataclass
class LandscapeSweep:
    a: int
    shifts: np.ndarray
    losses: np.ndarray

    @property
    def argmin(self) -> int:
        return int(self.shifts[int(np.argmin(self.losses))])


def sweep_landscape(model: SubspaceModel, y, grid, a: int, offset: int | None = None) -> LandscapeSweep:
    """Loss as a function of the first shift (relative to ``m*_1``), ``a`` others off-true."""
    if a > model.b - 1:
        raise ValueError("a must be at most b - 1")
    base = off_true(model, a, offset)
    grid = np.asarray(list(grid), dtype=np.int64)
    losses = np.empty(len(grid))
    for i, g in enumerate(grid):
        m = base.copy()
        m[0] = (model.m_star[0] + g) % model.n
        losses[i] = theory_loss(model, y, m)
    return LandscapeSweep(a, grid, losses)


def landscape_rows(sweeps) -> tuple[list, list]:
    """CSV header and rows: ``m1, loss_a0, ..., loss_a{b-1}``."""
    sweeps = sorted(sweeps, key=lambda s: s.a)
    grid = sweeps[0].shifts
    for s in sweeps:
        if not np.array_equal(s.shifts, grid):
            raise ValueError("sweeps must share one grid")
    header = ["m1"] + [f"loss_a{s.a}" for s in sweeps]
    rows = [[int(g)] + [float(s.losses[i]) for s in sweeps] for i, g in enumerate(grid)]
    return header, rows


def write_landscape_csv(path, sweeps) -> None:
    header, rows = landscape_rows(sweeps)
    arrays.write_csv(path, header, rows)


def landscape_experiment(n=2800, k=1400, d=100, b=4, draws=20, half_width=40, seed=0):
    """Average Fig.-style landscapes over model draws with ``m* = 0``.

    Returns ``(grid, mean_losses (b, len(grid)), per_draw (draws, b, len(grid)))``.
    """
    grid = np.arange(-half_width, half_width + 1)
    per = np.empty((draws, b, len(grid)))
    for t in range(draws):
        model = draw_model(n, k, d, b, seed=seed + t, m_star=np.zeros(b, dtype=np.int64))
        y = simulate_measurements(model)
        for a in range(b):
            per[t, a] = sweep_landscape(model, y, grid, a).losses
    return grid, per.mean(axis=0), per


def upper_bound_at_truth(model: SubspaceModel) -> float:
    """``12 sqrt(d/(bk)) (bk/n)``: high-probability bound on ``L(m*)``."""
    bk = model.b * model.k
    return 12.0 * np.sqrt(model.d / bk) * bk / model.n


def theorem1_check(model: SubspaceModel, y, c_diag: float = 1.0, n_random: int = 20, seed: int = 0) -> dict:
    """Empirical check of the separation ``L(m) > L(m*)``.

    Sweeps the first shift exhaustively (others at the truth) and evaluates
    ``n_random`` random shift vectors. For each sampled ``m`` the report
    lists ``a(m)`` (number of wrong components), ``(1 - a/b)^2`` and the two
    bound terms with constant ``c_diag``; these are diagnostic only.
    """
    rng = np.random.default_rng(seed)
    n, b, d, k = model.n, model.b, model.d, model.k
    l_star = theory_loss(model, y, model.m_star)
    term1 = c_diag * b**2 * np.log(n) ** 2 * (b + d) / n * n**2 / (k**2 * b**2)
    term2 = c_diag * np.sqrt(d / (b * k))
    sweep = np.empty(n)
    for s in range(n):
        m = model.m_star.copy()
        m[0] = s
        sweep[s] = theory_loss(model, y, m)
    argmin = int(np.argmin(sweep))
    samples = []
    for _ in range(n_random):
        m = rng.integers(0, n, size=b)
        a = int(np.sum(m != model.m_star))
        lm = theory_loss(model, y, m)
        samples.append({"m": m.tolist(), "a": a, "lhs": (1 - a / b) ** 2, "loss": lm,
                        "greater": bool(lm > l_star) if a > 0 else None})
    wrong = [s for s in samples if s["a"] > 0]
    others = np.delete(sweep, model.m_star[0])
    return {
        "loss_at_truth": l_star,
        "upper_bound_at_truth": upper_bound_at_truth(model),
        "bound_holds": bool(l_star <= upper_bound_at_truth(model)),
        "rhs_term1": float(term1),
        "rhs_term2": float(term2),
        "a_truth": 0,
        "lhs_truth": 1.0,
        "sweep_argmin": argmin,
        "sweep_argmin_is_truth": bool(argmin == model.m_star[0]),
        "sweep_fraction_greater": float(np.mean(others > l_star)),
        "random_samples": samples,
        "random_fraction_greater": float(np.mean([s["greater"] for s in wrong])) if wrong else 1.0,
    }
