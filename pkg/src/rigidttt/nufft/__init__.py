"""Type-2 (image -> off-grid samples) and type-1 (adjoint) non-uniform FFTs.

Conventions match :mod:`rigidttt.kspace`: image coordinates are
``x = i - N//2`` and the forward transform of ``img`` at frequency ``k``
(radians per sample, any real value, wrapped into [-pi, pi)) is::

    F(img)(k) = N^{-1/2} * sum_x img[x] * exp(-i k.x)

so on the Cartesian grid it equals :func:`rigidttt.kspace.fft_centered`.
The evaluation uses Kaiser-Bessel gridding on a 2x oversampled grid with a
kernel four original-grid samples wide (eight oversampled points).

The hot interpolation/spreading loops come from a compiled extension when it
is importable; otherwise a numpy implementation is used. Setting the
environment variable ``RIGIDTTT_PURE_PYTHON=1`` forces the numpy path.
"""
from __future__ import annotations

import os
from functools import cached_property

import numpy as np
import scipy.fft as sfft

from . import _gridding_py
from ._kernel import kb_beta, kb_kernel, kb_transform

_py_backend = _gridding_py
try:
    if os.environ.get("RIGIDTTT_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure python requested")
    from . import _gridding_cy as _cy_backend
except ImportError:
    _cy_backend = None

BACKEND = "cython" if _cy_backend is not None else "numpy"
_backend = _cy_backend if _cy_backend is not None else _py_backend

DEFAULT_OVERSAMP = 2.0
DEFAULT_WIDTH = 4.0
PIPE_ITERS = 10

__all__ = [
    "BACKEND",
    "NufftPlan",
    "get_plan",
    "set_backend",
    "nufft_forward",
    "nufft_adjoint",
    "nufft_coord_grad",
    "pipe_weights",
    "wrap_coords",
]


def set_backend(name: str) -> str:
    """Switch gridding kernels to ``"cython"`` or ``"numpy"``; returns the previous name."""
    global _backend, BACKEND
    prev = BACKEND
    if name == "cython":
        if _cy_backend is None:
            raise RuntimeError("compiled gridding extension is not available")
        _backend = _cy_backend
    elif name == "numpy":
        _backend = _py_backend
    else:
        raise ValueError(f"unknown backend {name!r}")
    BACKEND = name
    return prev


def wrap_coords(coords) -> np.ndarray:
    """Map angular frequencies into [-pi, pi)."""
    c = np.asarray(coords, dtype=float)
    return np.mod(c + np.pi, 2 * np.pi) - np.pi


class NufftPlan:
    """Precomputed quantities for an image shape (1 to 3 dimensions)."""

    def __init__(self, shape, oversamp: float = DEFAULT_OVERSAMP, width: float = DEFAULT_WIDTH):
        shape = tuple(int(s) for s in shape)
        if not 1 <= len(shape) <= 3 or any(s <= 0 for s in shape):
            raise ValueError(f"NUFFT supports 1-3 positive dimensions, got {shape}")
        if oversamp < 1:
            raise ValueError("oversampling factor must be >= 1")
        self.shape = shape
        self.ndim = len(shape)
        self.oversamp = float(oversamp)
        self.width = float(width)
        self.footprint = self.oversamp * self.width
        self.beta = kb_beta(self.width, self.oversamp)
        self.grid_shape = tuple(2 * int(np.ceil(self.oversamp * n / 2)) for n in shape)
        self.n_total = int(np.prod(shape))

    def __repr__(self):
        return f"NufftPlan(shape={self.shape}, grid={self.grid_shape}, beta={self.beta:.3f})"

    @cached_property
    def positions(self):
        """Per-axis integer image coordinates ``i - N//2``."""
        return [np.arange(n) - n // 2 for n in self.shape]

    @cached_property
    def apodization(self) -> np.ndarray:
        """Separable deapodization factors (image shape)."""
        out = np.ones(())
        for x, G in zip(self.positions, self.grid_shape):
            out = np.multiply.outer(out, kb_transform(x / G, self.footprint, self.beta))
        return out

    @cached_property
    def _grid_index(self):
        return np.ix_(*[np.mod(x, G) for x, G in zip(self.positions, self.grid_shape)])

    @cached_property
    def full_grid_weight(self) -> float:
        """Raw Pipe weight a fully sampled Cartesian grid receives."""
        w = 1.0
        for n, G in zip(self.shape, self.grid_shape):
            u = ((np.arange(n) - n // 2) * (G / n))[:, None]
            wd = np.ones(n, dtype=complex)
            for _ in range(PIPE_ITERS):
                wd = wd / np.abs(self._gg1((G,), u, wd))
            w *= float(np.real(wd[n // 2]))
        return w

    def _gg1(self, grid_shape, u, w):
        g = _backend.spread(w[:, None], grid_shape, u, self.footprint, self.beta)
        return _backend.interp(g, grid_shape, u, self.footprint, self.beta)[:, 0]

    def grid_units(self, coords) -> np.ndarray:
        c = np.atleast_2d(np.asarray(coords, dtype=float))
        if c.shape[-1] != self.ndim:
            raise ValueError(f"coordinates need {self.ndim} components, got {c.shape[-1]}")
        G = np.array(self.grid_shape, dtype=float)
        return np.ascontiguousarray(wrap_coords(c) * G / (2 * np.pi))

    # -- core transforms ------------------------------------------------------
    def forward(self, img, coords) -> np.ndarray:
        img = np.asarray(img)
        D = self.ndim
        if tuple(img.shape[img.ndim - D :]) != self.shape:
            raise ValueError(f"image trailing shape {img.shape[img.ndim - D:]} != plan shape {self.shape}")
        lead = img.shape[: img.ndim - D]
        B = int(np.prod(lead)) if lead else 1
        u = self.grid_units(coords)
        pre = img.reshape((B,) + self.shape) / self.apodization
        grid = np.zeros((B,) + self.grid_shape, dtype=np.complex128)
        grid[(slice(None),) + self._grid_index] = pre
        grid = sfft.fftn(grid, axes=tuple(range(1, D + 1)), overwrite_x=True)
        flat = np.ascontiguousarray(grid.reshape(B, -1).T)
        out = _backend.interp(flat, self.grid_shape, u, self.footprint, self.beta)
        out = out.T / np.sqrt(self.n_total)
        return out.reshape(lead + (u.shape[0],))

    def adjoint(self, samples, coords, weights=None) -> np.ndarray:
        samples = np.asarray(samples, dtype=np.complex128)
        u = self.grid_units(coords)
        M = u.shape[0]
        if samples.shape[-1] != M:
            raise ValueError(f"{samples.shape[-1]} samples for {M} coordinates")
        lead = samples.shape[:-1]
        B = int(np.prod(lead)) if lead else 1
        s = samples.reshape(B, M)
        if weights is not None:
            s = s * np.asarray(weights).reshape(1, M)
        D = self.ndim
        g = _backend.spread(np.ascontiguousarray(s.T), self.grid_shape, u, self.footprint, self.beta)
        g = g.T.reshape((B,) + self.grid_shape)
        gtot = int(np.prod(self.grid_shape))
        g = sfft.ifftn(g, axes=tuple(range(1, D + 1))) * gtot
        img = g[(slice(None),) + self._grid_index] / self.apodization
        img = img / np.sqrt(self.n_total)
        return img.reshape(lead + self.shape)

    def coord_grad(self, img, coords, cotangent) -> np.ndarray:
        """Gradient of ``Re <cotangent, forward(img, coords)>`` w.r.t. ``coords``.

        Batch dimensions of ``img``/``cotangent`` are summed; returns (M, D).
        """
        img = np.asarray(img)
        cot = np.asarray(cotangent)
        D = self.ndim
        lead = img.shape[: img.ndim - D]
        moments = []
        for d in range(D):
            shp = [1] * D
            shp[d] = self.shape[d]
            xd = self.positions[d].reshape(shp)
            moments.append(-1j * xd * img)
        stacked = np.stack(moments, axis=len(lead))  # (..., D, *shape)
        vals = self.forward(stacked, coords)  # (..., D, M)
        cot_b = np.expand_dims(cot, axis=-2)
        g = np.real(np.conj(cot_b) * vals)
        g = g.reshape((-1, D, g.shape[-1])).sum(axis=0)
        return g.T

    def pipe_weights(self, coords, iters: int = PIPE_ITERS) -> np.ndarray:
        """Iterative density compensation normalised to 1 on a full Cartesian grid."""
        u = self.grid_units(coords)
        w = np.ones(u.shape[0], dtype=np.complex128)
        for _ in range(iters):
            w = w / np.abs(self._gg1(self.grid_shape, u, w))
        return np.real(w) / self.full_grid_weight


_PLANS: dict = {}


def get_plan(shape, oversamp: float = DEFAULT_OVERSAMP, width: float = DEFAULT_WIDTH) -> NufftPlan:
    key = (tuple(int(s) for s in shape), float(oversamp), float(width))
    plan = _PLANS.get(key)
    if plan is None:
        plan = _PLANS[key] = NufftPlan(*key)
    return plan


def _shape_of(img, coords):
    D = np.atleast_2d(np.asarray(coords)).shape[-1]
    return np.asarray(img).shape[-D:]


def nufft_forward(img, coords) -> np.ndarray:
    return get_plan(_shape_of(img, coords)).forward(img, coords)


def nufft_adjoint(samples, coords, shape, weights=None) -> np.ndarray:
    return get_plan(shape).adjoint(samples, coords, weights)


def nufft_coord_grad(img, coords, cotangent) -> np.ndarray:
    return get_plan(_shape_of(img, coords)).coord_grad(img, coords, cotangent)


def pipe_weights(coords, shape, iters: int = PIPE_ITERS) -> np.ndarray:
    return get_plan(shape).pipe_weights(coords, iters)


def kernel_values(s):
    """Default kernel evaluated at oversampled-grid offsets ``s`` (diagnostics)."""
    plan = NufftPlan((8,))
    return kb_kernel(s, plan.footprint, plan.beta)
