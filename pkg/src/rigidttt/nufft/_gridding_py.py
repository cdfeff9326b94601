"""Pure numpy gridding kernels (interpolation and its transpose, spreading).

Both operate on an oversampled grid stored as ``(Gtot, B)`` (grid flattened
row-major, batch last) and on point positions ``u`` in grid units.
"""
import numpy as np

from ._kernel import kb_kernel

_CHUNK = 4096


def _neighbours(u, grid_shape, footprint, beta):
    """Flat grid indices and kernel weights, each of shape (M, nw**D)."""
    M, D = u.shape
    nw = int(np.floor(footprint)) + 1
    half = footprint / 2.0
    flat = np.zeros((M, 1), dtype=np.int64)
    wts = np.ones((M, 1))
    for d in range(D):
        g = np.floor(u[:, d] - half)[:, None] + 1 + np.arange(nw)[None, :]
        w = kb_kernel(u[:, d][:, None] - g, footprint, beta)
        idx = np.mod(g.astype(np.int64), grid_shape[d])
        flat = (flat[:, :, None] * grid_shape[d] + idx[:, None, :]).reshape(M, -1)
        wts = (wts[:, :, None] * w[:, None, :]).reshape(M, -1)
    return flat, wts


def interp(grid, grid_shape, u, footprint, beta):
    grid = np.asarray(grid)
    M = u.shape[0]
    out = np.empty((M, grid.shape[1]), dtype=np.complex128)
    for start in range(0, M, _CHUNK):
        sl = slice(start, min(M, start + _CHUNK))
        flat, wts = _neighbours(u[sl], grid_shape, footprint, beta)
        out[sl] = np.einsum("mk,mkb->mb", wts, grid[flat])
    return out


def spread(samples, grid_shape, u, footprint, beta):
    samples = np.asarray(samples)
    M, B = samples.shape
    gtot = int(np.prod(grid_shape))
    out = np.zeros((gtot, B), dtype=np.complex128)
    for start in range(0, M, _CHUNK):
        sl = slice(start, min(M, start + _CHUNK))
        flat, wts = _neighbours(u[sl], grid_shape, footprint, beta)
        fl = flat.ravel()
        for b in range(B):
            contrib = wts * samples[sl, b][:, None]
            out[:, b] += np.bincount(fl, weights=contrib.real.ravel(), minlength=gtot)
            out[:, b] += 1j * np.bincount(fl, weights=contrib.imag.ravel(), minlength=gtot)
    return out
