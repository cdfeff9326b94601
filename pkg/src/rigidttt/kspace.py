"""Cartesian k-space plumbing: centred FFTs, masks, shot trajectories, coils and phantoms.

Conventions
-----------
Image voxels sit at centred integer positions ``x = i - N // 2`` and k-space
samples at ``k = 2*pi*(j - N // 2) / N`` radians per sample. With these,
``fft_centered`` is the unitary transform ``X[k] = sum_x v[x] exp(-i k.x) / sqrt(N)``.

The phase-encode plane is spanned by the first two image axes. For 3D
volumes the third axis is the fully sampled read-out; for 2D images every
sampled "line" is a single k-space point.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

CENTER_BLOCK = 3

MASK_KINDS = ("interleaved-columns", "uniform-random")
ORDER_KINDS = ("interleaved", "random", "linear", "deterministic-radius")


def fft_centered(v, axes: Sequence[int] | None = None) -> np.ndarray:
    """Unitary centred DFT over ``axes`` (all axes by default)."""
    v = np.asarray(v)
    axes = _check_axes(v.ndim, axes)
    out = np.fft.fftn(np.fft.ifftshift(v, axes=axes), axes=axes, norm="ortho")
    return np.fft.fftshift(out, axes=axes)


def ifft_centered(v, axes: Sequence[int] | None = None) -> np.ndarray:
    v = np.asarray(v)
    axes = _check_axes(v.ndim, axes)
    out = np.fft.ifftn(np.fft.ifftshift(v, axes=axes), axes=axes, norm="ortho")
    return np.fft.fftshift(out, axes=axes)


def _check_axes(ndim, axes):
    if axes is None:
        return tuple(range(ndim))
    axes = tuple(int(a) for a in axes)
    for a in axes:
        if not -ndim <= a < ndim:
            raise ValueError(f"axis {a} out of range for a {ndim}-d array")
    if len({a % ndim for a in axes}) != len(axes):
        raise ValueError(f"repeated axes {axes}")
    return axes


def centered_positions(n: int) -> np.ndarray:
    return np.arange(n) - n // 2


def frequency_axis(n: int) -> np.ndarray:
    """Radian frequencies of the centred DFT bins along one axis."""
    return 2.0 * np.pi * centered_positions(n) / n


# --------------------------------------------------------------------------- masks


@dataclass(frozen=True)
class UndersamplingMask:
    grid: np.ndarray
    acceleration: float

    @property
    def shape(self):
        return self.grid.shape

    @property
    def lines(self) -> np.ndarray:
        """Flat (row-major) indices of the sampled phase-encode positions."""
        return np.flatnonzero(self.grid.ravel())

    @property
    def fraction(self) -> float:
        return float(self.grid.mean())


def center_block_lines(shape) -> np.ndarray:
    nx, ny = shape
    cx, cy = nx // 2, ny // 2
    h = CENTER_BLOCK // 2
    ix, iy = np.meshgrid(np.arange(cx - h, cx + h + 1), np.arange(cy - h, cy + h + 1), indexing="ij")
    return np.sort(np.ravel_multi_index((ix.ravel(), iy.ravel()), shape))


def make_mask(shape, R: float, kind: str = "uniform-random", seed: int = 0, center_first: bool = True) -> UndersamplingMask:
    """Undersampling mask over the phase-encode plane.

    ``uniform-random`` samples exactly ``round(n / R)`` positions, the centre
    block included. ``interleaved-columns`` keeps every R-th k_y column
    (integer R) at a seeded offset plus the centre block.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) != 2:
        raise ValueError("masks live on the 2D phase-encode plane")
    if R < 1:
        raise ValueError(f"acceleration must be >= 1, got {R}")
    n = shape[0] * shape[1]
    target = int(round(n / R))
    center = center_block_lines(shape) if center_first else np.array([], dtype=int)
    if target < max(1, len(center)) or min(shape) < CENTER_BLOCK:
        raise ValueError(f"acceleration {R} leaves {target} samples on a {shape} grid")
    rng = np.random.default_rng(seed)
    grid = np.zeros(n, dtype=bool)
    if R == 1:
        grid[:] = True
    elif kind == "uniform-random":
        grid[center] = True
        rest = np.flatnonzero(~grid)
        grid[rng.choice(rest, size=target - len(center), replace=False)] = True
    elif kind == "interleaved-columns":
        step = int(round(R))
        if not np.isclose(step, R):
            raise ValueError("interleaved-columns needs an integer acceleration")
        offset = int(rng.integers(step))
        g2 = grid.reshape(shape)
        g2[:, offset::step] = True
        grid[center] = True
    else:
        raise ValueError(f"unknown mask kind {kind!r}; expected one of {MASK_KINDS}")
    grid = grid.reshape(shape)
    frac = grid.mean()
    if abs(frac * R - 1.0) > 0.1:
        raise ValueError(f"mask fraction {frac:.4f} is outside 10% of 1/{R}")
    return UndersamplingMask(grid=grid, acceleration=float(R))


# --------------------------------------------------------------------- trajectories


@dataclass
class SamplingTrajectory:
    """Ordered shots of phase-encode lines plus the line -> motion-state map.

    ``line_state[i]`` is the state of ``lines[i]``, where ``lines`` is the
    concatenation of ``shots`` in acquisition order.
    """

    grid_shape: tuple
    shots: list
    line_state: np.ndarray = None

    def __post_init__(self):
        self.grid_shape = tuple(int(s) for s in self.grid_shape)
        self.shots = [np.asarray(s, dtype=np.int64) for s in self.shots]
        lines = self.lines
        if len(np.unique(lines)) != len(lines):
            raise ValueError("shots overlap")
        if lines.size and (lines.min() < 0 or lines.max() >= int(np.prod(self.grid_shape))):
            raise ValueError("line index outside the phase-encode grid")
        if self.line_state is None:
            self.line_state = self.shot_of_line.copy()
        self.line_state = np.asarray(self.line_state, dtype=np.int64)
        if self.line_state.shape != lines.shape:
            raise ValueError("line_state must assign every sampled line")
        used = np.unique(self.line_state)
        if used.size and not np.array_equal(used, np.arange(used.size)):
            raise ValueError("state indices must be 0..b-1 with none unused")

    @property
    def lines(self) -> np.ndarray:
        if not self.shots:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(self.shots)

    @property
    def num_lines(self) -> int:
        return int(sum(len(s) for s in self.shots))

    @property
    def num_shots(self) -> int:
        return len(self.shots)

    @property
    def num_states(self) -> int:
        return int(self.line_state.max()) + 1 if self.line_state.size else 0

    @property
    def shot_of_line(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.shots)), [len(s) for s in self.shots])

    def positions_of_state(self, state: int) -> np.ndarray:
        """Positions (in acquisition order) of the lines assigned to ``state``."""
        return np.flatnonzero(self.line_state == state)

    def positions_of_shot(self, shot: int) -> np.ndarray:
        start = sum(len(s) for s in self.shots[:shot])
        return np.arange(start, start + len(self.shots[shot]))

    def with_states(self, line_state) -> "SamplingTrajectory":
        return SamplingTrajectory(self.grid_shape, self.shots, np.asarray(line_state))

    def support_mask(self) -> np.ndarray:
        grid = np.zeros(int(np.prod(self.grid_shape)), dtype=bool)
        grid[self.lines] = True
        return grid.reshape(self.grid_shape)

    def to_json(self) -> str:
        lines = self.lines
        doc = {
            "grid_shape": list(self.grid_shape),
            "shots": [s.tolist() for s in self.shots],
            "line_to_state": {str(int(l)): int(s) for l, s in zip(lines, self.line_state)},
            "num_states": self.num_states,
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SamplingTrajectory":
        doc = json.loads(text)
        shots = doc["shots"]
        lines = np.concatenate([np.asarray(s, dtype=np.int64) for s in shots]) if shots else np.zeros(0, int)
        mapping = doc["line_to_state"]
        missing = [int(l) for l in lines if str(int(l)) not in mapping]
        if missing:
            raise ValueError(f"lines without a state: {missing[:5]}")
        states = np.array([mapping[str(int(l))] for l in lines], dtype=np.int64)
        return cls(tuple(doc["grid_shape"]), shots, states)


def make_trajectory(mask: UndersamplingMask, B: int, order: str = "interleaved", seed: int = 0,
                    center_first: bool = True) -> SamplingTrajectory:
    """Split the mask support into ``B`` shots according to ``order``.

    Lines are enumerated by flat row-major index (k_x major, k_y minor).
    """
    if B <= 0:
        raise ValueError("shot count must be positive")
    lines = mask.lines
    if B > len(lines):
        raise ValueError(f"{B} shots for {len(lines)} sampled lines")
    shape = mask.shape
    rng = np.random.default_rng(seed)
    center = np.intersect1d(center_block_lines(shape), lines) if center_first else np.zeros(0, int)
    rest = np.setdiff1d(lines, center)

    if order == "interleaved":
        shots = [list(lines[j::B]) for j in range(B)]
        if center.size:
            cset = set(center.tolist())
            shots = [[l for l in s if l not in cset] for s in shots]
            shots[0] = center.tolist() + shots[0]
        if any(len(s) == 0 for s in shots):
            raise ValueError("interleaving left an empty shot")
        return SamplingTrajectory(shape, shots)
    if order == "random":
        seq = np.concatenate([center, rng.permutation(rest)])
    elif order == "linear":
        ix, iy = np.unravel_index(lines, shape)
        seq = lines[np.lexsort((ix, iy))]
    elif order == "deterministic-radius":
        seq = np.concatenate([center, _radius_balanced_order(rest, shape)])
    else:
        raise ValueError(f"unknown order {order!r}; expected one of {ORDER_KINDS}")
    return SamplingTrajectory(shape, [np.asarray(s) for s in np.array_split(seq, B)])


def _radius_balanced_order(lines, shape) -> np.ndarray:
    """Greedy order keeping the running mean distance-to-centre at the global mean."""
    if lines.size == 0:
        return lines
    ix, iy = np.unravel_index(lines, shape)
    r = np.hypot(ix - shape[0] // 2, iy - shape[1] // 2)
    order = np.argsort(r, kind="stable")
    pool_r = list(r[order])
    pool_l = list(lines[order])
    target = r.mean()
    out, total = [], 0.0
    for n in range(1, len(lines) + 1):
        want = target * n - total
        j = int(np.searchsorted(pool_r, want))
        cands = [c for c in (j - 1, j) if 0 <= c < len(pool_r)]
        best = min(cands, key=lambda c: (abs(pool_r[c] - want), pool_l[c]))
        total += pool_r.pop(best)
        out.append(pool_l.pop(best))
    return np.asarray(out, dtype=np.int64)


def line_frequencies(shape, traj: SamplingTrajectory) -> np.ndarray:
    """Base (unrotated) k-space coordinates of every sample, shape (L, R, D).

    ``R`` is the read-out length (1 for 2D images).
    """
    shape = tuple(shape)
    ix, iy = np.unravel_index(traj.lines, shape[:2])
    kx = frequency_axis(shape[0])[ix]
    ky = frequency_axis(shape[1])[iy]
    if len(shape) == 2:
        return np.stack([kx, ky], axis=-1)[:, None, :]
    if len(shape) != 3:
        raise ValueError("images must be 2D or 3D")
    kz = frequency_axis(shape[2])
    L, R = len(kx), len(kz)
    out = np.empty((L, R, 3))
    out[..., 0] = kx[:, None]
    out[..., 1] = ky[:, None]
    out[..., 2] = kz[None, :]
    return out


def sample_lines(kspace, traj: SamplingTrajectory, ndim: int) -> np.ndarray:
    """Gather sampled lines from Cartesian k-space ``(..., *image_shape)`` -> ``(..., L, R)``."""
    kspace = np.asarray(kspace)
    lead = kspace.shape[: kspace.ndim - ndim]
    img = kspace.shape[kspace.ndim - ndim :]
    if tuple(img[:2]) != tuple(traj.grid_shape):
        raise ValueError(f"k-space plane {img[:2]} does not match trajectory grid {traj.grid_shape}")
    flat = kspace.reshape(lead + (img[0] * img[1], -1))
    return flat[..., traj.lines, :]


# ---------------------------------------------------------------------------- coils


@dataclass(frozen=True)
class CoilSensitivities:
    maps: np.ndarray

    @property
    def num_coils(self) -> int:
        return self.maps.shape[0]

    @property
    def shape(self):
        return self.maps.shape[1:]


def make_coils(shape, C: int, seed: int = 0) -> CoilSensitivities:
    """Smooth Gaussian-lobe coil maps normalised so that sum_j |S_j|^2 = 1."""
    if C < 1:
        raise ValueError("need at least one coil")
    shape = tuple(int(s) for s in shape)
    rng = np.random.default_rng(seed)
    grids = np.meshgrid(*[centered_positions(n) / max(n, 1) for n in shape], indexing="ij")
    if C == 1:
        phase = 2 * np.pi * sum(rng.uniform(-0.5, 0.5) * g for g in grids)
        return CoilSensitivities(np.exp(1j * phase)[None].astype(np.complex128))
    maps = np.empty((C,) + shape, dtype=np.complex128)
    for j in range(C):
        ang = 2 * np.pi * j / C
        cx, cy = 0.5 * np.cos(ang), 0.5 * np.sin(ang)
        d2 = (grids[0] - cx) ** 2 + (grids[1] - cy) ** 2
        mag = np.exp(-d2 / (2 * 0.35**2))
        phase = 2 * np.pi * sum(rng.uniform(-0.3, 0.3) * g for g in grids) + rng.uniform(0, 2 * np.pi)
        maps[j] = mag * np.exp(1j * phase)
    maps /= np.sqrt(np.sum(np.abs(maps) ** 2, axis=0, keepdims=True))
    return CoilSensitivities(maps)


def expand(x, coils: CoilSensitivities) -> np.ndarray:
    x = np.asarray(x)
    if x.shape != coils.shape:
        raise ValueError(f"image shape {x.shape} does not match coil grid {coils.shape}")
    return coils.maps * x[None]


def reduce(xc, coils: CoilSensitivities) -> np.ndarray:
    xc = np.asarray(xc)
    if xc.shape != coils.maps.shape:
        raise ValueError(f"coil images {xc.shape} do not match maps {coils.maps.shape}")
    return np.sum(np.conj(coils.maps) * xc, axis=0)


def expand_reduce(x, coils: CoilSensitivities, direction: str = "expand") -> np.ndarray:
    if direction == "expand":
        return expand(x, coils)
    if direction == "reduce":
        return reduce(x, coils)
    raise ValueError(f"direction must be 'expand' or 'reduce', got {direction!r}")


# ------------------------------------------------------------------------- phantoms


def subspace_basis(shape, d: int, seed: int = 0, bandwidth: float = 0.0) -> np.ndarray:
    """Random n x d basis for subspace phantoms and projector reconstructors.

    With ``bandwidth == 0`` the entries are iid N(0, 1/n). With
    ``bandwidth > 0`` each column is a random field with a flat spectrum
    inside a ball of that radius (cycles per field of view), tapered to a
    centred disc/ball; the columns are then orthonormalised.
    """
    shape = tuple(int(s) for s in shape)
    n = int(np.prod(shape))
    if not 0 < d < n:
        raise ValueError(f"need 0 < d < n, got d={d}, n={n}")
    rng = np.random.default_rng(seed)
    if bandwidth <= 0:
        return rng.normal(0.0, 1.0 / np.sqrt(n), size=(n, d))
    freqs = np.meshgrid(*[np.fft.fftfreq(s) * s for s in shape], indexing="ij")
    passband = np.sqrt(sum(f**2 for f in freqs)) <= bandwidth
    grids = np.meshgrid(*[centered_positions(s) / (s / 2.0) for s in shape], indexing="ij")
    taper = np.clip((0.8 - np.sqrt(sum(g**2 for g in grids))) / 0.15, 0.0, 1.0)
    cols = np.empty((n, d))
    for j in range(d):
        field = np.real(np.fft.ifftn(np.fft.fftn(rng.standard_normal(shape)) * passband))
        cols[:, j] = (field * taper).ravel()
    q, _ = np.linalg.qr(cols)
    return q


def make_phantom(shape, kind: str = "ellipses", params: dict | None = None, seed: int = 0) -> np.ndarray:
    """Test objects.

    ``subspace``: ``x = U c`` with ``c = g / sqrt(d)``, g iid standard
    normal; ``params`` carries ``basis`` (n x d) or ``d`` and ``bandwidth``.
    ``ellipses``: rotated ellipse indicators, magnitude in [0, 1], smooth phase.
    """
    shape = tuple(int(s) for s in shape)
    params = dict(params or {})
    rng = np.random.default_rng(seed)
    if kind == "subspace":
        U = params.get("basis")
        if U is None:
            U = subspace_basis(shape, int(params.get("d", 16)), seed=int(params.get("basis_seed", seed)),
                               bandwidth=float(params.get("bandwidth", 0.0)))
        U = np.asarray(U)
        if U.shape[0] != int(np.prod(shape)):
            raise ValueError("basis rows must equal the number of voxels")
        c = rng.standard_normal(U.shape[1]) / np.sqrt(U.shape[1])
        return (U @ c).reshape(shape).astype(np.complex128)
    if kind == "ellipses":
        return _ellipses(shape, rng, int(params.get("count", 6)))
    raise ValueError(f"unknown phantom kind {kind!r}")


def _ellipses(shape, rng, count):
    grids = np.meshgrid(*[centered_positions(n) / (n / 2.0) for n in shape], indexing="ij")
    x, y = grids[0], grids[1]
    z = grids[2] if len(shape) == 3 else 0.0
    mag = np.zeros(shape)
    specs = [(0.0, 0.0, 0.0, 0.75, 0.85, 0.0, 0.7)]
    for _ in range(count):
        specs.append((rng.uniform(-0.35, 0.35), rng.uniform(-0.35, 0.35), rng.uniform(-0.3, 0.3),
                      rng.uniform(0.08, 0.3), rng.uniform(0.08, 0.3), rng.uniform(0, np.pi),
                      rng.uniform(-0.3, 0.3)))
    for cx, cy, cz, a, b, theta, val in specs:
        ct, st = np.cos(theta), np.sin(theta)
        u = (x - cx) * ct + (y - cy) * st
        v = -(x - cx) * st + (y - cy) * ct
        inside = (u / a) ** 2 + (v / b) ** 2 + ((z - cz) / max(a, b)) ** 2 * (len(shape) == 3) <= 1.0
        mag = mag + val * inside
    mag = np.clip(mag, 0.0, 1.0)
    phase = 0.5 * np.pi * (rng.uniform(-1, 1) * x + rng.uniform(-1, 1) * y) * 0.5
    return (mag * np.exp(1j * phase)).astype(np.complex128)
