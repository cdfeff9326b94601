"""Rigid motion states and the motion-aware acquisition operator.

For state ``i`` with translation ``t_i`` (voxels) and rotation ``R_i``
(angles in degrees), coil ``j`` acquires at base frequency ``k``::

    y_j(k) = exp(-i k . t_i) * N[ S_j x ](R_i^T k)

where ``N`` is the NUFFT of :mod:`rigidttt.nufft`. This is the spectrum of
the coil image rotated about the volume centre and then circularly
translated by ``t_i`` (a positive ``t`` matches ``np.roll(x, +t)``).

Parameters of a trajectory are stored as an array of shape ``(b, P)``:
``[t_0, t_1, phi]`` in 2D (``P = 3``) and ``[t_0, t_1, t_2, phi_0, phi_1,
phi_2]`` in 3D (``P = 6``). 3D rotations are extrinsic about axes 0, 1, 2
in that order: ``R = Rz(phi_2) @ Ry(phi_1) @ Rx(phi_0)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import arrays
from .kspace import CoilSensitivities, SamplingTrajectory, line_frequencies
from .nufft import get_plan

DEG = np.pi / 180.0


def num_params(ndim: int) -> int:
    if ndim == 2:
        return 3
    if ndim == 3:
        return 6
    raise ValueError(f"motion is defined for 2D or 3D images, got {ndim}D")


def param_names(ndim: int) -> list[str]:
    if ndim == 2:
        return ["t0", "t1", "phi"]
    return ["t0", "t1", "t2", "phi0", "phi1", "phi2"]


# ------------------------------------------------------------------ rotations


def _rot_axes(a):
    c, s = np.cos(a), np.sin(a)
    rx = np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    ry = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    rz = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    return rx, ry, rz


def _drot_axes(a):
    c, s = np.cos(a), np.sin(a)
    dx = np.array([[0, 0, 0], [0, -s, -c], [0, c, -s]])
    dy = np.array([[-s, 0, c], [0, 0, 0], [-c, 0, -s]])
    dz = np.array([[-s, -c, 0], [c, -s, 0], [0, 0, 0]])
    return dx, dy, dz


def rotation_matrix(angles_deg) -> np.ndarray:
    """Rotation for one state: a scalar angle (2D) or three angles (3D)."""
    a = np.atleast_1d(np.asarray(angles_deg, dtype=float)) * DEG
    if a.size == 1:
        c, s = np.cos(a[0]), np.sin(a[0])
        return np.array([[c, -s], [s, c]])
    if a.size != 3:
        raise ValueError("3D rotations need three angles")
    rx = _rot_axes(a[0])[0]
    ry = _rot_axes(a[1])[1]
    rz = _rot_axes(a[2])[2]
    return rz @ ry @ rx


def rotation_derivatives(angles_deg) -> list[np.ndarray]:
    """dR/dphi_i for each angle, per radian."""
    a = np.atleast_1d(np.asarray(angles_deg, dtype=float)) * DEG
    if a.size == 1:
        c, s = np.cos(a[0]), np.sin(a[0])
        return [np.array([[-s, -c], [c, -s]])]
    rx, ry, rz = _rot_axes(a[0])[0], _rot_axes(a[1])[1], _rot_axes(a[2])[2]
    dx, dy, dz = _drot_axes(a[0])[0], _drot_axes(a[1])[1], _drot_axes(a[2])[2]
    return [rz @ ry @ dx, rz @ dy @ rx, dz @ ry @ rx]


def normalize_angles(phi) -> np.ndarray:
    """Map angles (degrees) into [-180, 180)."""
    return np.mod(np.asarray(phi, dtype=float) + 180.0, 360.0) - 180.0


# ------------------------------------------------------------------ states


@dataclass(frozen=True)
class MotionState:
    t: tuple
    phi: tuple

    def __post_init__(self):
        t = tuple(float(v) for v in np.atleast_1d(self.t))
        phi = tuple(float(v) for v in np.atleast_1d(self.phi))
        if len(t) not in (2, 3) or len(phi) != (1 if len(t) == 2 else 3):
            raise ValueError("a motion state has 2 translations + 1 angle or 3 + 3")
        if not all(np.isfinite(t + phi)):
            raise ValueError("motion parameters must be finite")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "phi", phi)

    @property
    def vector(self) -> np.ndarray:
        return np.array(self.t + self.phi)


class MotionTrajectory:
    """``b`` rigid states as a ``(b, P)`` parameter array."""

    def __init__(self, params, ndim: int | None = None):
        p = np.array(params, dtype=float)
        if p.ndim != 2:
            raise ValueError("motion parameters must be a (b, P) array")
        if ndim is None:
            ndim = {3: 2, 6: 3}.get(p.shape[1])
            if ndim is None:
                raise ValueError(f"cannot infer dimensionality from {p.shape[1]} parameters")
        if p.shape[1] != num_params(ndim):
            raise ValueError(f"{ndim}D motion needs {num_params(ndim)} parameters per state")
        if not np.all(np.isfinite(p)):
            raise ValueError("motion parameters must be finite")
        self.params = p
        self.ndim = ndim

    @classmethod
    def zeros(cls, b: int, ndim: int) -> "MotionTrajectory":
        return cls(np.zeros((b, num_params(ndim))), ndim)

    @classmethod
    def from_states(cls, states) -> "MotionTrajectory":
        states = list(states)
        return cls(np.stack([s.vector for s in states]), len(states[0].t))

    @property
    def num_states(self) -> int:
        return self.params.shape[0]

    @property
    def translations(self) -> np.ndarray:
        return self.params[:, : self.ndim]

    @property
    def angles(self) -> np.ndarray:
        return self.params[:, self.ndim :]

    def state(self, i: int) -> MotionState:
        return MotionState(self.translations[i], self.angles[i])

    def normalized(self) -> "MotionTrajectory":
        p = self.params.copy()
        p[:, self.ndim :] = normalize_angles(p[:, self.ndim :])
        return MotionTrajectory(p, self.ndim)

    def to_csv(self, path) -> None:
        arrays.write_csv(path, ["state"] + param_names(self.ndim),
                         [[i] + list(row) for i, row in enumerate(self.params)])

    def csv_text(self) -> str:
        return arrays.csv_text(["state"] + param_names(self.ndim),
                               [[i] + list(row) for i, row in enumerate(self.params)])

    @classmethod
    def from_csv(cls, path) -> "MotionTrajectory":
        header, rows = arrays.read_csv(path)
        ndim = 2 if len(header) == 4 else 3
        if header != ["state"] + param_names(ndim):
            raise ValueError(f"unexpected motion CSV header {header}")
        rows = sorted(rows, key=lambda r: int(r[0]))
        return cls([[float(v) for v in r[1:]] for r in rows], ndim)

    def __eq__(self, other):
        return isinstance(other, MotionTrajectory) and np.array_equal(self.params, other.params)

    def __repr__(self):
        return f"MotionTrajectory({self.params.tolist()})"


def _as_params(m, ndim: int) -> np.ndarray:
    if isinstance(m, MotionTrajectory):
        return m.params
    p = np.asarray(m, dtype=float)
    if p.ndim != 2 or p.shape[1] != num_params(ndim):
        raise ValueError(f"motion parameters must have shape (b, {num_params(ndim)})")
    return p


# ------------------------------------------------------------------ coordinate maps


def rotate_coords(base, angles, line_state) -> np.ndarray:
    """Rotate per-line base frequencies ``(L, R, D)`` by ``R(phi_state)^T``."""
    base = np.asarray(base, dtype=float)
    line_state = np.asarray(line_state)
    if line_state.shape[0] != base.shape[0]:
        raise ValueError("every line needs a state")
    angles = np.asarray(angles, dtype=float)
    angles = angles.reshape(angles.shape[0], -1)
    if np.any(line_state < 0) or np.any(line_state >= angles.shape[0]):
        raise ValueError("line assigned to a state with no parameters")
    rots = np.stack([rotation_matrix(a) for a in angles])  # (b, D, D)
    # (R^T k)_d = sum_e R[e, d] k_e
    return np.einsum("led,lre->lrd", rots[line_state], base)


def phase_factors(base, translations, line_state, sign: int = 1) -> np.ndarray:
    """``exp(-i sign k . t_state)`` for every sample, shape (L, R)."""
    t = np.asarray(translations, dtype=float)[np.asarray(line_state)]
    return np.exp(-1j * sign * np.einsum("lrd,ld->lr", np.asarray(base, dtype=float), t))


def phase_shift(samples, base, translations, line_state, sign: int = 1) -> np.ndarray:
    """Multiply ``(..., L, R)`` samples by the translation phase of their state."""
    return np.asarray(samples) * phase_factors(base, translations, line_state, sign)


# ------------------------------------------------------------------ operator


class MotionOperator:
    """Motion-aware multi-coil acquisition ``A(m)`` for a fixed trajectory.

    Samples are stored as ``(C, L, R)``: coils, sampled lines in trajectory
    order, read-out points (1 in 2D).
    """

    def __init__(self, shape, coils: CoilSensitivities, traj: SamplingTrajectory, density: bool = True):
        self.shape = tuple(int(s) for s in shape)
        self.ndim = len(self.shape)
        num_params(self.ndim)
        if coils.shape != self.shape:
            raise ValueError(f"coil grid {coils.shape} does not match image {self.shape}")
        if tuple(traj.grid_shape) != self.shape[:2]:
            raise ValueError("trajectory grid does not match image phase-encode plane")
        self.coils = coils
        self.traj = traj
        self.density = density
        self.plan = get_plan(self.shape)
        self.base = line_frequencies(self.shape, traj)  # (L, R, D)
        self.line_state = np.asarray(traj.line_state)
        self.num_states = traj.num_states
        self._dens_key = None
        self._dens_val = None
        self._base_pipe = None

    @property
    def sample_shape(self):
        return (self.coils.num_coils,) + self.base.shape[:2]

    @property
    def num_params(self) -> int:
        return num_params(self.ndim)

    def zero_motion(self) -> np.ndarray:
        return np.zeros((self.num_states, self.num_params))

    def with_trajectory(self, traj: SamplingTrajectory) -> "MotionOperator":
        return MotionOperator(self.shape, self.coils, traj, self.density)

    def _split(self, m):
        p = _as_params(m, self.ndim)
        if p.shape[0] != self.num_states:
            raise ValueError(f"trajectory has {self.num_states} states, motion has {p.shape[0]}")
        return p[:, : self.ndim], p[:, self.ndim :]

    def coords(self, m) -> np.ndarray:
        _, ang = self._split(m)
        return rotate_coords(self.base, ang, self.line_state)

    def forward(self, x, m) -> np.ndarray:
        t, ang = self._split(m)
        x = np.asarray(x)
        if x.shape != self.shape:
            raise ValueError(f"image shape {x.shape} != {self.shape}")
        coords = rotate_coords(self.base, ang, self.line_state)
        L, R, D = coords.shape
        a = self.plan.forward(self.coils.maps * x[None], coords.reshape(-1, D))
        return a.reshape(-1, L, R) * phase_factors(self.base, t, self.line_state)

    def adjoint(self, y, m, weights=None) -> np.ndarray:
        """Exact adjoint of :meth:`forward` (optionally with per-sample weights)."""
        t, ang = self._split(m)
        y = np.asarray(y)
        if y.shape != self.sample_shape:
            raise ValueError(f"samples shape {y.shape} != {self.sample_shape}")
        coords = rotate_coords(self.base, ang, self.line_state)
        L, R, D = coords.shape
        s = y * np.conj(phase_factors(self.base, t, self.line_state))
        if weights is not None:
            s = s * np.asarray(weights).reshape(1, L, R)
        xc = self.plan.adjoint(s.reshape(s.shape[0], -1), coords.reshape(-1, D))
        return np.sum(np.conj(self.coils.maps) * xc, axis=0)

    def density_weights(self, m) -> np.ndarray:
        """Pipe weights of the rotated coordinates relative to the unrotated ones.

        Identically 1 when all angles are zero, so the uncorrected
        reconstruction is the standard zero-filled adjoint.
        """
        _, ang = self._split(m)
        L, R, D = self.base.shape
        if not self.density or not np.any(ang):
            return np.ones((L, R))
        key = ang.tobytes()
        if key != self._dens_key:
            if self._base_pipe is None:
                self._base_pipe = self.plan.pipe_weights(self.base.reshape(-1, D))
            rot = self.plan.pipe_weights(rotate_coords(self.base, ang, self.line_state).reshape(-1, D))
            self._dens_key = key
            self._dens_val = (rot / self._base_pipe).reshape(L, R)
        return self._dens_val

    def corrected_zf(self, y, m) -> np.ndarray:
        """Motion-corrected zero-filled reconstruction ``A(m)^H W(m) y``."""
        return self.adjoint(y, m, self.density_weights(m))

    def grad_motion(self, x, m, cot) -> np.ndarray:
        """Gradient of ``Re <cot, forward(x, m)>`` with respect to ``m`` (b, P).

        Angles are in degrees, so rotation entries are per degree.
        """
        t, ang = self._split(m)
        cot = np.asarray(cot)
        if cot.shape != self.sample_shape:
            raise ValueError(f"cotangent shape {cot.shape} != {self.sample_shape}")
        D = self.ndim
        b = self.num_states
        ls = self.line_state
        coords = rotate_coords(self.base, ang, self.line_state)
        L, R, _ = coords.shape
        ph = phase_factors(self.base, t, ls)
        xc = self.coils.maps * np.asarray(x)[None]
        a = self.plan.forward(xc, coords.reshape(-1, D)).reshape(-1, L, R)
        y = a * ph
        grad = np.zeros((b, self.num_params))
        # translations: d/dt_d exp(-i k.t) = -i k_d exp(-i k.t)
        base_term = np.real(np.conj(cot) * (-1j) * y).sum(axis=0)  # (L, R)
        for d in range(D):
            per_line = (base_term * self.base[..., d]).sum(axis=1)
            grad[:, d] = np.bincount(ls, weights=per_line, minlength=b)
        # rotations through the rotated coordinates
        c_rot = cot * np.conj(ph)
        gk = self.plan.coord_grad(xc, coords.reshape(-1, D), c_rot.reshape(c_rot.shape[0], -1))
        gk = gk.reshape(L, R, D)
        for s in range(b):
            sel = ls == s
            if not np.any(sel):
                continue
            ks = self.base[sel]
            gs = gk[sel]
            for i, dR in enumerate(rotation_derivatives(ang[s])):
                # d(R^T k)/dphi = dR^T k
                dk = np.einsum("ed,lre->lrd", dR, ks)
                grad[s, D + i] = np.sum(gs * dk) * DEG
        return grad


# ------------------------------------------------------------------ functional API


def forward(x, coils, traj, m, density: bool = True) -> np.ndarray:
    return MotionOperator(np.shape(x), coils, traj, density).forward(x, m)


def corrected_zf(y, coils, traj, m, density: bool = True) -> np.ndarray:
    return MotionOperator(coils.shape, coils, traj, density).corrected_zf(y, m)


def forward_grad_motion(x, coils, traj, m, cot) -> np.ndarray:
    return MotionOperator(np.shape(x), coils, traj).grad_motion(x, m, cot)
