"""Reconstructors: frozen image-to-image maps used inside the data-consistency loss.

Every reconstructor exposes ``apply(x)`` and ``vjp(x, cot)``; the latter is
the gradient of ``Re <cot, apply(x)>`` with respect to ``x`` (complex
inputs are treated as pairs of real numbers).
"""
from __future__ import annotations

import json
import os
import selectors
import struct
import subprocess
import time

import numpy as np

from . import arrays


class Reconstructor:
    name = "reconstructor"
    shape: tuple | None = None
    linear = False

    def apply(self, x) -> np.ndarray:
        raise NotImplementedError

    def vjp(self, x, cot) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x):
        return self.apply(x)

    def _check(self, x):
        x = np.asarray(x)
        if self.shape is not None and x.shape != tuple(self.shape):
            raise ValueError(f"{self.name} expects shape {tuple(self.shape)}, got {x.shape}")
        return x


# ------------------------------------------------------------------ identity


class ZeroFilledIdentity(Reconstructor):
    name = "zf-identity"
    linear = True

    def apply(self, x):
        return np.array(x, dtype=np.complex128)

    def vjp(self, x, cot):
        return np.array(cot, dtype=np.complex128)


def zf_identity() -> Reconstructor:
    return ZeroFilledIdentity()


# ------------------------------------------------------------------ subspace projector


class SubspaceProjector(Reconstructor):
    """``f(x) = scale * U U^T x`` applied to real and imaginary parts alike."""

    name = "subspace-projector"
    linear = True

    def __init__(self, U, scale: float, shape=None, check_orthonormal: bool = False):
        U = np.asarray(U, dtype=float)
        if U.ndim != 2 or U.shape[0] < U.shape[1]:
            raise ValueError(f"basis must be n x d with n >= d, got {U.shape}")
        if shape is not None and int(np.prod(shape)) != U.shape[0]:
            raise ValueError(f"basis has {U.shape[0]} rows, image shape {tuple(shape)} has {int(np.prod(shape))} voxels")
        if check_orthonormal:
            err = np.max(np.abs(U.T @ U - np.eye(U.shape[1])))
            if err > 0.2:
                raise ValueError(f"basis far from orthonormal (max |U^T U - I| = {err:.3f})")
        self.U = U
        self.scale = float(scale)
        self.shape = tuple(shape) if shape is not None else None

    def apply(self, x):
        x = np.asarray(x)
        if x.size != self.U.shape[0]:
            raise ValueError(f"projector expects {self.U.shape[0]} voxels, got {x.size}")
        v = x.reshape(-1)
        out = self.scale * (self.U @ (self.U.T @ v))
        return out.reshape(x.shape).astype(np.complex128)

    def vjp(self, x, cot):
        return self.apply(cot)

    def lipschitz(self) -> float:
        s = np.linalg.norm(self.U, 2) ** 2
        return self.scale * s


def subspace_projector(U, b: int, k: int, shape=None) -> SubspaceProjector:
    """Projector with the ``n / (b k)`` gain for ``b`` blocks of ``k`` measurements."""
    U = np.asarray(U)
    if b <= 0 or k <= 0:
        raise ValueError("b and k must be positive")
    n = U.shape[0]
    return SubspaceProjector(U, n / (b * k), shape)


# ------------------------------------------------------------------ Haar wavelets


def _haar_fwd_axis(x, axis):
    a = np.take(x, np.arange(0, x.shape[axis], 2), axis=axis)
    b = np.take(x, np.arange(1, x.shape[axis], 2), axis=axis)
    return np.concatenate([(a + b) / np.sqrt(2), (a - b) / np.sqrt(2)], axis=axis)


def _haar_inv_axis(c, axis):
    h = c.shape[axis] // 2
    a = np.take(c, np.arange(h), axis=axis)
    d = np.take(c, np.arange(h, 2 * h), axis=axis)
    out = np.empty_like(c)
    idx_even = [slice(None)] * c.ndim
    idx_odd = [slice(None)] * c.ndim
    idx_even[axis] = slice(0, None, 2)
    idx_odd[axis] = slice(1, None, 2)
    out[tuple(idx_even)] = (a + d) / np.sqrt(2)
    out[tuple(idx_odd)] = (a - d) / np.sqrt(2)
    return out


def haar_forward(x, levels: int) -> np.ndarray:
    """Orthonormal separable Haar transform in Mallat layout.

    Every axis length must be divisible by ``2**levels``.
    """
    c = np.array(x, dtype=np.complex128)
    for lev in range(levels):
        sl = tuple(slice(0, n >> lev) for n in c.shape)
        block = c[sl]
        for ax in range(c.ndim):
            block = _haar_fwd_axis(block, ax)
        c[sl] = block
    return c


def haar_inverse(c, levels: int) -> np.ndarray:
    x = np.array(c, dtype=np.complex128)
    for lev in reversed(range(levels)):
        sl = tuple(slice(0, n >> lev) for n in x.shape)
        block = x[sl]
        for ax in reversed(range(x.ndim)):
            block = _haar_inv_axis(block, ax)
        x[sl] = block
    return x


def soft_threshold(c, tau: float) -> np.ndarray:
    mag = np.abs(c)
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = np.where(mag > tau, 1.0 - tau / np.where(mag > 0, mag, 1.0), 0.0)
    return c * gain


def soft_threshold_vjp(c, v, tau: float) -> np.ndarray:
    mag = np.abs(c)
    keep = mag > tau
    safe = np.where(keep, mag, 1.0)
    out = v * (1.0 - tau / safe) + tau * np.real(np.conj(c) * v) * c / safe**3
    return np.where(keep, out, 0.0)


class WaveletDenoiser(Reconstructor):
    """Haar soft-thresholding of detail coefficients (approximation kept)."""

    name = "wavelet-denoiser"

    def __init__(self, tau: float, levels: int = 3, shape=None):
        if tau < 0:
            raise ValueError("threshold must be nonnegative")
        if levels < 1:
            raise ValueError("need at least one decomposition level")
        self.tau = float(tau)
        self.levels = int(levels)
        self.shape = tuple(shape) if shape is not None else None

    def _pad(self, x):
        m = 2**self.levels
        pads = [(0, (-n) % m) for n in x.shape]
        return np.pad(x, pads), x.shape

    def _detail_mask(self, shape):
        mask = np.ones(shape, dtype=bool)
        mask[tuple(slice(0, n >> self.levels) for n in shape)] = False
        return mask

    def apply(self, x):
        x = self._check(x)
        xp, orig = self._pad(np.asarray(x, dtype=np.complex128))
        c = haar_forward(xp, self.levels)
        mask = self._detail_mask(c.shape)
        c[mask] = soft_threshold(c[mask], self.tau)
        out = haar_inverse(c, self.levels)
        return out[tuple(slice(0, n) for n in orig)]

    def vjp(self, x, cot):
        x = self._check(x)
        xp, orig = self._pad(np.asarray(x, dtype=np.complex128))
        vp, _ = self._pad(np.asarray(cot, dtype=np.complex128))
        c = haar_forward(xp, self.levels)
        # the Haar transform is orthonormal: its adjoint is the inverse
        g = haar_forward(vp, self.levels)
        mask = self._detail_mask(c.shape)
        g[mask] = soft_threshold_vjp(c[mask], g[mask], self.tau)
        out = haar_inverse(g, self.levels)
        return out[tuple(slice(0, n) for n in orig)]


def wavelet_denoiser(tau: float, levels: int = 3, shape=None) -> WaveletDenoiser:
    return WaveletDenoiser(tau, levels, shape)


# ------------------------------------------------------------------ slice-wise application


class SliceWise(Reconstructor):
    """Apply a 2D reconstructor to every slice of a 3D volume along ``axis``."""

    def __init__(self, inner: Reconstructor, axis: int = 0):
        if axis not in (0, 1, 2):
            raise ValueError("axis must be 0, 1 or 2")
        self.inner = inner
        self.axis = axis
        self.name = f"slicewise({inner.name}, axis={axis})"
        self.linear = inner.linear

    def with_axis(self, axis: int) -> "SliceWise":
        return SliceWise(self.inner, axis)

    def apply(self, x):
        x = np.asarray(x)
        if x.ndim != 3:
            raise ValueError("slice-wise application needs a 3D volume")
        xs = np.moveaxis(x, self.axis, 0)
        out = np.stack([self.inner.apply(s) for s in xs])
        return np.moveaxis(out, 0, self.axis)

    def vjp(self, x, cot):
        xs = np.moveaxis(np.asarray(x), self.axis, 0)
        cs = np.moveaxis(np.asarray(cot), self.axis, 0)
        out = np.stack([self.inner.vjp(s, c) for s, c in zip(xs, cs)])
        return np.moveaxis(out, 0, self.axis)


# ------------------------------------------------------------------ external process bridge


class ExternalReconstructorError(RuntimeError):
    pass


class ExternalStartupError(ExternalReconstructorError):
    pass


class ExternalExitedError(ExternalReconstructorError):
    pass


class ExternalTruncatedError(ExternalReconstructorError):
    pass


class ExternalShapeError(ExternalReconstructorError):
    pass


class ExternalTimeoutError(ExternalReconstructorError):
    pass


class NotDifferentiableError(ExternalReconstructorError):
    pass


PROTOCOL_VERSION = 1


class ExternalReconstructor(Reconstructor):
    """Reconstructor served by a child process over stdin/stdout.

    Handshake: the parent writes ``{"proto": 1, "shape": [...]}`` plus a
    newline; the child answers ``{"ok": true}`` plus a newline. Each apply
    then sends one frame (``uint32`` little-endian length + MTTT-ARRAY
    bytes) and reads one frame back. The child is not differentiable; with
    ``straight_through=True`` the vector-Jacobian product is the identity.
    """

    name = "external"

    def __init__(self, command, shape, proto: int = PROTOCOL_VERSION, timeout: float = 30.0,
                 straight_through: bool = False):
        self.command = list(command)
        self.shape = tuple(int(s) for s in shape)
        self.timeout = float(timeout)
        self.straight_through = straight_through
        self.proto = proto
        try:
            self.proc = subprocess.Popen(self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE)
        except OSError as exc:
            raise ExternalStartupError(f"cannot start {self.command}: {exc}") from exc
        hello = json.dumps({"proto": proto, "shape": list(self.shape)}) + "\n"
        try:
            self._send(hello.encode())
            line = self._read_line()
            reply = json.loads(line.decode())
        except (ExternalReconstructorError, ValueError) as exc:
            self.close()
            raise ExternalStartupError(f"handshake failed: {exc}") from exc
        if reply != {"ok": True}:
            self.close()
            raise ExternalStartupError(f"unexpected handshake reply {reply!r}")

    # -- low-level IO ----------------------------------------------------
    def _send(self, data: bytes):
        try:
            self.proc.stdin.write(data)
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            self._reap()
            raise ExternalExitedError(f"child closed its input: {exc}") from exc

    def _read_exact(self, n: int, what: str) -> bytes:
        fd = self.proc.stdout.fileno()
        buf = bytearray()
        deadline = time.monotonic() + self.timeout
        with selectors.DefaultSelector() as sel:
            sel.register(fd, selectors.EVENT_READ)
            while len(buf) < n:
                left = deadline - time.monotonic()
                if left <= 0 or not sel.select(left):
                    self.close()
                    raise ExternalTimeoutError(f"no {what} within {self.timeout} s")
                chunk = os.read(fd, n - len(buf))
                if not chunk:
                    self._reap()
                    if buf:
                        raise ExternalTruncatedError(f"child exited after {len(buf)} of {n} {what} bytes")
                    raise ExternalExitedError(f"child exited (status {self.proc.returncode}) before sending {what}")
                buf.extend(chunk)
        return bytes(buf)

    def _read_line(self) -> bytes:
        out = bytearray()
        while not out.endswith(b"\n"):
            out.extend(self._read_exact(1, "handshake"))
            if len(out) > 65536:
                raise ExternalStartupError("handshake line too long")
        return bytes(out)

    def _reap(self):
        try:
            self.proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            self.proc.kill()
            self.proc.wait()

    # -- public API ------------------------------------------------------
    def apply(self, x):
        x = self._check(x)
        if self.proc.poll() is not None:
            raise ExternalExitedError(f"child already exited with status {self.proc.returncode}")
        payload = arrays.dumps_array(x)
        self._send(struct.pack("<I", len(payload)) + payload)
        (n,) = struct.unpack("<I", self._read_exact(4, "frame length"))
        body = self._read_exact(n, "frame")
        try:
            out, _ = arrays.loads_array(body)
        except arrays.ArrayFormatError as exc:
            raise ExternalTruncatedError(f"malformed frame from child: {exc}") from exc
        if out.shape != self.shape:
            raise ExternalShapeError(f"child returned shape {out.shape}, expected {self.shape}")
        return out

    def vjp(self, x, cot):
        if not self.straight_through:
            raise NotDifferentiableError("external reconstructors provide no gradients")
        return np.asarray(cot, dtype=np.complex128)

    def close(self):
        if self.proc.poll() is None:
            try:
                self.proc.stdin.close()
            except OSError:
                pass
            try:
                self.proc.wait(timeout=2)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass


def external_reconstructor(command, shape, proto: int = PROTOCOL_VERSION, timeout: float = 30.0,
                           straight_through: bool = False) -> ExternalReconstructor:
    return ExternalReconstructor(command, shape, proto, timeout, straight_through)


def serve_echo(stdin=None, stdout=None) -> None:
    """Minimal child implementation: handshake, then echo every frame back."""
    import sys

    stdin = stdin or sys.stdin.buffer
    stdout = stdout or sys.stdout.buffer
    line = stdin.readline()
    if not line:
        return
    json.loads(line.decode())
    stdout.write(b'{"ok": true}\n')
    stdout.flush()
    while True:
        head = stdin.read(4)
        if len(head) < 4:
            return
        (n,) = struct.unpack("<I", head)
        body = stdin.read(n)
        stdout.write(head + body)
        stdout.flush()
