"""Kaiser-Bessel gridding kernel and its continuous Fourier transform."""
import numpy as np
from scipy.special import i0


def kb_beta(width: float, oversamp: float) -> float:
    """Shape parameter for a kernel spanning ``width`` original-grid samples."""
    arg = width**2 * (oversamp - 0.5) ** 2 - 0.8
    if arg <= 0:
        raise ValueError(f"kernel width {width} too small for oversampling {oversamp}")
    return float(np.pi * np.sqrt(arg))


def kb_kernel(s, footprint: float, beta: float):
    """Kernel value at offset ``s`` (oversampled-grid units); zero for |s| >= footprint/2.

    The Bessel profile is shifted down by its edge value ``I0(0) = 1`` so the
    kernel is continuous at the support boundary. Otherwise interpolated
    values jump whenever a sample crosses a grid line at distance exactly
    ``footprint/2``. That happens at zero rotation, where Cartesian samples
    sit on oversampled grid points.
    """
    s = np.asarray(s, dtype=float)
    arg = 1.0 - (2.0 * s / footprint) ** 2
    out = np.zeros_like(s)
    inside = arg > 0
    out[inside] = i0(beta * np.sqrt(arg[inside])) - 1.0
    return out


def kb_transform(xi, footprint: float, beta: float):
    """Continuous Fourier transform of ``kb_kernel`` at ``xi`` cycles per grid unit."""
    xi = np.asarray(xi, dtype=float)
    z = beta**2 - (np.pi * footprint * xi) ** 2
    root = np.sqrt(np.abs(z))
    out = np.full_like(xi, footprint)
    pos = z > 1e-12
    neg = z < -1e-12
    out[pos] = footprint * np.sinh(root[pos]) / root[pos]
    out[neg] = footprint * np.sin(root[neg]) / root[neg]
    # minus the transform of the unit box removed from the profile
    return out - footprint * np.sinc(footprint * xi)
