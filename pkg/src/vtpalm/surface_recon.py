"""Height-map reconstruction from a gradient field via an FFT Poisson solve.

The field g = (gu, gv) is integrated by solving  laplace(z) = div(g)  in the
frequency domain: divide the transformed divergence by the Laplacian symbol,
zero the null bins, and invert.  Two symbol conventions are available:

* ``"continuous"`` (default): -(kx^2 + ky^2) with kx = 2*pi*m/(M*pitch).
* ``"discrete"``: -(sin(kx*pitch)^2 + sin(ky*pitch)^2)/pitch^2, the exact
  symbol of the centered-difference divergence/gradient stencils, which makes
  solve(div(grad(z))) an identity for periodic z (up to the anchored mean).

The zero-frequency bin is always forced to zero, so reconstructions are
mean-anchored.  The solver is periodic; press fields integrate cleanly
because their gradients vanish outside the contact region.
"""

from __future__ import annotations

import numpy as np

from .core import GradientField, HeightMap, VTPalmError

CONVENTIONS = ("continuous", "discrete")


class DegenerateGridError(VTPalmError):
    """Input grid too thin for a 2-D solve."""


def divergence(g: GradientField, spacing: float = 1.0, periodic: bool = False) -> np.ndarray:
    """Divergence of a gradient field by centered differences.

    Matches the discretization of ``tactile_render.normals_from_height``:
    centered stencils in the interior, one-sided at the borders.  With
    ``periodic=True`` the borders wrap around instead, which is what
    :func:`reconstruct` uses so the whole chain is circularly shift-equivariant.
    """
    if periodic:
        dgu = (np.roll(g.gu, -1, axis=1) - np.roll(g.gu, 1, axis=1)) / (2.0 * spacing)
        dgv = (np.roll(g.gv, -1, axis=0) - np.roll(g.gv, 1, axis=0)) / (2.0 * spacing)
        return dgu + dgv
    return np.gradient(g.gu, spacing, axis=1) + np.gradient(g.gv, spacing, axis=0)


def _laplacian_symbol(shape, spacing, convention):
    h, w = shape
    kx = 2.0 * np.pi * np.fft.fftfreq(w, d=spacing)
    ky = 2.0 * np.pi * np.fft.fftfreq(h, d=spacing)
    kxg, kyg = np.meshgrid(kx, ky)
    if convention == "continuous":
        denom = -(kxg**2 + kyg**2)
    elif convention == "discrete":
        denom = -(np.sin(kxg * spacing) ** 2 + np.sin(kyg * spacing) ** 2) / spacing**2
    else:
        raise ValueError(f"unknown convention {convention!r}, expected one of {CONVENTIONS}")
    return denom


def poisson_solve(rho: np.ndarray, pixel_pitch: float = 1.0, convention: str = "continuous") -> HeightMap:
    """Solve laplace(z) = rho on a periodic grid; returns a mean-anchored map.

    Frequency bins where the Laplacian symbol vanishes (the mean, plus the
    Nyquist lines under the discrete convention) carry no recoverable
    information and are set to zero.
    """
    rho = np.asarray(rho, dtype=np.float64)
    if rho.ndim != 2 or min(rho.shape) < 2:
        raise DegenerateGridError(f"need a 2-D grid of at least 2x2, got shape {rho.shape}")
    denom = _laplacian_symbol(rho.shape, pixel_pitch, convention)
    null = np.abs(denom) < 1e-12 / pixel_pitch**2
    denom = np.where(null, 1.0, denom)
    spec = np.fft.fft2(rho) / denom
    spec[null] = 0.0
    z = np.real(np.fft.ifft2(spec))
    z = z - z.mean()
    return HeightMap(z, pixel_pitch)


def reconstruct(g: GradientField, pixel_pitch: float, convention: str = "continuous") -> HeightMap:
    """Integrate a slope field into heights (mm), mean-anchored.

    Dimensionless slopes over a grid of the given pitch produce heights in
    the same length unit as the pitch.
    """
    rho = divergence(g, pixel_pitch, periodic=True)
    return poisson_solve(rho, pixel_pitch, convention)
