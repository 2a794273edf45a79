"""Synthetic tactile-image renderer.

Stands in for the physical sensor's internal light field: height maps are
shaded under three directional lights (one per RGB channel) with a Lambertian
plus ambient model, optional per-channel gain falloff across the field, and
Gaussian pixel noise.  Also provides the height-map generators used for
end-to-end tests: spherical-press indentations and band-limited rough
surfaces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import HeightMap, RasterImage, VTPalmError


class RenderError(VTPalmError):
    pass


def _light_direction(azimuth_deg, elevation_deg):
    az = math.radians(azimuth_deg)
    el = math.radians(elevation_deg)
    # Unit vector from the surface toward the light; lights sit below the
    # membrane (negative z), same side as the camera.
    return np.array([math.cos(az) * math.cos(el), math.sin(az) * math.cos(el), -math.sin(el)])


@dataclass(frozen=True)
class LightingRig:
    """Three-light shading configuration, one direction per R/G/B channel.

    ``falloff`` linearly modulates each channel's gain by up to +-falloff
    along that light's azimuth across the field, making intensity depend on
    pixel position as well as slope.
    """

    directions: np.ndarray  # (3, 3) unit rows
    gains: np.ndarray = field(default_factory=lambda: np.full(3, 0.6))
    ambients: np.ndarray = field(default_factory=lambda: np.full(3, 0.2))
    noise_sigma: float = 0.0
    falloff: float = 0.10

    def __post_init__(self):
        dirs = np.asarray(self.directions, dtype=np.float64)
        if dirs.shape != (3, 3):
            raise RenderError(f"need three 3-vectors of light directions, got {dirs.shape}")
        norms = np.linalg.norm(dirs, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise RenderError("light directions must be unit vectors")
        gains = np.asarray(self.gains, dtype=np.float64)
        ambients = np.asarray(self.ambients, dtype=np.float64)
        if np.any(gains < 0) or np.any(ambients < 0):
            raise RenderError("gains and ambients must be non-negative")
        if np.any(ambients + gains > 1.0 + 1e-12):
            raise RenderError("ambient + gain must not exceed 1 (clipping-free linear regime)")
        if self.noise_sigma < 0:
            raise RenderError("noise_sigma must be non-negative")
        dirs.setflags(write=False)
        gains.setflags(write=False)
        ambients.setflags(write=False)
        object.__setattr__(self, "directions", dirs)
        object.__setattr__(self, "gains", gains)
        object.__setattr__(self, "ambients", ambients)


def default_rig(noise_sigma: float = 0.0, falloff: float = 0.10) -> LightingRig:
    """Rig with channel lights at azimuths 0/120/240 degrees, elevation 45."""
    dirs = np.stack([_light_direction(az, 45.0) for az in (0.0, 120.0, 240.0)])
    return LightingRig(directions=dirs, noise_sigma=noise_sigma, falloff=falloff)


def normals_from_height(h: HeightMap) -> np.ndarray:
    """Per-pixel unit normals (height, width, 3) of a height surface.

    N is the normalized (df/du, df/dv, -1) with derivatives by centered
    differences (one-sided at the borders) scaled by the pixel pitch.
    """
    gu = np.gradient(h.z, h.pixel_pitch, axis=1)
    gv = np.gradient(h.z, h.pixel_pitch, axis=0)
    n = np.stack([gu, gv, -np.ones_like(gu)], axis=-1)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def shade(normals: np.ndarray, rig: LightingRig, seed: int = 0) -> RasterImage:
    """Render an RGB frame from unit normals under the rig's lights.

    Per channel: I = clamp(ambient + gain(u, v) * max(0, n . l) + noise),
    deterministic for a given seed.
    """
    normals = np.asarray(normals, dtype=np.float64)
    if normals.ndim != 3 or normals.shape[2] != 3:
        raise RenderError(f"normals must be (h, w, 3), got {normals.shape}")
    hgt, wdt = normals.shape[:2]
    xs = np.linspace(-1.0, 1.0, wdt)[np.newaxis, :]
    ys = np.linspace(-1.0, 1.0, hgt)[:, np.newaxis]
    rng = np.random.default_rng(seed)
    img = np.empty((hgt, wdt, 3))
    for c in range(3):
        lam = np.maximum(0.0, normals @ rig.directions[c])
        gain = rig.gains[c]
        if rig.falloff != 0.0:
            dx, dy = rig.directions[c, 0], rig.directions[c, 1]
            span = max(abs(dx) + abs(dy), 1e-12)
            ramp = (xs * dx + ys * dy) / span  # in [-1, 1] across the field
            gain = gain * (1.0 + rig.falloff * ramp)
        img[:, :, c] = rig.ambients[c] + gain * lam
    if rig.noise_sigma > 0:
        img += rng.normal(0.0, rig.noise_sigma, img.shape)
    return RasterImage(np.clip(img, 0.0, 1.0))


def render_height(h: HeightMap, rig: LightingRig, seed: int = 0) -> RasterImage:
    """Shade a height map directly (normals + Lambertian in one call)."""
    return shade(normals_from_height(h), rig, seed)


def make_height_sphere_press(
    r: float,
    depth: float,
    center: tuple,
    size: tuple,
    pixel_pitch: float,
):
    """Spherical indentation pressed ``depth`` mm into a flat surface.

    ``center`` is (u0, v0) in pixels, ``size`` is (width, height) in pixels.
    Height is measured along the surface normal's +z (into the gel), so the
    dent toward the camera is negative: the apex sits at -depth with the rim
    at zero, and the slopes inside the circle are exactly the analytic
    calibration labels (u, v)/sqrt(r^2 - u^2 - v^2).  Returns (HeightMap,
    r_star) where r_star = sqrt(r^2 - (r - depth)^2) is the contact-circle
    radius in mm.
    """
    if not 0.0 < depth < r:
        raise RenderError(f"need 0 < depth < r, got depth={depth}, r={r}")
    w, h = size
    u0, v0 = center
    cap_h = r - depth
    r_star = math.sqrt(r * r - cap_h * cap_h)
    du = (np.arange(w)[np.newaxis, :] - u0) * pixel_pitch
    dv = (np.arange(h)[:, np.newaxis] - v0) * pixel_pitch
    rr = du * du + dv * dv
    inside = rr <= r_star * r_star
    sphere = np.sqrt(np.maximum(r * r - rr, 0.0))
    z = np.where(inside, cap_h - sphere, 0.0)
    return HeightMap(z, pixel_pitch), r_star


def make_height_rough(
    grit_scale: float,
    amplitude: float,
    size: tuple,
    seed: int = 0,
    pixel_pitch: float = 0.05,
) -> HeightMap:
    """Band-limited random surface emulating an abrasive texture.

    White noise is low-pass filtered with a Gaussian rolloff at cutoff
    frequency 1/grit_scale (cycles per mm) and rescaled to the requested RMS
    amplitude, so a smaller grit scale means a finer texture with more
    high-frequency energy.
    """
    if grit_scale <= 0:
        raise RenderError("grit_scale must be positive")
    w, h = size
    if amplitude == 0:
        return HeightMap(np.zeros((h, w)), pixel_pitch)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((h, w))
    fx = np.fft.fftfreq(w, d=pixel_pitch)[np.newaxis, :]
    fy = np.fft.fftfreq(h, d=pixel_pitch)[:, np.newaxis]
    f2 = fx * fx + fy * fy
    cutoff = 1.0 / grit_scale
    lowpass = np.exp(-0.5 * f2 / cutoff**2)
    z = np.real(np.fft.ifft2(np.fft.fft2(noise) * lowpass))
    z -= z.mean()
    rms = math.sqrt(np.mean(z * z))
    if rms == 0.0:
        raise RenderError("degenerate rough surface (zero variance)")
    return HeightMap(z * (amplitude / rms), pixel_pitch)


def rig_to_kv(rig: LightingRig) -> dict:
    """Flatten rig parameters into key=value sidecar entries."""
    out = {"noise_sigma": rig.noise_sigma, "falloff": rig.falloff}
    for c, name in enumerate("rgb"):
        out[f"light_{name}"] = ",".join(f"{x:.9f}" for x in rig.directions[c])
        out[f"gain_{name}"] = rig.gains[c]
        out[f"ambient_{name}"] = rig.ambients[c]
    return out
