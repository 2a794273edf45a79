"""Roughness and texture discrimination features.

Three feature families: the centered log-amplitude frequency spectrum of a
contact difference image with its high-frequency energy fraction, gray-level
co-occurrence contrast, and per-level Haar wavelet detail energies.  The
discrimination report compares two surfaces feature-by-feature, normalizing
each difference by the feature's spread over tiled sub-windows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import HeightMap, RasterImage, VTPalmError, to_grayscale


class TextureError(VTPalmError):
    pass


class DegenerateTextureError(TextureError):
    """All features have zero variance; no margin can be normalized."""


@dataclass(frozen=True)
class SpectrumReport:
    log_amplitude: np.ndarray  # log(1 + |F|), zero frequency centered
    high_freq_ratio: float  # non-DC energy fraction outside the cutoff
    cutoff_radius: float  # fraction of Nyquist


def _gray2d(img):
    if isinstance(img, RasterImage):
        return to_grayscale(img).data[:, :, 0]
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise TextureError(f"expected a single-channel image, got shape {arr.shape}")
    return arr


def amplitude_spectrum(diff, cutoff_radius: float = 0.25) -> SpectrumReport:
    """Log-amplitude spectrum of a difference image, DC shifted to center.

    ``high_freq_ratio`` is the |F|^2 energy (DC excluded) at normalized
    radial frequency above ``cutoff_radius`` of Nyquist, divided by the total
    non-DC energy; a constant image has ratio 0 by convention.
    """
    arr = _gray2d(diff)
    spec = np.fft.fft2(arr)
    amp = np.abs(spec)
    log_amp = np.fft.fftshift(np.log1p(amp))
    fx = np.fft.fftfreq(arr.shape[1])[np.newaxis, :] / 0.5  # fraction of Nyquist
    fy = np.fft.fftfreq(arr.shape[0])[:, np.newaxis] / 0.5
    radial = np.hypot(fx * np.ones_like(fy), fy * np.ones_like(fx))
    energy = amp**2
    energy[0, 0] = 0.0
    total = float(energy.sum())
    if total == 0.0:
        ratio = 0.0
    else:
        ratio = float(energy[radial > cutoff_radius].sum() / total)
    return SpectrumReport(log_amplitude=log_amp, high_freq_ratio=ratio,
                          cutoff_radius=cutoff_radius)


def glcm_contrast(img, levels: int = 32, offset=(1, 0)) -> float:
    """Contrast sum((i-j)^2 P(i,j)) of the symmetric co-occurrence matrix.

    Values in [0, 1] are quantized to ``levels`` bins; the matrix pairs each
    pixel with its neighbor at offset (du, dv) = (columns, rows) and is
    symmetrized, so opposite offsets give identical contrast.
    """
    arr = _gray2d(img)
    if levels < 2:
        raise TextureError("need at least 2 gray levels")
    du, dv = offset
    h, w = arr.shape
    if abs(du) >= w or abs(dv) >= h:
        raise TextureError(f"offset {offset} exceeds image size {(w, h)}")
    q = np.clip((np.clip(arr, 0.0, 1.0) * levels).astype(np.int64), 0, levels - 1)
    # slice both ends of the pair relationship
    if du >= 0:
        a_cols, b_cols = slice(0, w - du), slice(du, w)
    else:
        a_cols, b_cols = slice(-du, w), slice(0, w + du)
    if dv >= 0:
        a_rows, b_rows = slice(0, h - dv), slice(dv, h)
    else:
        a_rows, b_rows = slice(-dv, h), slice(0, h + dv)
    a = q[a_rows, a_cols].ravel()
    b = q[b_rows, b_cols].ravel()
    if len(a) == 0:
        raise TextureError("offset leaves no pixel pairs")
    pairs = np.bincount(a * levels + b, minlength=levels * levels).reshape(levels, levels)
    mat = pairs + pairs.T  # symmetric
    p = mat / mat.sum()
    i_idx, j_idx = np.meshgrid(np.arange(levels), np.arange(levels), indexing="ij")
    return float(np.sum((i_idx - j_idx) ** 2 * p))


def _haar_1d(x, axis):
    # Orthonormal single-level split along an even-length axis.
    n = x.shape[axis]
    even = np.take(x, np.arange(0, n, 2), axis=axis)
    odd = np.take(x, np.arange(1, n, 2), axis=axis)
    s = 1.0 / math.sqrt(2.0)
    return (even + odd) * s, (even - odd) * s


def haar2_decompose(img, levels: int = 3):
    """Multilevel 2-D orthonormal Haar transform.

    Returns (approximation, [(LH, HL, HH) per level, finest first]).  The
    transform is orthonormal, so the summed squares of all coefficients equal
    the summed squares of the pixels (Parseval).  Each dimension must divide
    by 2**levels so every level halves cleanly.
    """
    arr = _gray2d(img)
    h, w = arr.shape
    if levels < 1:
        raise TextureError("need at least one decomposition level")
    if h < 2**levels or w < 2**levels:
        raise TextureError(f"image {w}x{h} too small for {levels} levels")
    if h % (2**levels) or w % (2**levels):
        raise TextureError(
            f"dimensions {w}x{h} must be divisible by 2^levels = {2**levels}")
    details = []
    approx = arr
    for _ in range(levels):
        lo_r, hi_r = _haar_1d(approx, axis=0)
        ll, lh = _haar_1d(lo_r, axis=1)
        hl, hh = _haar_1d(hi_r, axis=1)
        details.append((lh, hl, hh))
        approx = ll
    return approx, details


def wavelet_energy(img, levels: int = 3):
    """Per-level Haar detail energies (sum of squared LH+HL+HH coefficients).

    Level 1 (first entry) holds the finest-scale details.
    """
    _, details = haar2_decompose(img, levels)
    return [float(sum(np.sum(d * d) for d in bands)) for bands in details]


@dataclass(frozen=True)
class TextureFeatures:
    wavelet_energies: tuple  # finest level first
    glcm_contrast: float


@dataclass(frozen=True)
class TextureConfig:
    wavelet_levels: int = 3
    glcm_levels: int = 32
    glcm_offset: tuple = (1, 0)
    tile_size: int = 32


@dataclass
class DiscriminationReport:
    feature_names: list
    features_a: TextureFeatures
    features_b: TextureFeatures
    abs_difference: dict  # name -> |mean_a - mean_b| over tiles
    margins: dict  # name -> normalized separation

    def best_margin(self):
        return max(self.margins.values())


def _to_unit_gray(x):
    if isinstance(x, HeightMap):
        z = x.z
        span = z.max() - z.min()
        return (z - z.min()) / span if span > 0 else np.zeros_like(z)
    return _gray2d(x)


def texture_features(x, cfg: TextureConfig = TextureConfig()) -> TextureFeatures:
    arr = _to_unit_gray(x)
    return TextureFeatures(
        wavelet_energies=tuple(wavelet_energy(arr, cfg.wavelet_levels)),
        glcm_contrast=glcm_contrast(arr, cfg.glcm_levels, cfg.glcm_offset),
    )


def _tile_features(arr, cfg):
    ts = cfg.tile_size
    if ts < 2**cfg.wavelet_levels:
        raise TextureError("tile_size too small for the wavelet depth")
    rows = arr.shape[0] // ts
    cols = arr.shape[1] // ts
    if rows * cols < 2:
        raise TextureError("inputs too small to tile for margin statistics")
    feats = []
    for r in range(rows):
        for c in range(cols):
            tile = arr[r * ts:(r + 1) * ts, c * ts:(c + 1) * ts]
            energies = wavelet_energy(tile, cfg.wavelet_levels)
            feats.append([*energies, glcm_contrast(tile, cfg.glcm_levels, cfg.glcm_offset)])
    return np.asarray(feats)


def discriminate(a, b, cfg: TextureConfig = TextureConfig()) -> DiscriminationReport:
    """Compare two surfaces (HeightMap or image) feature by feature.

    Margins are |mean_a - mean_b| / pooled tile standard deviation; a margin
    above ~2 means the tiles of the two inputs are cleanly separated on that
    feature.  A feature with zero spread and zero difference gets margin 0;
    if every feature is degenerate the inputs cannot be compared.
    """
    ga, gb = _to_unit_gray(a), _to_unit_gray(b)
    if ga.shape != gb.shape:
        raise TextureError(f"inputs differ in shape: {ga.shape} vs {gb.shape}")
    ta = _tile_features(ga, cfg)
    tb = _tile_features(gb, cfg)
    names = [f"wavelet_level_{i + 1}" for i in range(cfg.wavelet_levels)] + ["glcm_contrast"]
    diffs, margins = {}, {}
    any_alive = False
    for j, name in enumerate(names):
        diff = float(abs(ta[:, j].mean() - tb[:, j].mean()))
        pooled = math.sqrt(0.5 * (ta[:, j].var(ddof=1) + tb[:, j].var(ddof=1)))
        if pooled > 0:
            any_alive = True
            margins[name] = diff / pooled
        else:
            margins[name] = 0.0 if diff == 0.0 else float("inf")
            if diff != 0.0:
                any_alive = True
        diffs[name] = diff
    if not any_alive:
        raise DegenerateTextureError("all features have zero variance and zero difference")
    return DiscriminationReport(feature_names=names,
                                features_a=texture_features(a, cfg),
                                features_b=texture_features(b, cfg),
                                abs_difference=diffs, margins=margins)
