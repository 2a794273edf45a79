"""Shared image and geometry types plus elementary image operations.

Pixel conventions used across the whole package: row-major storage with the
origin at the top-left corner, u = column index, v = row index.  Pixel values
are floats in [0, 1] internally; 8-bit quantization happens only at the disk
boundary.  All types here are immutable after construction (their arrays are
marked read-only), so instances are safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class VTPalmError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatchError(VTPalmError):
    """Two grids that must share dimensions do not."""


def _as_readonly(arr, dtype=np.float64):
    out = np.ascontiguousarray(arr, dtype=dtype)
    out.setflags(write=False)
    return out


def _require_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite values")


@dataclass(frozen=True)
class RasterImage:
    """Multi-channel 2-D pixel grid with float channel values.

    ``data`` has shape (height, width, channels) with channels 1 or 3.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, np.newaxis]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ValueError(f"image must be (h, w) or (h, w, c) with c in {{1, 3}}, got {arr.shape}")
        _require_finite(arr, "image data")
        object.__setattr__(self, "data", _as_readonly(arr))

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel relative depth D(u, v): dimensionless, larger = closer."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"depth map must be 2-D, got shape {arr.shape}")
        _require_finite(arr, "depth values")
        if np.any(arr < 0):
            raise ValueError("depth values must be non-negative")
        object.__setattr__(self, "values", _as_readonly(arr))

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


@dataclass(frozen=True)
class SegMask:
    """Binary per-pixel target membership M(u, v)."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values)
        if arr.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            if not np.all(np.isin(arr, (0, 1))):
                raise ValueError("mask values must be 0 or 1")
            arr = arr.astype(np.uint8)
        elif not np.all(arr <= 1):
            raise ValueError("mask values must be 0 or 1")
        object.__setattr__(self, "values", _as_readonly(arr, dtype=np.uint8))

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    def count(self):
        return int(self.values.sum())


@dataclass(frozen=True)
class GradientField:
    """Per-pixel surface slopes (gu, gv) = (df/du, df/dv), dimensionless."""

    gu: np.ndarray
    gv: np.ndarray

    def __post_init__(self):
        gu = np.asarray(self.gu, dtype=np.float64)
        gv = np.asarray(self.gv, dtype=np.float64)
        if gu.ndim != 2 or gu.shape != gv.shape:
            raise DimensionMismatchError(f"gu {gu.shape} and gv {gv.shape} must be matching 2-D grids")
        _require_finite(gu, "gu")
        _require_finite(gv, "gv")
        object.__setattr__(self, "gu", _as_readonly(gu))
        object.__setattr__(self, "gv", _as_readonly(gv))

    @property
    def height(self):
        return self.gu.shape[0]

    @property
    def width(self):
        return self.gu.shape[1]


@dataclass(frozen=True)
class HeightMap:
    """Surface height z = f(u, v) in millimeters on a square pixel grid."""

    z: np.ndarray
    pixel_pitch: float = 1.0  # mm per pixel

    def __post_init__(self):
        arr = np.asarray(self.z, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"height map must be 2-D, got shape {arr.shape}")
        _require_finite(arr, "height values")
        if not (np.isfinite(self.pixel_pitch) and self.pixel_pitch > 0):
            raise ValueError("pixel_pitch must be positive and finite")
        object.__setattr__(self, "z", _as_readonly(arr))

    @property
    def height(self):
        return self.z.shape[0]

    @property
    def width(self):
        return self.z.shape[1]


def require_same_shape(a, b, what="inputs"):
    """Raise DimensionMismatchError unless the two grids line up."""
    sa = (a.height, a.width)
    sb = (b.height, b.width)
    if sa != sb:
        raise DimensionMismatchError(f"{what} differ in shape: {sa} vs {sb}")


def difference_image(a: RasterImage, b: RasterImage) -> RasterImage:
    """Per-pixel magnitude of the difference between two frames.

    Returns a single-channel image holding mean(|a - b|) over channels;
    this is the contact signature used by roughness analysis and contact
    detection.
    """
    require_same_shape(a, b, "images")
    if a.channels != b.channels:
        raise DimensionMismatchError(f"channel counts differ: {a.channels} vs {b.channels}")
    mag = np.abs(a.data - b.data).mean(axis=2)
    return RasterImage(mag)


def to_grayscale(img: RasterImage) -> RasterImage:
    """Collapse to one channel via the unweighted channel mean.

    The channels encode directional lighting rather than perceptual color,
    so no luma weighting is applied.  Single-channel input is returned as-is.
    """
    if img.channels == 1:
        return img
    return RasterImage(img.data.mean(axis=2))
