"""File formats: PNG/PGM images, the VTP1 binary plane format, CSV planes.

Images are stored as lossless 8-bit PNG or binary PGM (P5); all float plane
types (DepthMap, SegMask, GradientField, HeightMap) can be persisted either
as CSV for inspection or as the compact VTP1 binary: magic bytes ``VTP1``,
u32 width, u32 height (little-endian), then one little-endian f32 payload of
width*height values per plane, row-major.
"""

from __future__ import annotations

import os
import struct

import numpy as np
from PIL import Image, UnidentifiedImageError

from .core import (
    DepthMap,
    DimensionMismatchError,
    GradientField,
    HeightMap,
    RasterImage,
    SegMask,
    VTPalmError,
)

VTP1_MAGIC = b"VTP1"


class ImageIOError(VTPalmError):
    """Base class for image read/write failures."""


class MissingFileError(ImageIOError):
    pass


class UnsupportedFormatError(ImageIOError):
    pass


class CorruptImageError(ImageIOError):
    pass


def load_image(path) -> RasterImage:
    """Read a PNG or binary PGM file into a float image in [0, 1].

    Missing files, unsupported formats, and corrupt data are reported as
    distinct error types.
    """
    path = os.fspath(path)
    if not os.path.exists(path):
        raise MissingFileError(f"no such image file: {path}")
    try:
        with Image.open(path) as im:
            if im.format not in ("PNG", "PPM"):  # Pillow reports PGM as PPM family
                raise UnsupportedFormatError(f"unsupported image format {im.format!r} in {path}")
            im.load()
            if im.mode == "L":
                arr = np.asarray(im, dtype=np.float64) / 255.0
            elif im.mode == "RGB":
                arr = np.asarray(im, dtype=np.float64) / 255.0
            elif im.mode == "RGBA":
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
            elif im.mode in ("I", "I;16"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
            elif im.mode == "P":
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
            else:
                raise UnsupportedFormatError(f"unsupported pixel mode {im.mode!r} in {path}")
    except UnidentifiedImageError as exc:
        raise UnsupportedFormatError(f"not a supported raster file: {path}") from exc
    except (OSError, SyntaxError, ValueError) as exc:
        # Pillow surfaces truncated/garbled payloads as OSError/ValueError.
        raise CorruptImageError(f"corrupt image data in {path}: {exc}") from exc
    return RasterImage(arr)


def save_image(img: RasterImage, path) -> None:
    """Write an image as lossless 8-bit PNG (or PGM for .pgm paths).

    Values are clamped to [0, 1] and quantized with round-half-away so that
    a save/load round trip is pixel-exact for already-quantized data.
    """
    path = os.fspath(path)
    q = np.clip(img.data, 0.0, 1.0)
    q = np.floor(q * 255.0 + 0.5).astype(np.uint8)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".pgm":
        if img.channels != 1:
            raise UnsupportedFormatError("PGM stores single-channel images only")
        pil = Image.fromarray(q[:, :, 0], mode="L")
    elif ext == ".png":
        pil = Image.fromarray(q[:, :, 0], mode="L") if img.channels == 1 else Image.fromarray(q, mode="RGB")
    else:
        raise UnsupportedFormatError(f"unsupported output extension {ext!r} (use .png or .pgm)")
    try:
        pil.save(path)
    except OSError as exc:
        raise ImageIOError(f"failed to write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# VTP1 binary planes


def write_vtp1(path, planes) -> None:
    """Write one or more equally-shaped 2-D float planes to a VTP1 file."""
    planes = [np.asarray(p, dtype=np.float64) for p in planes]
    if not planes:
        raise ValueError("need at least one plane")
    h, w = planes[0].shape
    for p in planes:
        if p.shape != (h, w):
            raise DimensionMismatchError(f"plane shapes differ: {(h, w)} vs {p.shape}")
    with open(os.fspath(path), "wb") as f:
        f.write(VTP1_MAGIC)
        f.write(struct.pack("<II", w, h))
        for p in planes:
            f.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def read_vtp1(path):
    """Read a VTP1 file; returns a list of float64 (height, width) planes."""
    path = os.fspath(path)
    if not os.path.exists(path):
        raise MissingFileError(f"no such file: {path}")
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != VTP1_MAGIC:
        raise UnsupportedFormatError(f"bad magic in {path}: expected VTP1")
    if len(blob) < 12:
        raise CorruptImageError(f"truncated VTP1 header in {path}")
    w, h = struct.unpack("<II", blob[4:12])
    payload = blob[12:]
    plane_bytes = w * h * 4
    if plane_bytes == 0 or len(payload) == 0 or len(payload) % plane_bytes != 0:
        raise CorruptImageError(f"VTP1 payload in {path} is not a whole number of {w}x{h} planes")
    n = len(payload) // plane_bytes
    out = []
    for i in range(n):
        flat = np.frombuffer(payload[i * plane_bytes:(i + 1) * plane_bytes], dtype="<f4")
        out.append(flat.astype(np.float64).reshape(h, w))
    return out


def save_depth_map(d: DepthMap, path):
    write_vtp1(path, [d.values])


def load_depth_map(path) -> DepthMap:
    (plane,) = _expect_planes(path, 1)
    return DepthMap(plane)


def save_seg_mask(m: SegMask, path):
    write_vtp1(path, [m.values.astype(np.float64)])


def load_seg_mask(path) -> SegMask:
    (plane,) = _expect_planes(path, 1)
    return SegMask(np.rint(plane).astype(np.uint8))


def save_gradient_field(g: GradientField, path):
    write_vtp1(path, [g.gu, g.gv])


def load_gradient_field(path) -> GradientField:
    gu, gv = _expect_planes(path, 2)
    return GradientField(gu, gv)


def save_height_map(h: HeightMap, path):
    # pixel_pitch is not part of the plane format; persist it alongside
    # (e.g. in a key=value sidecar) when it matters.
    write_vtp1(path, [h.z])


def load_height_map(path, pixel_pitch=1.0) -> HeightMap:
    (plane,) = _expect_planes(path, 1)
    return HeightMap(plane, pixel_pitch)


def _expect_planes(path, n):
    planes = read_vtp1(path)
    if len(planes) != n:
        raise CorruptImageError(f"{path}: expected {n} plane(s), found {len(planes)}")
    return planes


# ---------------------------------------------------------------------------
# CSV planes (header row: width,height; then one image row per line)


def write_plane_csv(path, planes) -> None:
    planes = [np.asarray(p, dtype=np.float64) for p in planes]
    h, w = planes[0].shape
    with open(os.fspath(path), "w", encoding="ascii") as f:
        f.write(f"{w},{h}\n")
        for p in planes:
            for row in p:
                f.write(",".join(repr(float(x)) for x in row))
                f.write("\n")


def read_plane_csv(path):
    path = os.fspath(path)
    if not os.path.exists(path):
        raise MissingFileError(f"no such file: {path}")
    with open(path, "r", encoding="ascii") as f:
        header = f.readline().strip()
        try:
            w, h = (int(tok) for tok in header.split(","))
        except ValueError as exc:
            raise CorruptImageError(f"{path}: bad CSV header {header!r}") from exc
        rows = []
        for line_no, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            vals = line.split(",")
            if len(vals) != w:
                raise CorruptImageError(f"{path}:{line_no}: expected {w} values, found {len(vals)}")
            try:
                rows.append([float(x) for x in vals])
            except ValueError as exc:
                raise CorruptImageError(f"{path}:{line_no}: non-numeric value") from exc
    if not rows or len(rows) % h != 0:
        raise CorruptImageError(f"{path}: row count {len(rows)} is not a multiple of height {h}")
    data = np.asarray(rows)
    return [data[i * h:(i + 1) * h] for i in range(len(rows) // h)]


# ---------------------------------------------------------------------------
# Plain-text key=value sidecars


def write_kv(path, mapping) -> None:
    """Write a mapping as sorted key=value lines (deterministic output)."""
    with open(os.fspath(path), "w", encoding="utf-8") as f:
        for key in sorted(mapping):
            value = mapping[key]
            f.write(f"{key}={value}\n")


def read_kv(path) -> dict:
    path = os.fspath(path)
    if not os.path.exists(path):
        raise MissingFileError(f"no such file: {path}")
    out = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise VTPalmError(f"{path}:{line_no}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out
