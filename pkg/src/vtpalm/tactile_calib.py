"""Supervised gradient labels from sphere-press frames.

A rigid sphere of radius r pressed into the sensing surface leaves a contact
circle of radius r* with the sphere center sitting h = sqrt(r^2 - r*^2) above
the plane.  Inside the circle the surface slope at offset (u, v) mm from the
circle center is (u, v)/sqrt(r^2 - u^2 - v^2), which turns every in-circle
pixel of a press frame into one training sample (channel intensities plus
normalized position in, slope pair out).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .core import RasterImage, VTPalmError, difference_image, require_same_shape
from . import fileio


class CalibrationError(VTPalmError):
    pass


class ContactDetectionError(CalibrationError):
    """Thresholded press difference is unusable (too small or not circular)."""


class GradientDomainError(CalibrationError):
    """Point outside the clamped contact disc; the slope would blow up."""


DEFAULT_SPHERE_RADIUS_MM = 2.5
DEFAULT_CLAMP_FRACTION = 0.95
DEFAULT_DETECT_THRESHOLD = 0.08  # ~20/255, above sensor noise


def sphere_height(r: float, r_star: float) -> float:
    """Height of the sphere center above the plane, sqrt(r^2 - r*^2)."""
    if not 0.0 < r_star < r:
        raise CalibrationError(f"need 0 < r_star < r, got r_star={r_star}, r={r}")
    return math.sqrt(r * r - r_star * r_star)


def sphere_gradient(u: float, v: float, r: float, r_star: float,
                    clamp_fraction: float = DEFAULT_CLAMP_FRACTION):
    """Analytic surface slope at offset (u, v) mm from the contact center.

    Valid only inside the clamped contact disc u^2 + v^2 <=
    (clamp_fraction * r_star)^2; outside it the denominator heads toward its
    rim value and real surfaces stop looking like the ideal sphere.
    """
    if not 0.0 < r_star < r:
        raise CalibrationError(f"need 0 < r_star < r, got r_star={r_star}, r={r}")
    limit = clamp_fraction * r_star
    rho2 = u * u + v * v
    if rho2 > limit * limit * (1.0 + 1e-12):
        raise GradientDomainError(
            f"point at radius {math.sqrt(rho2):.4f} mm outside clamped disc ({limit:.4f} mm)")
    s = math.sqrt(r * r - rho2)
    return (u / s, v / s)


@dataclass(frozen=True)
class CircleDetection:
    center: tuple  # (u0, v0) pixels, sub-pixel
    radius_px: float
    support: int
    rms_residual_px: float


def _kasa_fit(us, vs):
    # Algebraic circle fit: minimize sum (u^2+v^2 + A u + B v + C)^2.
    a = np.column_stack([us, vs, np.ones_like(us)])
    b = -(us * us + vs * vs)
    coef, *_ = np.linalg.lstsq(a, b, rcond=None)
    u0, v0 = -coef[0] / 2.0, -coef[1] / 2.0
    rad2 = u0 * u0 + v0 * v0 - coef[2]
    if rad2 <= 0:
        raise ContactDetectionError("degenerate circle fit")
    return u0, v0, math.sqrt(rad2)


def detect_contact_circle(
    image: RasterImage,
    reference: RasterImage,
    threshold: float = DEFAULT_DETECT_THRESHOLD,
    min_support: int = 50,
    max_rms_residual_px: float = 3.0,
) -> CircleDetection:
    """Locate the contact circle of a press frame against its reference.

    The difference image is thresholded, cleaned with a 3x3 majority vote
    (kills salt-and-pepper flips), reduced to its largest connected
    component, hole-filled, and the outer boundary pixels are fit with an
    algebraic least-squares circle.
    """
    require_same_shape(image, reference, "press and reference frames")
    diff = difference_image(image, reference)
    support = diff.data[:, :, 0] > threshold
    if int(support.sum()) < min_support:
        raise ContactDetectionError(
            f"only {int(support.sum())} pixels above threshold {threshold} (need {min_support})")
    # 3x3 majority vote
    counts = ndimage.uniform_filter(support.astype(np.float64), size=3, mode="constant")
    cleaned = counts > 0.5
    labels, n = ndimage.label(cleaned)
    if n == 0:
        raise ContactDetectionError("no connected support after cleanup")
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, n + 1))
    blob = labels == (1 + int(np.argmax(sizes)))
    blob = ndimage.binary_fill_holes(blob)
    if int(blob.sum()) < min_support:
        raise ContactDetectionError("largest support component too small")
    interior = ndimage.binary_erosion(blob, structure=ndimage.generate_binary_structure(2, 1))
    boundary = blob & ~interior
    vs, us = np.nonzero(boundary)
    u0, v0, radius = _kasa_fit(us.astype(np.float64), vs.astype(np.float64))
    residuals = np.hypot(us - u0, vs - v0) - radius
    rms = float(np.sqrt(np.mean(residuals**2)))
    if rms > max_rms_residual_px:
        raise ContactDetectionError(
            f"support is not circular (rms residual {rms:.2f} px > {max_rms_residual_px})")
    return CircleDetection(center=(float(u0), float(v0)), radius_px=float(radius),
                           support=int(blob.sum()), rms_residual_px=rms)


@dataclass(frozen=True)
class SpherePress:
    """One calibration press with known (or detected) circle geometry."""

    image: RasterImage
    reference: RasterImage
    center: tuple  # (u0, v0) pixels
    r_star: float  # contact-circle radius, mm
    r: float  # sphere radius, mm
    pixel_pitch: float  # mm per pixel

    def __post_init__(self):
        if not 0.0 < self.r_star < self.r:
            raise CalibrationError(f"need 0 < r_star < r, got r_star={self.r_star}, r={self.r}")
        u0, v0 = self.center
        if not (0 <= u0 < self.image.width and 0 <= v0 < self.image.height):
            raise CalibrationError(f"press center {self.center} outside image bounds")
        require_same_shape(self.image, self.reference, "press and reference frames")


def press_from_frames(image, reference, r, pixel_pitch,
                      threshold=DEFAULT_DETECT_THRESHOLD) -> SpherePress:
    """Build a SpherePress by detecting the contact circle in the frames."""
    det = detect_contact_circle(image, reference, threshold)
    return SpherePress(image=image, reference=reference, center=det.center,
                       r_star=det.radius_px * pixel_pitch, r=r, pixel_pitch=pixel_pitch)


@dataclass(frozen=True)
class GradientSample:
    i_r: float
    i_g: float
    i_b: float
    u: float  # normalized column in [0, 1]
    v: float  # normalized row in [0, 1]
    g_u: float
    g_v: float


def normalized_coords(cols, rows, width, height):
    """Pixel indices -> the normalized (u, v) the regressor is fed."""
    return cols / width, rows / height


class GradientDataset:
    """Per-pixel training samples backed by flat arrays.

    ``inputs`` is (n, 5): channel intensities and normalized (u, v);
    ``labels`` is (n, 2): the slope pair.  Iteration and indexing yield
    GradientSample records; ``press_index`` tracks provenance.
    """

    def __init__(self, inputs, labels, press_index):
        self.inputs = np.asarray(inputs, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.float64)
        self.press_index = np.asarray(press_index, dtype=np.int64)
        if self.inputs.shape != (len(self.labels), 5) or self.labels.shape[1] != 2:
            raise CalibrationError("inputs must be (n, 5) and labels (n, 2)")
        if len(self.press_index) != len(self.inputs):
            raise CalibrationError("press_index length mismatch")

    def __len__(self):
        return len(self.inputs)

    def __getitem__(self, i) -> GradientSample:
        row = self.inputs[i]
        lab = self.labels[i]
        return GradientSample(row[0], row[1], row[2], row[3], row[4], lab[0], lab[1])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def save_csv(self, path):
        with open(path, "w", encoding="ascii") as f:
            f.write("i_r,i_g,i_b,u,v,g_u,g_v\n")
            for row, lab in zip(self.inputs, self.labels):
                f.write(",".join(repr(float(x)) for x in (*row, *lab)))
                f.write("\n")

    def save_vtp1(self, path):
        fileio.write_vtp1(path, [np.hstack([self.inputs, self.labels])])

    @classmethod
    def load_csv(cls, path):
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if data.shape[1] != 7:
            raise CalibrationError(f"{path}: expected 7 columns, found {data.shape[1]}")
        return cls(data[:, :5], data[:, 5:], np.zeros(len(data), dtype=np.int64))


def _press_samples(press: SpherePress, clamp_fraction):
    u0, v0 = press.center
    limit_px = clamp_fraction * press.r_star / press.pixel_pitch
    if limit_px <= 0:
        return np.empty((0, 5)), np.empty((0, 2))
    w, h = press.image.width, press.image.height
    cols, rows = np.meshgrid(np.arange(w), np.arange(h))
    inside = (cols - u0) ** 2 + (rows - v0) ** 2 <= limit_px**2
    cols, rows = cols[inside], rows[inside]
    # row-major output ordering: meshgrid indexing already scans rows then columns
    u_mm = (cols - u0) * press.pixel_pitch
    v_mm = (rows - v0) * press.pixel_pitch
    s = np.sqrt(press.r**2 - u_mm**2 - v_mm**2)
    un, vn = normalized_coords(cols, rows, w, h)
    rgb = press.image.data[rows, cols, :]
    if rgb.shape[1] == 1:
        rgb = np.repeat(rgb, 3, axis=1)
    inputs = np.column_stack([rgb[:, 0], rgb[:, 1], rgb[:, 2], un, vn])
    labels = np.column_stack([u_mm / s, v_mm / s])
    return inputs, labels


def build_dataset(presses, clamp_fraction: float = DEFAULT_CLAMP_FRACTION,
                  jobs: int = 1, skip_log: Optional[list] = None) -> GradientDataset:
    """Assemble the supervised dataset from a batch of presses.

    One sample per integer pixel inside each press's clamped contact disc,
    ordered by (press index, row, column).  Presses whose geometry is broken
    are skipped and noted in ``skip_log``; the parallel path (jobs > 1) never
    changes output ordering.
    """
    if not 0.0 <= clamp_fraction <= 1.0:
        raise CalibrationError("clamp_fraction must lie in [0, 1]")

    def one(press):
        return _press_samples(press, clamp_fraction)

    results = [None] * len(presses)
    errors = [None] * len(presses)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futs = {i: pool.submit(one, p) for i, p in enumerate(presses)}
            for i, fut in futs.items():
                try:
                    results[i] = fut.result()
                except CalibrationError as exc:
                    errors[i] = exc
    else:
        for i, press in enumerate(presses):
            try:
                results[i] = one(press)
            except CalibrationError as exc:
                errors[i] = exc

    chunks_in, chunks_lab, chunks_idx = [], [], []
    for i, (res, err) in enumerate(zip(results, errors)):
        if err is not None:
            if skip_log is not None:
                skip_log.append(f"press {i}: {err}")
            continue
        inp, lab = res
        chunks_in.append(inp)
        chunks_lab.append(lab)
        chunks_idx.append(np.full(len(inp), i, dtype=np.int64))
    if not chunks_in:
        return GradientDataset(np.empty((0, 5)), np.empty((0, 2)), np.empty(0, dtype=np.int64))
    return GradientDataset(np.concatenate(chunks_in), np.concatenate(chunks_lab),
                           np.concatenate(chunks_idx))


def load_press_manifest(path, r, pixel_pitch, threshold=DEFAULT_DETECT_THRESHOLD,
                        skip_log: Optional[list] = None):
    """Read a press manifest CSV into SpherePress records.

    Columns: image,reference[,cx_px,cy_px,r_star_px].  When the circle
    columns are empty the circle is detected from the frames.  Unreadable or
    undetectable presses are skipped with a note in ``skip_log``.
    """
    presses = []
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip().split(",")
        expected = ["image", "reference", "cx_px", "cy_px", "r_star_px"]
        if [h.strip() for h in header[:2]] != expected[:2]:
            raise CalibrationError(f"{path}: manifest header must start with image,reference")
        for line_no, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            try:
                img = fileio.load_image(parts[0])
                ref = fileio.load_image(parts[1])
                if len(parts) >= 5 and parts[2] and parts[3] and parts[4]:
                    center = (float(parts[2]), float(parts[3]))
                    r_star = float(parts[4]) * pixel_pitch
                    presses.append(SpherePress(img, ref, center, r_star, r, pixel_pitch))
                else:
                    presses.append(press_from_frames(img, ref, r, pixel_pitch, threshold))
            except (VTPalmError, ValueError) as exc:
                if skip_log is not None:
                    skip_log.append(f"{path}:{line_no}: skipped ({exc})")
    return presses
