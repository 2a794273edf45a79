"""Camera-side distance estimation.

The scene's mean relative depth over the segmented target (z_img) maps to a
metric distance (z_world, cm) through a double-exponential decay curve
y = a*exp(-b*x) + c*exp(-d*x).  Coefficients are recovered from calibration
samples by multi-start Levenberg-Marquardt with an analytic Jacobian; decay
rates stay positive by optimizing their logs.  Alternative monotone-decay
families (single exponential, inverse proportional, power law) are fitted
the same way for ranking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import least_squares

from .core import DepthMap, SegMask, VTPalmError, require_same_shape


class ProximityError(VTPalmError):
    pass


class EmptyMaskError(ProximityError):
    """Segmentation mask has no pixels; the mean depth would be 0/0."""


class InsufficientSamplesError(ProximityError):
    pass


class CsvFormatError(ProximityError):
    pass


@dataclass(frozen=True)
class DoubleExpModel:
    """y = a*exp(-b*x) + c*exp(-d*x); decay rates b, d must be positive."""

    a: float
    b: float
    c: float
    d: float

    def __post_init__(self):
        for name in ("a", "b", "c", "d"):
            if not math.isfinite(getattr(self, name)):
                raise ProximityError(f"coefficient {name} must be finite")
        if self.b <= 0 or self.d <= 0:
            raise ProximityError(f"decay rates must be positive, got b={self.b}, d={self.d}")

    def predict(self, z_img):
        z = np.asarray(z_img, dtype=np.float64)
        out = self.a * np.exp(-self.b * z) + self.c * np.exp(-self.d * z)
        return float(out) if np.isscalar(z_img) else out


# Default coefficients used by the synthetic scene generator as the ground
# truth z_img <-> distance relationship.
REFERENCE_MODEL = DoubleExpModel(a=85.9058, b=0.3754, c=1.5110e6, d=4.0941)


def predict_distance(model: DoubleExpModel, z_img: float) -> float:
    """Distance in cm for a mean relative depth value."""
    if not (math.isfinite(z_img) and z_img >= 0):
        raise ProximityError(f"z_img must be finite and non-negative, got {z_img}")
    return float(model.predict(z_img))


def mask_mean_depth(depth: DepthMap, mask: SegMask) -> float:
    """Mean depth over the segmented region (the model input z_img)."""
    require_same_shape(depth, mask, "depth and mask")
    n = mask.count()
    if n == 0:
        raise EmptyMaskError("segmentation mask is empty")
    return float(depth.values[mask.values != 0].mean())


@dataclass(frozen=True)
class CalibrationSample:
    z_img: float
    z_world: float  # cm
    speed: float = float("nan")  # cm/s provenance tag
    run_id: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.z_img) and self.z_img >= 0):
            raise ProximityError(f"z_img must be finite and non-negative, got {self.z_img}")
        if not 0.0 <= self.z_world <= 50.0:
            raise ProximityError(f"z_world must lie in [0, 50] cm, got {self.z_world}")


@dataclass(frozen=True)
class FitConfig:
    domain_min_cm: float = 10.0  # drop near-field samples below this distance
    n_starts: int = 8
    rate_low: float = 0.05
    rate_high: float = 8.0
    max_nfev: int = 4000
    tol: float = 1e-15


@dataclass
class FitReport:
    model: object  # predictor with .predict(x)
    family: str
    r_squared: float
    rmse: float
    iterations: int
    residuals: np.ndarray  # predicted - observed, cm
    converged: bool
    n_samples: int

    def save_csv(self, path):
        with open(path, "w", encoding="ascii") as f:
            f.write(f"family,{self.family}\n")
            f.write(f"r_squared,{self.r_squared!r}\n")
            f.write(f"rmse,{self.rmse!r}\n")
            f.write(f"iterations,{self.iterations}\n")
            f.write(f"converged,{int(self.converged)}\n")
            f.write(f"n_samples,{self.n_samples}\n")
            f.write("residuals," + ",".join(repr(float(r)) for r in self.residuals) + "\n")


def _finish_report(predictor, family, x, y, iterations, converged):
    pred = predictor.predict(x)
    residuals = pred - y
    ss_res = float(np.sum(residuals**2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        r2 = 1.0 if ss_res < 1e-20 else float("-inf")
    else:
        r2 = 1.0 - ss_res / ss_tot
    return FitReport(model=predictor, family=family, r_squared=r2,
                     rmse=math.sqrt(ss_res / len(y)), iterations=iterations,
                     residuals=residuals, converged=converged, n_samples=len(y))


def _filtered_xy(samples, config):
    kept = [s for s in samples if s.z_world >= config.domain_min_cm]
    x = np.array([s.z_img for s in kept], dtype=np.float64)
    y = np.array([s.z_world for s in kept], dtype=np.float64)
    return x, y


def _start_rates(config):
    return np.geomspace(config.rate_low, config.rate_high, config.n_starts)


def _lin_coeffs(basis, y):
    coef, *_ = np.linalg.lstsq(basis, y, rcond=None)
    return coef


def _multi_start_lm(residual_fn, jacobian_fn, starts, config):
    """Run LM from each start; pick the lowest SSE (ties by start index)."""
    best = None
    total_nfev = 0
    for p0 in starts:
        try:
            res = least_squares(residual_fn, p0, jac=jacobian_fn, method="lm",
                                xtol=config.tol, ftol=config.tol, gtol=config.tol,
                                max_nfev=config.max_nfev)
        except (ValueError, FloatingPointError):
            continue
        total_nfev += res.nfev
        sse = float(np.sum(res.fun**2))
        if best is None or sse < best[0]:
            best = (sse, res.x, bool(res.status > 0))
    if best is None:
        raise ProximityError("all optimizer starts failed")
    return best[1], total_nfev, best[2]


def fit_double_exp(samples, config: Optional[FitConfig] = None) -> FitReport:
    """Recover double-exponential coefficients from calibration samples.

    Requires at least 4 samples spanning at least 8 distinct z_img values
    (after restricting to the configured distance domain).  Non-convergence
    within the iteration budget is reported on the FitReport rather than
    raised, with the best parameters found so far.
    """
    config = config or FitConfig()
    x, y = _filtered_xy(samples, config)
    if len(x) < 4:
        raise InsufficientSamplesError(
            f"need at least 4 samples in the fit domain, have {len(x)}")
    if len(np.unique(x)) < 8:
        raise InsufficientSamplesError(
            f"need at least 8 distinct z_img values for a well-posed fit, have {len(np.unique(x))}")

    def resid(p):
        a, c, lb, ld = p
        return a * np.exp(-np.exp(lb) * x) + c * np.exp(-np.exp(ld) * x) - y

    def jac(p):
        a, c, lb, ld = p
        b, d = np.exp(lb), np.exp(ld)
        eb, ed = np.exp(-b * x), np.exp(-d * x)
        out = np.empty((len(x), 4))
        out[:, 0] = eb
        out[:, 1] = ed
        out[:, 2] = -a * b * x * eb
        out[:, 3] = -c * d * x * ed
        return out

    rates = _start_rates(config)
    starts = []
    for k in range(config.n_starts):
        b0, d0 = rates[k], rates[config.n_starts - 1 - k]
        basis = np.column_stack([np.exp(-b0 * x), np.exp(-d0 * x)])
        a0, c0 = _lin_coeffs(basis, y)
        starts.append(np.array([a0, c0, math.log(b0), math.log(d0)]))
    p, nfev, converged = _multi_start_lm(resid, jac, starts, config)
    model = DoubleExpModel(a=float(p[0]), b=math.exp(p[2]), c=float(p[1]), d=math.exp(p[3]))
    return _finish_report(model, "double_exponential", x, y, nfev, converged)


@dataclass(frozen=True)
class SingleExpModel:
    a: float
    b: float
    c: float

    def predict(self, x):
        return self.a * np.exp(-self.b * np.asarray(x, dtype=np.float64)) + self.c


@dataclass(frozen=True)
class InverseModel:
    a: float
    b: float
    c: float

    def predict(self, x):
        return self.a / (np.asarray(x, dtype=np.float64) + self.b) + self.c


@dataclass(frozen=True)
class PowerLawModel:
    a: float
    b: float
    c: float

    def predict(self, x):
        return self.a * np.asarray(x, dtype=np.float64) ** (-self.b) + self.c


def _fit_single_exp(x, y, config):
    def resid(p):
        return p[0] * np.exp(-np.exp(p[1]) * x) + p[2] - y

    def jac(p):
        b = np.exp(p[1])
        eb = np.exp(-b * x)
        out = np.empty((len(x), 3))
        out[:, 0] = eb
        out[:, 1] = -p[0] * b * x * eb
        out[:, 2] = 1.0
        return out

    starts = []
    for b0 in _start_rates(config):
        basis = np.column_stack([np.exp(-b0 * x), np.ones_like(x)])
        a0, c0 = _lin_coeffs(basis, y)
        starts.append(np.array([a0, math.log(b0), c0]))
    p, nfev, conv = _multi_start_lm(resid, jac, starts, config)
    return _finish_report(SingleExpModel(float(p[0]), math.exp(p[1]), float(p[2])),
                          "single_exponential", x, y, nfev, conv)


def _fit_inverse(x, y, config):
    def resid(p):
        return p[0] / (x + p[1]) + p[2] - y

    def jac(p):
        denom = x + p[1]
        out = np.empty((len(x), 3))
        out[:, 0] = 1.0 / denom
        out[:, 1] = -p[0] / denom**2
        out[:, 2] = 1.0
        return out

    starts = []
    for b0 in _start_rates(config):
        basis = np.column_stack([1.0 / (x + b0), np.ones_like(x)])
        a0, c0 = _lin_coeffs(basis, y)
        starts.append(np.array([a0, b0, c0]))
    p, nfev, conv = _multi_start_lm(resid, jac, starts, config)
    return _finish_report(InverseModel(float(p[0]), float(p[1]), float(p[2])), "inverse_proportional", x, y, nfev, conv)


def _fit_power_law(x, y, config):
    if np.any(x <= 0):
        raise ProximityError("power-law family needs strictly positive z_img values")

    def resid(p):
        return p[0] * x ** (-np.exp(p[1])) + p[2] - y

    def jac(p):
        b = np.exp(p[1])
        xb = x ** (-b)
        out = np.empty((len(x), 3))
        out[:, 0] = xb
        out[:, 1] = -p[0] * b * np.log(x) * xb
        out[:, 2] = 1.0
        return out

    starts = []
    for b0 in np.geomspace(0.25, 4.0, config.n_starts):
        basis = np.column_stack([x ** (-b0), np.ones_like(x)])
        a0, c0 = _lin_coeffs(basis, y)
        starts.append(np.array([a0, math.log(b0), c0]))
    p, nfev, conv = _multi_start_lm(resid, jac, starts, config)
    return _finish_report(PowerLawModel(float(p[0]), math.exp(p[1]), float(p[2])), "power_law", x, y, nfev, conv)


@dataclass
class FamilyResult:
    family: str
    report: Optional[FitReport]
    error: Optional[str] = None


def fit_alternative_models(samples, config: Optional[FitConfig] = None):
    """Fit the three alternative monotone-decay families for ranking.

    A family that fails to fit is reported with its error message instead of
    aborting the batch.  These families have three free parameters, so four
    distinct z_img values suffice.
    """
    config = config or FitConfig()
    x, y = _filtered_xy(samples, config)
    if len(x) < 4 or len(np.unique(x)) < 4:
        raise InsufficientSamplesError(
            "alternative families need at least 4 samples with 4 distinct z_img values")
    out = []
    for family, fitter in (("single_exponential", _fit_single_exp),
                           ("inverse_proportional", _fit_inverse),
                           ("power_law", _fit_power_law)):
        try:
            out.append(FamilyResult(family, fitter(x, y, config)))
        except (ProximityError, np.linalg.LinAlgError) as exc:
            out.append(FamilyResult(family, None, error=str(exc)))
    return out


CHECKPOINTS_CM = (50.0, 45.0, 40.0, 35.0, 30.0, 25.0, 20.0, 15.0, 10.0)


@dataclass
class TrackingReport:
    frame_truth: np.ndarray
    frame_predicted: np.ndarray
    checkpoint_errors: dict  # checkpoint cm -> absolute error cm
    mae: float  # mean absolute error over checkpoints, cm


def evaluate_tracking(model: DoubleExpModel, sequence,
                      checkpoints=CHECKPOINTS_CM) -> TrackingReport:
    """Score distance tracking on (DepthMap, SegMask, truth_cm) frames.

    Each frame's distance comes from mask_mean_depth + the model; the score
    is the mean absolute error at the frames nearest the checkpoint
    distances that the sequence actually covers.
    """
    if not sequence:
        raise ProximityError("empty tracking sequence")
    truths = np.empty(len(sequence))
    preds = np.empty(len(sequence))
    for i, (depth, mask, truth) in enumerate(sequence):
        try:
            z = mask_mean_depth(depth, mask)
        except EmptyMaskError as exc:
            raise EmptyMaskError(f"frame {i}: {exc}") from exc
        truths[i] = truth
        preds[i] = predict_distance(model, z)
    lo, hi = truths.min(), truths.max()
    errors = {}
    for cp in checkpoints:
        if lo - 1e-9 <= cp <= hi + 1e-9:
            idx = int(np.argmin(np.abs(truths - cp)))
            errors[cp] = float(abs(preds[idx] - truths[idx]))
    if not errors:
        raise ProximityError("sequence covers none of the checkpoint distances")
    return TrackingReport(frame_truth=truths, frame_predicted=preds,
                          checkpoint_errors=errors,
                          mae=float(np.mean(list(errors.values()))))


def read_samples_csv(path):
    """Load calibration samples: header run_id,speed_cmps,z_world_cm,z_img."""
    samples = []
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip()
        if header.replace(" ", "") != "run_id,speed_cmps,z_world_cm,z_img":
            raise CsvFormatError(f"{path}:1: bad header {header!r}")
        for line_no, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise CsvFormatError(f"{path}:{line_no}: expected 4 columns, found {len(parts)}")
            try:
                samples.append(CalibrationSample(
                    run_id=parts[0], speed=float(parts[1]),
                    z_world=float(parts[2]), z_img=float(parts[3])))
            except (ValueError, ProximityError) as exc:
                raise CsvFormatError(f"{path}:{line_no}: {exc}") from exc
    if not samples:
        raise InsufficientSamplesError(f"{path}: no calibration samples")
    return samples


def write_samples_csv(samples, path):
    with open(path, "w", encoding="ascii") as f:
        f.write("run_id,speed_cmps,z_world_cm,z_img\n")
        for s in samples:
            f.write(f"{s.run_id},{s.speed!r},{s.z_world!r},{s.z_img!r}\n")
