"""Synthetic approach scenes standing in for the camera and depth networks.

Generates depth/segmentation frame sequences for a square target moving
toward the sensor at constant speed.  The per-pixel depth inside the target
mask encodes the true distance through the numerical inverse of a reference
distance model (plus optional Gaussian noise in depth space), so running the
frames back through the forward model recovers the truth and closes the
calibration loop without hardware.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .core import DepthMap, SegMask, VTPalmError
from .proximity import REFERENCE_MODEL, DoubleExpModel
from . import fileio


class SceneError(VTPalmError):
    pass


class ModelRangeError(SceneError):
    """Requested distance is outside what the model can produce."""


def invert_model(model: DoubleExpModel, z_world: float, z_img_max: float = 30.0,
                 tol_cm: float = 1e-9) -> float:
    """Numerically invert a strictly decreasing distance model by bisection.

    Only used for synthesis; requires non-negative amplitudes so the model is
    strictly decreasing over [0, z_img_max].
    """
    if model.a < 0 or model.c < 0 or (model.a == 0 and model.c == 0):
        raise SceneError("inversion needs a strictly decreasing model (a, c >= 0, not both 0)")
    hi_val = model.predict(0.0)
    lo_val = model.predict(z_img_max)
    if not lo_val <= z_world <= hi_val:
        raise ModelRangeError(
            f"z_world={z_world} cm outside attainable range [{lo_val:.6g}, {hi_val:.6g}]")
    lo, hi = 0.0, z_img_max
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        val = model.predict(mid)
        if abs(val - z_world) < tol_cm:
            return mid
        if val > z_world:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class ApproachScenario:
    """Constant-speed approach of a square target from start_distance to 0."""

    speed: float  # cm/s
    start_distance: float = 50.0  # cm
    frame_rate: float = 30.0  # fps
    target_size: float = 10.0  # cm
    noise_sigma: float = 0.0  # depth-space noise
    seed: int = 0
    width: int = 160
    height: int = 120
    focal_scale: float = 90.0  # apparent side = focal_scale * target_size / distance, px
    background_depth: float = 0.0
    model: DoubleExpModel = field(default_factory=lambda: REFERENCE_MODEL)

    def __post_init__(self):
        if self.speed <= 0:
            raise SceneError("speed must be positive")
        if self.start_distance <= 0:
            raise SceneError("start_distance must be positive")
        if self.frame_rate <= 0:
            raise SceneError("frame_rate must be positive")
        if self.noise_sigma < 0:
            raise SceneError("noise_sigma must be non-negative")
        if self.width < 8 or self.height < 8:
            raise SceneError("frame dimensions too small")


class SimFrame(NamedTuple):
    depth: DepthMap
    mask: SegMask
    truth_cm: float
    timestamp_s: float


def _target_mask(scenario, truth):
    side = scenario.focal_scale * scenario.target_size / truth
    side_px = int(round(side))
    side_px = max(1, min(side_px, min(scenario.width, scenario.height) - 2))
    cx, cy = scenario.width // 2, scenario.height // 2
    half = side_px // 2
    u0, u1 = cx - half, cx - half + side_px
    v0, v1 = cy - half, cy - half + side_px
    mask = np.zeros((scenario.height, scenario.width), dtype=np.uint8)
    mask[v0:v1, u0:u1] = 1
    return mask


def generate_sequence(scenario: ApproachScenario):
    """Render the full approach as (depth, mask, truth_cm, timestamp) frames.

    Frame k sits at time k/frame_rate with truth = start - speed*k/frame_rate;
    generation stops just before the target reaches the sensor plane.  Mask
    pixels carry the inverse-model depth for the frame's truth plus optional
    Gaussian noise (clipped at zero to stay a valid depth map).
    """
    rng = np.random.default_rng(scenario.seed)
    frames = []
    k = 0
    while True:
        truth = scenario.start_distance - scenario.speed * k / scenario.frame_rate
        if truth <= 0:
            break
        t = k / scenario.frame_rate
        mask = _target_mask(scenario, truth)
        z_img = invert_model(scenario.model, truth)
        depth = np.full((scenario.height, scenario.width), scenario.background_depth)
        inside = mask != 0
        vals = np.full(int(inside.sum()), z_img)
        if scenario.noise_sigma > 0:
            vals = vals + rng.normal(0.0, scenario.noise_sigma, size=vals.shape)
            vals = np.maximum(vals, 0.0)
        depth[inside] = vals
        frames.append(SimFrame(DepthMap(depth), SegMask(mask), truth, t))
        k += 1
    return frames


def save_sequence(frames, out_dir) -> None:
    """Persist frames as VTP1 planes plus a manifest CSV."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.csv"), "w", encoding="ascii") as f:
        f.write("frame,timestamp_s,truth_cm\n")
        for i, frame in enumerate(frames):
            fileio.save_depth_map(frame.depth, os.path.join(out_dir, f"frame_{i:04d}_depth.vtp1"))
            fileio.save_seg_mask(frame.mask, os.path.join(out_dir, f"frame_{i:04d}_mask.vtp1"))
            f.write(f"{i},{frame.timestamp_s!r},{frame.truth_cm!r}\n")


def load_sequence(out_dir):
    frames = []
    manifest = os.path.join(out_dir, "manifest.csv")
    if not os.path.exists(manifest):
        raise SceneError(f"no sequence manifest at {manifest}")
    with open(manifest, "r", encoding="ascii") as f:
        f.readline()
        for line in f:
            line = line.strip()
            if not line:
                continue
            idx_s, t_s, truth_s = line.split(",")
            i = int(idx_s)
            depth = fileio.load_depth_map(os.path.join(out_dir, f"frame_{i:04d}_depth.vtp1"))
            mask = fileio.load_seg_mask(os.path.join(out_dir, f"frame_{i:04d}_mask.vtp1"))
            frames.append(SimFrame(depth, mask, float(truth_s), float(t_s)))
    return frames
