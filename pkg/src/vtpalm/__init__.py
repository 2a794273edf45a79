"""Perception stack for a dual-mode proximity/tactile palm sensor.

Long-range distance estimation through a fitted double-exponential depth
model, contact-surface reconstruction via per-pixel photometric calibration
and an FFT Poisson solve, roughness/texture discrimination, and the
mode-switching control state machine, all exercised against a synthetic
sensor simulator.
"""

from .core import (
    DepthMap,
    DimensionMismatchError,
    GradientField,
    HeightMap,
    RasterImage,
    SegMask,
    VTPalmError,
    difference_image,
    to_grayscale,
)
from .proximity import (
    REFERENCE_MODEL,
    CalibrationSample,
    DoubleExpModel,
    FitConfig,
    FitReport,
    evaluate_tracking,
    fit_alternative_models,
    fit_double_exp,
    mask_mean_depth,
    predict_distance,
)
from .scenesim import ApproachScenario, generate_sequence, invert_model
from .tactile_calib import (
    GradientDataset,
    GradientSample,
    SpherePress,
    build_dataset,
    detect_contact_circle,
    sphere_gradient,
    sphere_height,
)
from .tactile_render import (
    LightingRig,
    default_rig,
    make_height_rough,
    make_height_sphere_press,
    normals_from_height,
    render_height,
    shade,
)
from .gradient_mapper import (
    MlpConfig,
    MlpWeights,
    infer_gradients,
    lookup_baseline,
    train,
)
from .surface_recon import divergence, poisson_solve, reconstruct
from .texture_analysis import (
    amplitude_spectrum,
    discriminate,
    glcm_contrast,
    texture_features,
    wavelet_energy,
)
from .palm_control import (
    DeviceCommand,
    DistanceMeasured,
    GraspScript,
    Mode,
    PalmState,
    SwitchConfig,
    TactileFrame,
    Tick,
    belt_adjust,
    detect_contact,
    initial_state,
    reset_state,
    run_grasp_scenario,
    step,
)

__version__ = "0.1.0"
