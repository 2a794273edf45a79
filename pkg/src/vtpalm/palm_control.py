"""Mode-switching state machine, contact detection, and the grasp workflow.

The palm has four operating modes: Proximity (camera ranging through the
transparent window), Switching (servo is rolling the opaque elastic layer
over the window), Tactile (contact imaging under LED light), and Grasping.
Crossing the distance threshold fires exactly one servo deployment per
approach; contact is declared after a debounced run of
above-threshold difference frames.  Every emitted device command is
timestamped on the control-loop grid (default 50 Hz), and identical event
streams always produce identical command logs.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .core import HeightMap, RasterImage, SegMask, VTPalmError, difference_image, require_same_shape
from .gradient_mapper import MlpWeights, infer_gradients
from .proximity import CHECKPOINTS_CM, DoubleExpModel, mask_mean_depth, predict_distance
from .scenesim import ApproachScenario, generate_sequence
from .surface_recon import reconstruct
from .tactile_calib import detect_contact_circle
from .tactile_render import LightingRig, default_rig, make_height_sphere_press, render_height


class ControlError(VTPalmError):
    pass


class InvalidEventError(ControlError):
    def __init__(self, mode, event):
        super().__init__(f"event {type(event).__name__} not valid in mode {mode.name}")
        self.mode = mode
        self.event = event


class BeltRangeError(ControlError):
    pass


class Mode(enum.Enum):
    PROXIMITY = "Proximity"
    SWITCHING = "Switching"
    TACTILE = "Tactile"
    GRASPING = "Grasping"


class CommandKind(enum.Enum):
    SERVO_PULSE = "ServoPulse"
    LED_SET = "LedSet"
    GRASP_SIGNAL = "GraspSignal"
    BELT_ADJUST = "BeltAdjust"


SERVO_PULSE_WIDTHS_US = (100, 2500)  # counterclockwise / clockwise full speed


@dataclass(frozen=True)
class DeviceCommand:
    kind: CommandKind
    timestamp_s: float
    pulse_width_us: int = 0
    duration_ms: float = 0.0
    value: float = 0.0

    def __post_init__(self):
        if self.kind in (CommandKind.SERVO_PULSE, CommandKind.BELT_ADJUST):
            if self.pulse_width_us not in SERVO_PULSE_WIDTHS_US:
                raise ControlError(
                    f"servo pulse width must be one of {SERVO_PULSE_WIDTHS_US}, "
                    f"got {self.pulse_width_us}")

    def wire_line(self) -> str:
        return (f"t={self.timestamp_s:.6f} kind={self.kind.value} "
                f"pulse_us={self.pulse_width_us} dur_ms={self.duration_ms:g} "
                f"val={self.value:g}")


def parse_wire_line(line: str) -> DeviceCommand:
    fields = {}
    for token in line.split():
        key, _, value = token.partition("=")
        fields[key] = value
    try:
        return DeviceCommand(kind=CommandKind(fields["kind"]),
                             timestamp_s=float(fields["t"]),
                             pulse_width_us=int(fields["pulse_us"]),
                             duration_ms=float(fields["dur_ms"]),
                             value=float(fields["val"]))
    except (KeyError, ValueError) as exc:
        raise ControlError(f"bad command line {line!r}: {exc}") from exc


def write_command_log(commands, path):
    with open(path, "w", encoding="ascii") as f:
        for cmd in commands:
            f.write(cmd.wire_line())
            f.write("\n")


def read_command_log(path):
    with open(path, "r", encoding="ascii") as f:
        return [parse_wire_line(line.strip()) for line in f if line.strip()]


@dataclass(frozen=True)
class SwitchConfig:
    distance_threshold: float = 10.0  # cm
    deploy_pulse: int = 100  # us, counterclockwise rolls the layer out
    retract_pulse: int = 2500  # us
    deploy_duration: float = 1200.0  # ms
    contact_threshold: float = 0.05  # mean |difference| intensity
    contact_frames: int = 3  # consecutive frames to confirm contact
    control_rate: float = 50.0  # Hz, command timestamp grid
    sense_rate: float = 30.0  # fps

    def __post_init__(self):
        if self.distance_threshold <= 0:
            raise ControlError("distance_threshold must be positive")
        if self.control_rate <= 0 or self.sense_rate <= 0:
            raise ControlError("rates must be positive")
        if self.contact_frames < 1:
            raise ControlError("contact_frames must be at least 1")
        for pulse in (self.deploy_pulse, self.retract_pulse):
            if pulse not in SERVO_PULSE_WIDTHS_US:
                raise ControlError(f"pulse widths limited to {SERVO_PULSE_WIDTHS_US}")


# --- events -----------------------------------------------------------------


@dataclass(frozen=True)
class DistanceMeasured:
    timestamp_s: float
    distance_cm: float


@dataclass(frozen=True)
class TactileFrame:
    timestamp_s: float
    image: RasterImage


@dataclass(frozen=True)
class Tick:
    timestamp_s: float


@dataclass(frozen=True)
class PalmState:
    """Snapshot of the palm's control status between events.

    ``led_on`` tracks the logical LED state of the perception stack: it goes
    true when tactile imaging becomes possible (Tactile/Grasping), even
    though the hardware LedSet command is emitted when the switch starts so
    the strip is lit by the time the layer is deployed.
    """

    mode: Mode = Mode.PROXIMITY
    last_distance: Optional[float] = None
    belt_position: float = 0.0  # 0 = window transparent, 1 = layer deployed
    led_on: bool = False
    switched: bool = False  # one switch sequence per approach
    deploy_done_t: Optional[float] = None
    contact_streak: int = 0
    reference_frame: Optional[RasterImage] = None
    last_event_t: float = float("-inf")

    def __post_init__(self):
        if self.led_on and self.mode not in (Mode.TACTILE, Mode.GRASPING):
            raise ControlError(f"LED cannot be on in mode {self.mode.name}")
        if not -1e-12 <= self.belt_position <= 1.0 + 1e-12:
            raise ControlError(f"belt_position {self.belt_position} outside [0, 1]")


def initial_state() -> PalmState:
    return PalmState()


def snap_to_control_grid(t: float, cfg: SwitchConfig) -> float:
    """Next control-loop tick at or after t (commands issue on the grid)."""
    return math.ceil(t * cfg.control_rate - 1e-9) / cfg.control_rate


def contact_step(streak: int, frame: RasterImage, reference: RasterImage,
                 cfg: SwitchConfig):
    """One debounce update; returns (contact_confirmed, new_streak)."""
    require_same_shape(frame, reference, "frame and reference")
    mean_diff = float(difference_image(frame, reference).data.mean())
    streak = streak + 1 if mean_diff > cfg.contact_threshold else 0
    return streak >= cfg.contact_frames, streak


class ContactDetector:
    """Stateful wrapper over contact_step for standalone use."""

    def __init__(self, reference: RasterImage, cfg: SwitchConfig = SwitchConfig()):
        self.reference = reference
        self.cfg = cfg
        self.streak = 0

    def update(self, frame: RasterImage) -> bool:
        fired, self.streak = contact_step(self.streak, frame, self.reference, self.cfg)
        return fired

    def reset(self):
        self.streak = 0


def detect_contact(frame: RasterImage, reference: RasterImage, cfg: SwitchConfig,
                   streak: int = 0):
    """Functional form of the debounced detector: (confirmed, streak)."""
    return contact_step(streak, frame, reference, cfg)


def step(state: PalmState, event, cfg: SwitchConfig):
    """Advance the state machine by one sensor event.

    Returns (new_state, commands).  Transition rules:
    Proximity --(distance <= threshold)--> Switching, emitting one servo
    deployment pulse plus LedSet(on); Switching --(tick past the deploy
    window)--> Tactile; Tactile --(debounced contact)--> Grasping with a
    GraspSignal.  Distance readings during Switching are accepted but
    ignored (the reading is frozen while the layer moves); tactile frames
    are only valid once the layer is deployed.  Events must arrive in
    timestamp order.
    """
    t = event.timestamp_s
    if t < state.last_event_t:
        raise ControlError(
            f"event at t={t} arrived after t={state.last_event_t}; deliver events in order")
    commands = []

    if isinstance(event, DistanceMeasured):
        if state.mode == Mode.PROXIMITY:
            state = replace(state, last_distance=event.distance_cm, last_event_t=t)
            if event.distance_cm <= cfg.distance_threshold and not state.switched:
                t_cmd = snap_to_control_grid(t, cfg)
                commands.append(DeviceCommand(CommandKind.SERVO_PULSE, t_cmd,
                                              cfg.deploy_pulse, cfg.deploy_duration))
                commands.append(DeviceCommand(CommandKind.LED_SET, t_cmd, value=1.0))
                state = replace(state, mode=Mode.SWITCHING, switched=True,
                                deploy_done_t=t + cfg.deploy_duration / 1000.0)
        elif state.mode == Mode.SWITCHING:
            state = replace(state, last_event_t=t)  # reading frozen during the roll
        else:
            raise InvalidEventError(state.mode, event)

    elif isinstance(event, Tick):
        state = replace(state, last_event_t=t)
        if state.mode == Mode.SWITCHING and t >= state.deploy_done_t:
            state = replace(state, mode=Mode.TACTILE, belt_position=1.0, led_on=True)

    elif isinstance(event, TactileFrame):
        if state.mode == Mode.TACTILE:
            if state.reference_frame is None:
                state = replace(state, reference_frame=event.image, last_event_t=t)
            else:
                fired, streak = contact_step(state.contact_streak, event.image,
                                             state.reference_frame, cfg)
                state = replace(state, contact_streak=streak, last_event_t=t)
                if fired:
                    t_cmd = snap_to_control_grid(t, cfg)
                    commands.append(DeviceCommand(CommandKind.GRASP_SIGNAL, t_cmd, value=1.0))
                    state = replace(state, mode=Mode.GRASPING)
        elif state.mode == Mode.GRASPING:
            state = replace(state, last_event_t=t)  # monitoring only
        else:
            raise InvalidEventError(state.mode, event)

    else:
        raise InvalidEventError(state.mode, event)

    return state, commands


def reset_state(state: PalmState, cfg: SwitchConfig, t: float):
    """Return the palm to Proximity, retracting the layer if deployed."""
    commands = []
    if state.switched or state.belt_position > 0:
        t_cmd = snap_to_control_grid(t, cfg)
        commands.append(DeviceCommand(CommandKind.SERVO_PULSE, t_cmd,
                                      cfg.retract_pulse, cfg.deploy_duration))
        commands.append(DeviceCommand(CommandKind.LED_SET, t_cmd, value=0.0))
    return PalmState(last_event_t=t), commands


_BELT_QUANTUM = 1e-6  # belt travel resolution; keeps +delta/-delta exact


def belt_adjust(state: PalmState, delta: float, cfg: SwitchConfig, t: float):
    """In-grasp fine adjustment along the belt's degree of freedom.

    Only valid while Grasping; the move must keep the position inside
    [0, 1].  Emits a BeltAdjust pulse whose duration scales with |delta|
    (full travel = deploy_duration) and whose direction follows the sign.
    A zero delta is a no-op.
    """
    if state.mode != Mode.GRASPING:
        raise ControlError(f"belt adjustment requires Grasping mode, palm is in {state.mode.name}")
    if delta == 0.0:
        return state, []
    target = round((state.belt_position + delta) / _BELT_QUANTUM) * _BELT_QUANTUM
    if not 0.0 <= target <= 1.0:
        raise BeltRangeError(
            f"belt move to {target:.6f} outside [0, 1] (from {state.belt_position:.6f})")
    pulse = cfg.deploy_pulse if delta > 0 else cfg.retract_pulse
    cmd = DeviceCommand(CommandKind.BELT_ADJUST, snap_to_control_grid(t, cfg),
                        pulse, abs(delta) * cfg.deploy_duration, value=delta)
    return replace(state, belt_position=target, last_event_t=t), [cmd]


# --- end-to-end scenario ----------------------------------------------------


@dataclass(frozen=True)
class GraspScript:
    """Scripted tactile contact used after the mode switch.

    The press frame is a rendered sphere indentation; its depth ramps from 0
    to press_depth over ramp_frames after clean_frames of no contact.  The
    default pitch matches the zoomed contact camera, where a sub-millimeter
    press fills a large share of the frame.
    """

    sphere_radius_mm: float = 2.5
    press_depth_mm: float = 0.8
    frame_width: int = 256
    frame_height: int = 192
    pixel_pitch_mm: float = 0.02
    center_px: tuple = (128.0, 96.0)
    clean_frames: int = 2
    ramp_frames: int = 5
    render_noise: float = 0.005
    render_seed: int = 7
    belt_deltas: tuple = ()  # optional post-grasp fine adjustments


@dataclass
class FrameTrace:
    timestamp_s: float
    mode: str
    truth_cm: Optional[float]
    measured_cm: Optional[float]


@dataclass
class ScenarioReport:
    commands: list
    frames: list  # FrameTrace per processed sensor frame
    switch_measured_cm: Optional[float]
    switch_truth_cm: Optional[float]
    contact_time_s: Optional[float]
    ranging_accuracy: float  # fraction of checkpoints with |error| < 1 cm
    checkpoint_errors: dict
    reconstruction: Optional[object]  # HeightMap of the contact surface
    final_state: PalmState

    def save_csv(self, path):
        with open(path, "w", encoding="ascii") as f:
            f.write("timestamp_s,mode,truth_cm,measured_cm\n")
            for fr in self.frames:
                truth = "" if fr.truth_cm is None else repr(fr.truth_cm)
                meas = "" if fr.measured_cm is None else repr(fr.measured_cm)
                f.write(f"{fr.timestamp_s!r},{fr.mode},{truth},{meas}\n")


ACCURACY_LIMIT_CM = 1.0  # "accurate" checkpoint = absolute error below this


def _ranging_accuracy(truths, preds, checkpoints):
    errors = {}
    lo, hi = min(truths), max(truths)
    truths = np.asarray(truths)
    preds = np.asarray(preds)
    for cp in checkpoints:
        if lo - 1e-9 <= cp <= hi + 1e-9:
            idx = int(np.argmin(np.abs(truths - cp)))
            errors[cp] = float(abs(preds[idx] - truths[idx]))
    if not errors:
        return 0.0, errors
    good = sum(1 for e in errors.values() if e < ACCURACY_LIMIT_CM)
    return good / len(errors), errors


def run_grasp_scenario(scenario: ApproachScenario, script: GraspScript,
                       model: DoubleExpModel, weights: Optional[MlpWeights],
                       cfg: SwitchConfig = SwitchConfig(),
                       rig: Optional[LightingRig] = None,
                       recon_convention: str = "continuous") -> ScenarioReport:
    """Simulate approach -> switch -> contact -> grasp, then reconstruct.

    Proximity frames come from the scene simulator at the sense rate; once
    the machine switches, scripted tactile frames are streamed until the
    debounce fires.  With ``weights`` provided, the confirmed-contact frame
    is run through gradient inference and the Poisson solve; its contact
    circle is detected from the frame difference.
    """
    rig = rig or default_rig(noise_sigma=script.render_noise)
    state = initial_state()
    commands = []
    trace = []
    truths, preds = [], []
    switch_measured = None
    switch_truth = None

    approach = generate_sequence(scenario)
    t = 0.0
    for frame in approach:
        t = frame.timestamp_s
        measured = predict_distance(model, mask_mean_depth(frame.depth, frame.mask))
        truths.append(frame.truth_cm)
        preds.append(measured)
        state, cmds = step(state, DistanceMeasured(t, measured), cfg)
        commands.extend(cmds)
        trace.append(FrameTrace(t, state.mode.name, frame.truth_cm, measured))
        if state.mode != Mode.PROXIMITY:
            switch_measured = measured
            switch_truth = frame.truth_cm
            break

    if state.mode != Mode.SWITCHING:
        accuracy, errors = _ranging_accuracy(truths, preds, CHECKPOINTS_CM)
        return ScenarioReport(commands, trace, None, None, None, accuracy, errors,
                              None, state)

    dt = 1.0 / cfg.sense_rate
    while state.mode == Mode.SWITCHING:
        t += dt
        state, cmds = step(state, Tick(t), cfg)
        commands.extend(cmds)
        trace.append(FrameTrace(t, state.mode.name, None, None))

    # scripted tactile phase
    size = (script.frame_width, script.frame_height)
    flat = HeightMap(np.zeros((script.frame_height, script.frame_width)),
                     script.pixel_pitch_mm)
    contact_time = None
    press_img = None
    frame_no = 0
    while state.mode == Mode.TACTILE:
        t += dt
        frame_no += 1
        if frame_no <= script.clean_frames + 1:
            img = render_height(flat, rig, script.render_seed + frame_no)
        else:
            ramp = min(1.0, (frame_no - script.clean_frames - 1) / script.ramp_frames)
            depth = script.press_depth_mm * max(ramp, 1e-6)
            hmap, _ = make_height_sphere_press(script.sphere_radius_mm, depth,
                                               script.center_px, size, script.pixel_pitch_mm)
            img = render_height(hmap, rig, script.render_seed + frame_no)
        state, cmds = step(state, TactileFrame(t, img), cfg)
        commands.extend(cmds)
        trace.append(FrameTrace(t, state.mode.name, None, None))
        if state.mode == Mode.GRASPING:
            contact_time = commands[-1].timestamp_s
            press_img = img
        if frame_no > 10 * (script.clean_frames + script.ramp_frames + cfg.contact_frames):
            raise ControlError("scripted press never produced a detectable contact")

    for delta in script.belt_deltas:
        t += dt
        state, cmds = belt_adjust(state, delta, cfg, t)
        commands.extend(cmds)

    recon = None
    if weights is not None and press_img is not None:
        detection = detect_contact_circle(press_img, state.reference_frame)
        h, w = press_img.height, press_img.width
        cols, rows = np.meshgrid(np.arange(w), np.arange(h))
        u0, v0 = detection.center
        disc = ((cols - u0) ** 2 + (rows - v0) ** 2) <= detection.radius_px**2
        gfield = infer_gradients(weights, press_img, SegMask(disc.astype(np.uint8)))
        recon = reconstruct(gfield, script.pixel_pitch_mm, recon_convention)

    accuracy, errors = _ranging_accuracy(truths, preds, CHECKPOINTS_CM)
    return ScenarioReport(commands, trace, switch_measured, switch_truth,
                          contact_time, accuracy, errors, recon, state)
