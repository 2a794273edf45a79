"""Command-line entry point wiring the modules into reproducible experiments.

Subcommands: fit-proximity, calibrate-tactile, reconstruct, analyze,
simulate-grasp, render.  Every command is deterministic given its inputs and
--seed, writes its outputs under --out (or $VTPALM_DATA_DIR), and records a
manifest of produced files.  Config files are plain key=value text.
"""

from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from . import fileio, palm_control, proximity, scenesim, tactile_calib, tactile_render
from .core import HeightMap, RasterImage, SegMask, VTPalmError
from .gradient_mapper import MlpConfig, infer_gradients, load_weights, save_weights, train
from .surface_recon import reconstruct
from .texture_analysis import DegenerateTextureError, amplitude_spectrum, discriminate
from .tactile_render import default_rig, normals_from_height

DATA_DIR_ENV = "VTPALM_DATA_DIR"


def _out_dir(args, command):
    if args.out:
        out = args.out
    else:
        out = os.path.join(os.environ.get(DATA_DIR_ENV, os.getcwd()), command)
    os.makedirs(out, exist_ok=True)
    return out


def _write_manifest(out, command, seed, files, extra=None):
    entries = {"command": command, "seed": seed}
    if extra:
        entries.update(extra)
    for i, name in enumerate(sorted(files)):
        entries[f"file_{i:03d}"] = name
    fileio.write_kv(os.path.join(out, "manifest.txt"), entries)


def _load_config(path):
    if not path:
        return {}
    return fileio.read_kv(path)


def cmd_fit_proximity(args):
    out = _out_dir(args, "fit-proximity")
    samples = proximity.read_samples_csv(args.samples)
    config = proximity.FitConfig()
    report = proximity.fit_double_exp(samples, config)
    families = proximity.fit_alternative_models(samples, config)

    m = report.model
    with open(os.path.join(out, "model.txt"), "w", encoding="ascii") as f:
        f.write(f"{m.a!r},{m.b!r},{m.c!r},{m.d!r}\n")
    report.save_csv(os.path.join(out, "fit_double_exponential.csv"))
    files = ["model.txt", "fit_double_exponential.csv"]
    with open(os.path.join(out, "family_ranking.csv"), "w", encoding="ascii") as f:
        f.write("family,rmse,r_squared,converged,error\n")
        rows = [("double_exponential", report.rmse, report.r_squared, report.converged, "")]
        for fam in families:
            if fam.report is not None:
                rows.append((fam.family, fam.report.rmse, fam.report.r_squared,
                             fam.report.converged, ""))
            else:
                rows.append((fam.family, math.inf, math.nan, False, fam.error))
        for row in sorted(rows, key=lambda r: r[1]):
            f.write(f"{row[0]},{row[1]!r},{row[2]!r},{int(row[3])},{row[4]}\n")
    files.append("family_ranking.csv")

    xs = np.array([s.z_img for s in samples])
    ys = np.array([s.z_world for s in samples])
    grid = np.linspace(xs.min(), xs.max(), 300)
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    axes[0].scatter(xs, ys, s=8, label="samples")
    axes[0].plot(grid, report.model.predict(grid), "r-", label="fit")
    axes[0].set_xlabel("mean relative depth")
    axes[0].set_ylabel("distance (cm)")
    axes[0].legend()
    axes[1].stem(report.residuals)
    axes[1].set_xlabel("sample")
    axes[1].set_ylabel("residual (cm)")
    fig.tight_layout()
    fig.savefig(os.path.join(out, "fit_residuals.png"), dpi=100)
    plt.close(fig)
    files.append("fit_residuals.png")

    _write_manifest(out, "fit-proximity", args.seed, files,
                    {"rmse": repr(report.rmse), "r_squared": repr(report.r_squared)})
    print(f"fit: rmse={report.rmse:.4f} cm, r_squared={report.r_squared:.4f} -> {out}")
    return 0


def cmd_calibrate_tactile(args):
    out = _out_dir(args, "calibrate-tactile")
    skip_log = []
    presses = tactile_calib.load_press_manifest(
        args.manifest, r=args.sphere_radius, pixel_pitch=args.pixel_pitch, skip_log=skip_log)
    if not presses:
        raise tactile_calib.CalibrationError("no usable presses in manifest")
    dataset = tactile_calib.build_dataset(presses, jobs=args.jobs, skip_log=skip_log)
    cfg = MlpConfig(seed=args.seed, batch_size=args.batch_size)
    weights, log = train(dataset, cfg)

    dataset.save_csv(os.path.join(out, "dataset.csv"))
    save_weights(weights, os.path.join(out, "weights.vtpw"))
    log.save_csv(os.path.join(out, "training_log.csv"))
    files = ["dataset.csv", "weights.vtpw", "training_log.csv"]
    if skip_log:
        with open(os.path.join(out, "skipped.txt"), "w", encoding="utf-8") as f:
            f.write("\n".join(skip_log) + "\n")
        files.append("skipped.txt")
    _write_manifest(out, "calibrate-tactile", args.seed, files,
                    {"n_samples": len(dataset), "final_val_mse": repr(log.final_val_mse),
                     "best_epoch": log.best_epoch})
    print(f"calibrated on {len(dataset)} samples; final val MSE {log.final_val_mse:.4f} -> {out}")
    return 0


def cmd_reconstruct(args):
    out = _out_dir(args, "reconstruct")
    image = fileio.load_image(args.image)
    reference = fileio.load_image(args.reference)
    weights = load_weights(args.weights)

    try:
        det = tactile_calib.detect_contact_circle(image, reference)
        cols, rows = np.meshgrid(np.arange(image.width), np.arange(image.height))
        u0, v0 = det.center
        disc = ((cols - u0) ** 2 + (rows - v0) ** 2) <= det.radius_px**2
        gfield = infer_gradients(weights, image, SegMask(disc.astype(np.uint8)))
        height = reconstruct(gfield, args.pixel_pitch)
    except tactile_calib.ContactDetectionError:
        # no detectable contact: the surface is undeformed
        height = HeightMap(np.zeros((image.height, image.width)), args.pixel_pitch)

    fileio.save_height_map(height, os.path.join(out, "height.vtp1"))
    fileio.write_plane_csv(os.path.join(out, "height.csv"), [height.z])
    normals = normals_from_height(height)
    nz = np.abs(normals[:, :, 2])
    fileio.save_image(RasterImage((nz - nz.min()) / max(nz.max() - nz.min(), 1e-12)),
                      os.path.join(out, "normal_z.png"))
    plt.imsave(os.path.join(out, "height_heat.png"), height.z, cmap="viridis")
    files = ["height.vtp1", "height.csv", "normal_z.png", "height_heat.png"]
    # indentation depth: dent bottom relative to the undeformed (median) level
    apex_mm = float(np.median(height.z) - height.z.min())
    _write_manifest(out, "reconstruct", args.seed, files,
                    {"pixel_pitch": args.pixel_pitch, "apex_mm": repr(apex_mm)})
    print(f"reconstructed {image.width}x{image.height} frame -> {out}")
    return 0


def cmd_analyze(args):
    out = _out_dir(args, "analyze")
    files = []
    if args.mode == "roughness":
        rows = []
        for i, path in enumerate(args.images):
            img = fileio.load_image(path)
            spec = amplitude_spectrum(img)
            la = spec.log_amplitude
            vis = (la - la.min()) / max(la.max() - la.min(), 1e-12)
            name = f"{i:02d}_{os.path.splitext(os.path.basename(path))[0]}"
            fileio.save_image(RasterImage(vis), os.path.join(out, f"spectrum_{name}.png"))
            files.append(f"spectrum_{name}.png")
            rows.append((name, spec.high_freq_ratio))
        with open(os.path.join(out, "roughness.csv"), "w", encoding="ascii") as f:
            f.write("image,high_freq_ratio\n")
            for name, ratio in rows:
                f.write(f"{name},{ratio!r}\n")
        files.append("roughness.csv")
        _write_manifest(out, "analyze", args.seed, files, {"mode": "roughness"})
        for name, ratio in rows:
            print(f"{name}: high_freq_ratio={ratio:.4f}")
    else:
        if len(args.images) == 1:
            img = fileio.load_image(args.images[0])
            try:
                discriminate(img, img)
            except DegenerateTextureError:
                print("warning: zero-variance input, nothing to discriminate", file=sys.stderr)
            _write_manifest(out, "analyze", args.seed, files, {"mode": "texture"})
            return 0
        if len(args.images) != 2:
            raise VTPalmError("texture mode compares exactly two images")
        a = fileio.load_image(args.images[0])
        b = fileio.load_image(args.images[1])
        report = discriminate(a, b)
        with open(os.path.join(out, "texture_margins.csv"), "w", encoding="ascii") as f:
            f.write("feature,abs_difference,margin\n")
            for name in report.feature_names:
                f.write(f"{name},{report.abs_difference[name]!r},{report.margins[name]!r}\n")
        files.append("texture_margins.csv")
        _write_manifest(out, "analyze", args.seed, files, {"mode": "texture"})
        print(f"best margin: {report.best_margin():.3f}")
    return 0


def cmd_simulate_grasp(args):
    out = _out_dir(args, "simulate-grasp")
    cfg_map = _load_config(args.config)

    def get(key, default, cast=float):
        return cast(cfg_map.get(key, default))

    scenario = scenesim.ApproachScenario(
        speed=get("speed_cmps", 8.0),
        start_distance=get("start_distance_cm", 50.0),
        frame_rate=get("frame_rate_fps", 30.0),
        noise_sigma=get("noise_sigma", 0.0),
        seed=args.seed,
    )
    script = palm_control.GraspScript(
        press_depth_mm=get("press_depth_mm", 1.0),
        belt_deltas=tuple(float(x) for x in cfg_map.get("belt_deltas", "").split(";") if x),
    )
    switch_cfg = palm_control.SwitchConfig(
        distance_threshold=get("distance_threshold_cm", 10.0),
        deploy_duration=get("deploy_duration_ms", 1200.0),
    )
    weights = load_weights(args.weights) if args.weights else None
    if args.model:
        a, b, c, d = (float(x) for x in open(args.model).read().strip().split(","))
        model = proximity.DoubleExpModel(a, b, c, d)
    else:
        model = proximity.REFERENCE_MODEL

    report = palm_control.run_grasp_scenario(scenario, script, model, weights, switch_cfg)

    palm_control.write_command_log(report.commands, os.path.join(out, "commands.log"))
    report.save_csv(os.path.join(out, "frames.csv"))
    files = ["commands.log", "frames.csv"]
    if report.reconstruction is not None:
        fileio.save_height_map(report.reconstruction, os.path.join(out, "contact_height.vtp1"))
        files.append("contact_height.vtp1")

    times = [fr.timestamp_s for fr in report.frames if fr.measured_cm is not None]
    dists = [fr.measured_cm for fr in report.frames if fr.measured_cm is not None]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(times, dists, "b.-", label="measured")
    truth_t = [fr.timestamp_s for fr in report.frames if fr.truth_cm is not None]
    truth_d = [fr.truth_cm for fr in report.frames if fr.truth_cm is not None]
    ax.plot(truth_t, truth_d, "k--", label="truth")
    if times:
        ax.axvline(times[-1], color="r", linestyle=":", label="switch")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("distance (cm)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(os.path.join(out, "distance_vs_time.png"), dpi=100)
    plt.close(fig)
    files.append("distance_vs_time.png")

    _write_manifest(out, "simulate-grasp", args.seed, files, {
        "switch_measured_cm": repr(report.switch_measured_cm),
        "switch_truth_cm": repr(report.switch_truth_cm),
        "contact_time_s": repr(report.contact_time_s),
        "ranging_accuracy": repr(report.ranging_accuracy),
        "final_mode": report.final_state.mode.name,
    })
    if report.switch_measured_cm is None:
        print(f"no switch occurred; ranging accuracy {report.ranging_accuracy:.1%} -> {out}")
    else:
        print(f"switched at measured {report.switch_measured_cm:.3f} cm "
              f"(truth {report.switch_truth_cm:.3f}); contact at t={report.contact_time_s}; "
              f"ranging accuracy {report.ranging_accuracy:.1%} -> {out}")
    return 0


def cmd_render(args):
    out = _out_dir(args, "render")
    rig = default_rig(noise_sigma=args.noise)
    files = []
    if args.what == "press":
        hmap, r_star = tactile_render.make_height_sphere_press(
            args.sphere_radius, args.depth, (args.width / 2, args.height / 2),
            (args.width, args.height), args.pixel_pitch)
        img = tactile_render.render_height(hmap, rig, args.seed)
        ref = tactile_render.render_height(
            HeightMap(np.zeros((args.height, args.width)), args.pixel_pitch),
            rig, args.seed + 1)
        fileio.save_image(img, os.path.join(out, "press.png"))
        fileio.save_image(ref, os.path.join(out, "reference.png"))
        sidecar = dict(tactile_render.rig_to_kv(rig))
        sidecar.update({"sphere_radius_mm": args.sphere_radius, "depth_mm": args.depth,
                        "r_star_mm": r_star, "center_u_px": args.width / 2,
                        "center_v_px": args.height / 2, "pixel_pitch_mm": args.pixel_pitch})
        fileio.write_kv(os.path.join(out, "press.txt"), sidecar)
        files += ["press.png", "reference.png", "press.txt"]
    else:
        hmap = tactile_render.make_height_rough(
            args.grit_scale, args.amplitude, (args.width, args.height),
            args.seed, args.pixel_pitch)
        img = tactile_render.render_height(hmap, rig, args.seed)
        fileio.save_image(img, os.path.join(out, "rough.png"))
        sidecar = dict(tactile_render.rig_to_kv(rig))
        sidecar.update({"grit_scale_mm": args.grit_scale, "amplitude_mm": args.amplitude,
                        "pixel_pitch_mm": args.pixel_pitch})
        fileio.write_kv(os.path.join(out, "rough.txt"), sidecar)
        files += ["rough.png", "rough.txt"]
    _write_manifest(out, "render", args.seed, files)
    print(f"rendered {args.what} -> {out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="vtpalm", description=__doc__)
    parser.add_argument("--seed", type=int, default=42, help="seed echoed into manifests")
    parser.add_argument("--jobs", type=int, default=1, help="worker threads (never changes outputs)")
    parser.add_argument("--out", default=None, help=f"output directory (default ${DATA_DIR_ENV}/<cmd>)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-proximity", help="fit the distance model from a calibration CSV")
    p.add_argument("samples", help="CSV: run_id,speed_cmps,z_world_cm,z_img")
    p.set_defaults(func=cmd_fit_proximity)

    p = sub.add_parser("calibrate-tactile", help="build the gradient dataset and train the regressor")
    p.add_argument("manifest", help="press manifest CSV: image,reference[,cx_px,cy_px,r_star_px]")
    p.add_argument("--sphere-radius", type=float, default=2.5, help="press sphere radius, mm")
    p.add_argument("--pixel-pitch", type=float, default=0.05, help="mm per pixel")
    p.add_argument("--batch-size", type=int, default=1024,
                   help="training minibatch size (more update steps than the library default)")
    p.set_defaults(func=cmd_calibrate_tactile)

    p = sub.add_parser("reconstruct", help="height map from a tactile frame")
    p.add_argument("image")
    p.add_argument("reference")
    p.add_argument("weights")
    p.add_argument("--pixel-pitch", type=float, default=0.05)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("analyze", help="roughness spectra or texture discrimination")
    p.add_argument("images", nargs="+")
    p.add_argument("--mode", choices=("roughness", "texture"), default="roughness")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("simulate-grasp", help="end-to-end approach/switch/contact/grasp run")
    p.add_argument("--config", default=None, help="key=value scenario overrides")
    p.add_argument("--model", default=None, help="model file a,b,c,d (default: reference)")
    p.add_argument("--weights", default=None, help="trained regressor for contact reconstruction")
    p.set_defaults(func=cmd_simulate_grasp)

    p = sub.add_parser("render", help="generate synthetic tactile frames")
    p.add_argument("what", choices=("press", "rough"))
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=192)
    p.add_argument("--pixel-pitch", type=float, default=0.05)
    p.add_argument("--sphere-radius", type=float, default=2.5)
    p.add_argument("--depth", type=float, default=1.0)
    p.add_argument("--grit-scale", type=float, default=0.4)
    p.add_argument("--amplitude", type=float, default=0.05)
    p.add_argument("--noise", type=float, default=0.005)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except VTPalmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
