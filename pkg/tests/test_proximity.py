import numpy as np
import pytest

from vtpalm import (
    REFERENCE_MODEL,
    CalibrationSample,
    DepthMap,
    DoubleExpModel,
    FitConfig,
    SegMask,
    evaluate_tracking,
    fit_alternative_models,
    fit_double_exp,
    mask_mean_depth,
    predict_distance,
)
from vtpalm.proximity import (
    CsvFormatError,
    EmptyMaskError,
    InsufficientSamplesError,
    ProximityError,
    read_samples_csv,
    write_samples_csv,
)
from vtpalm.scenesim import invert_model


def make_samples(xs, ys, **kw):
    return [CalibrationSample(z_img=float(x), z_world=float(y), **kw) for x, y in zip(xs, ys)]


# --- model + mask mean ------------------------------------------------------


def test_model_rejects_nonpositive_rates():
    with pytest.raises(ProximityError):
        DoubleExpModel(a=1.0, b=0.0, c=0.0, d=1.0)
    with pytest.raises(ProximityError):
        DoubleExpModel(a=1.0, b=1.0, c=0.0, d=-2.0)


def test_predict_simple_exponential():
    m = DoubleExpModel(a=2.0, b=1.0, c=0.0, d=1.0)
    assert predict_distance(m, 0.0) == pytest.approx(2.0, abs=1e-15)


def test_predict_reference_model_at_10():
    # direct evaluation of the double-exponential with the reference coefficients
    assert predict_distance(REFERENCE_MODEL, 10.0) == pytest.approx(2.0122456698295506, abs=1e-12)


def test_predict_strictly_decreasing_for_positive_coeffs():
    rng = np.random.default_rng(0)
    for _ in range(50):
        m = DoubleExpModel(a=rng.uniform(0.1, 100), b=rng.uniform(0.01, 5),
                           c=rng.uniform(0.1, 100), d=rng.uniform(0.01, 5))
        xs = np.sort(rng.uniform(0, 20, size=8))
        ys = m.predict(xs)
        assert np.all(np.diff(ys) < 0)


def test_mask_mean_constant_depth():
    depth = DepthMap(np.full((4, 4), 7.0))
    mask = SegMask(np.eye(4, dtype=np.uint8))
    assert mask_mean_depth(depth, mask) == 7.0


def test_mask_mean_two_pixels():
    depth = DepthMap(np.array([[1.0, 3.0], [9.0, 9.0]]))
    mask = SegMask(np.array([[1, 1], [0, 0]]))
    assert mask_mean_depth(depth, mask) == 2.0


def test_mask_mean_empty_mask_error():
    with pytest.raises(EmptyMaskError):
        mask_mean_depth(DepthMap(np.ones((3, 3))), SegMask(np.zeros((3, 3), dtype=np.uint8)))


def test_mask_mean_permutation_and_extension_invariance():
    rng = np.random.default_rng(1)
    vals = rng.random((5, 5)) * 4
    mask = (rng.random((5, 5)) > 0.5).astype(np.uint8)
    mask[0, 0] = 1
    mean = mask_mean_depth(DepthMap(vals), SegMask(mask))
    perm = rng.permutation(25)
    assert mask_mean_depth(DepthMap(vals.ravel()[perm].reshape(5, 5)),
                           SegMask(mask.ravel()[perm].reshape(5, 5))) == pytest.approx(mean, abs=1e-12)
    # enlarge the mask with a pixel equal to the current mean
    vals2, mask2 = vals.copy(), mask.copy()
    free = np.argwhere(mask2 == 0)[0]
    vals2[free[0], free[1]] = mean
    mask2[free[0], free[1]] = 1
    assert mask_mean_depth(DepthMap(vals2), SegMask(mask2)) == pytest.approx(mean, abs=1e-12)


# --- fitting ----------------------------------------------------------------


def test_fit_recovers_noiseless_predictions():
    xs = np.arange(6.0, 16.5, 1.0)
    ys = REFERENCE_MODEL.predict(xs)
    report = fit_double_exp(make_samples(xs, ys), FitConfig(domain_min_cm=0.0))
    grid = np.linspace(6, 16, 201)
    rmse = np.sqrt(np.mean((report.model.predict(grid) - REFERENCE_MODEL.predict(grid)) ** 2))
    assert rmse < 1e-6
    assert report.converged


def test_fit_constant_targets():
    xs = np.arange(6.0, 16.5, 1.0)
    report = fit_double_exp(make_samples(xs, np.full_like(xs, 30.0)), FitConfig(domain_min_cm=0.0))
    assert np.max(np.abs(report.model.predict(xs) - 30.0)) < 1e-6


def test_fit_noisy_bench_scale_statistics():
    rng = np.random.default_rng(7)
    dists = np.array([10, 15, 20, 25, 30, 35, 40, 45, 50], dtype=float)
    samples = []
    for run in range(22):
        for dw in dists:
            samples.append(CalibrationSample(
                z_img=invert_model(REFERENCE_MODEL, dw),
                z_world=float(np.clip(dw + rng.normal(0, 2.0), 0, 50)),
                run_id=f"run{run}"))
    report = fit_double_exp(samples)
    assert report.r_squared >= 0.95
    assert report.rmse <= 2.5


def test_fit_insufficient_samples():
    xs = [1.0, 2.0, 3.0]
    with pytest.raises(InsufficientSamplesError):
        fit_double_exp(make_samples(xs, [30, 20, 10]))
    xs = [1.0, 2.0] * 4  # 8 samples, only 2 distinct
    with pytest.raises(InsufficientSamplesError):
        fit_double_exp(make_samples(xs, np.linspace(10, 40, 8)))


def test_exhausted_iteration_budget_flagged_not_raised():
    rng = np.random.default_rng(5)
    xs = np.linspace(2, 12, 40)
    ys = np.clip(REFERENCE_MODEL.predict(xs) + rng.normal(0, 1.0, 40), 0, 50)
    report = fit_double_exp(make_samples(xs, ys), FitConfig(domain_min_cm=0.0, max_nfev=3))
    assert not report.converged
    assert np.isfinite(report.rmse)


def test_r_squared_matches_residual_recomputation():
    rng = np.random.default_rng(3)
    xs = np.linspace(3, 12, 30)
    ys = REFERENCE_MODEL.predict(xs) + rng.normal(0, 0.5, size=30)
    ys = np.clip(ys, 0, 50)
    report = fit_double_exp(make_samples(xs, ys), FitConfig(domain_min_cm=0.0))
    y = np.array([report.model.predict(x) for x in xs]) - report.residuals
    ss_res = np.sum(report.residuals**2)
    ss_tot = np.sum((y - y.mean()) ** 2)
    assert report.r_squared == pytest.approx(1 - ss_res / ss_tot, abs=1e-12)


def test_alternatives_single_exp_nested_sanity():
    xs = np.arange(6.0, 16.5, 1.0)
    ys = 40 * np.exp(-0.3 * xs) + 2.0
    samples = make_samples(xs, ys)
    cfg = FitConfig(domain_min_cm=0.0)
    double = fit_double_exp(samples, cfg)
    families = {f.family: f for f in fit_alternative_models(samples, cfg)}
    single = families["single_exponential"].report
    assert single.rmse <= double.rmse + 1e-6


def test_alternatives_inverse_exact_on_4_points():
    xs = np.array([1.0, 2.0, 3.0, 4.0])
    ys = 5.0 / xs
    families = {f.family: f for f in fit_alternative_models(make_samples(xs, ys),
                                                            FitConfig(domain_min_cm=0.0))}
    inv = families["inverse_proportional"].report
    assert inv.rmse < 1e-8


def test_alternatives_double_exp_wins_on_its_own_data():
    rng = np.random.default_rng(11)
    dists = np.array([10, 15, 20, 25, 30, 35, 40, 45, 50], dtype=float)
    samples = []
    for run in range(22):
        for dw in dists:
            samples.append(CalibrationSample(
                z_img=invert_model(REFERENCE_MODEL, dw),
                z_world=float(np.clip(dw + rng.normal(0, 2.0), 0, 50)),
                run_id=f"r{run}"))
    double = fit_double_exp(samples)
    for fam in fit_alternative_models(samples):
        assert fam.report is not None
        assert double.rmse <= fam.report.rmse + 1e-6


def test_alternatives_never_abort_batch():
    # z_img = 0 breaks the power law; the other families still report
    xs = np.array([0.0, 1.0, 2.0, 3.0, 4.0])
    ys = np.array([40.0, 30.0, 22.0, 17.0, 13.0])
    out = fit_alternative_models(make_samples(xs, ys), FitConfig(domain_min_cm=0.0))
    by_name = {f.family: f for f in out}
    assert by_name["power_law"].report is None
    assert by_name["power_law"].error
    assert by_name["single_exponential"].report is not None
    assert by_name["inverse_proportional"].report is not None


def test_fit_never_loses_to_alternatives_on_double_exp_data():
    xs = np.linspace(4, 16, 25)
    ys = REFERENCE_MODEL.predict(xs)
    samples = make_samples(xs, np.clip(ys, 0, 50))
    cfg = FitConfig(domain_min_cm=0.0)
    double = fit_double_exp(samples, cfg)
    for fam in fit_alternative_models(samples, cfg):
        if fam.report is not None:
            assert double.rmse <= fam.report.rmse + 1e-6


# --- tracking ---------------------------------------------------------------


def _tracking_sequence(truths, model, mask_side=6, noise=None, seed=0):
    rng = np.random.default_rng(seed)
    frames = []
    for truth in truths:
        z = invert_model(model, truth)
        depth = np.zeros((12, 12))
        depth[3:3 + mask_side, 3:3 + mask_side] = z
        if noise:
            depth[3:3 + mask_side, 3:3 + mask_side] += rng.normal(0, noise, (mask_side, mask_side))
            depth = np.clip(depth, 0, None)
        mask = np.zeros((12, 12), dtype=np.uint8)
        mask[3:3 + mask_side, 3:3 + mask_side] = 1
        frames.append((DepthMap(depth), SegMask(mask), float(truth)))
    return frames


def test_tracking_exact_inverse_round_trip():
    frames = _tracking_sequence(np.linspace(50, 10, 41), REFERENCE_MODEL)
    report = evaluate_tracking(REFERENCE_MODEL, frames)
    assert report.mae < 1e-6
    assert len(report.checkpoint_errors) == 9


def test_tracking_reports_offending_frame():
    frames = _tracking_sequence([50.0, 40.0], REFERENCE_MODEL)
    depth, _, truth = frames[1]
    frames[1] = (depth, SegMask(np.zeros((12, 12), dtype=np.uint8)), truth)
    with pytest.raises(EmptyMaskError, match="frame 1"):
        evaluate_tracking(REFERENCE_MODEL, frames)


def test_tracking_rejects_empty_sequence():
    with pytest.raises(ProximityError):
        evaluate_tracking(REFERENCE_MODEL, [])


# --- CSV --------------------------------------------------------------------


def test_samples_csv_round_trip(tmp_path):
    samples = make_samples([1.5, 2.5], [40.0, 20.0], speed=4.0, run_id="a")
    path = tmp_path / "cal.csv"
    write_samples_csv(samples, path)
    back = read_samples_csv(path)
    assert back == samples


def test_samples_csv_reports_bad_line(tmp_path):
    path = tmp_path / "cal.csv"
    path.write_text("run_id,speed_cmps,z_world_cm,z_img\nrun0,4.0,40.0,1.5\nrun1,oops,30.0,2.0\n")
    with pytest.raises(CsvFormatError, match=":3"):
        read_samples_csv(path)


def test_samples_csv_empty_file(tmp_path):
    path = tmp_path / "cal.csv"
    path.write_text("run_id,speed_cmps,z_world_cm,z_img\n")
    with pytest.raises(InsufficientSamplesError):
        read_samples_csv(path)
