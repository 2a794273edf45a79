import numpy as np
import pytest

from vtpalm import MlpConfig, RasterImage, SegMask, infer_gradients, lookup_baseline, train
from vtpalm.gradient_mapper import (
    MlpWeights,
    TrainingError,
    l1_loss_and_gradients,
    load_weights,
    save_weights,
    _init_weights,
)
from vtpalm.tactile_calib import GradientDataset, build_dataset
from conftest import PIXEL_PITCH, SPHERE_R


def toy_dataset(n=512, seed=0, label_fn=None):
    rng = np.random.default_rng(seed)
    inputs = rng.random((n, 5))
    if label_fn is None:
        labels = np.zeros((n, 2))
    else:
        labels = label_fn(inputs)
    return GradientDataset(inputs, labels, np.zeros(n, dtype=np.int64))


def analytic_field(image, center, r_star_mm, clamp=0.95):
    """Reference slopes over the clamped disc, zero elsewhere."""
    h, w = image.height, image.width
    cols, rows = np.meshgrid(np.arange(w), np.arange(h))
    u_mm = (cols - center[0]) * PIXEL_PITCH
    v_mm = (rows - center[1]) * PIXEL_PITCH
    rr = u_mm**2 + v_mm**2
    disc = rr <= (clamp * r_star_mm) ** 2
    s = np.sqrt(np.maximum(SPHERE_R**2 - rr, 1e-12))
    return np.where(disc, u_mm / s, 0.0), np.where(disc, v_mm / s, 0.0), disc


# --- config / weights plumbing ----------------------------------------------


def test_config_validation():
    with pytest.raises(TrainingError):
        MlpConfig(dropout_p=1.0)
    with pytest.raises(TrainingError):
        MlpConfig(learning_rate=0.0)
    with pytest.raises(TrainingError):
        MlpConfig(activation="tanh")
    with pytest.raises(TrainingError):
        MlpConfig(loss="mse")
    assert MlpConfig().layer_sizes == (5, 16, 64, 32, 8, 2)


def test_weights_shape_validation():
    with pytest.raises(TrainingError):
        MlpWeights((np.zeros((5, 4)),), (np.zeros(3),))
    with pytest.raises(TrainingError):
        MlpWeights((np.zeros((5, 4)), np.zeros((3, 2))), (np.zeros(4), np.zeros(2)))


def test_weights_io_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    ws, bs = _init_weights(MlpConfig(seed=1), rng)
    weights = MlpWeights(tuple(ws), tuple(bs))
    path = tmp_path / "w.vtpw"
    save_weights(weights, path)
    back = load_weights(path)
    assert back.layer_sizes == weights.layer_sizes
    for a, b in zip(back.weights, weights.weights):
        assert np.allclose(a, b, atol=1e-6)  # f32 storage


# --- training ----------------------------------------------------------------


def test_train_constant_zero_labels():
    ds = toy_dataset(4096, seed=2)
    weights, log = train(ds, MlpConfig(seed=0, batch_size=256))
    assert min(log.val_l1) < 1e-3


def test_train_empty_dataset():
    with pytest.raises(TrainingError):
        train(GradientDataset(np.empty((0, 5)), np.empty((0, 2)), np.empty(0, dtype=np.int64)))


def test_train_deterministic():
    ds = toy_dataset(2048, seed=3, label_fn=lambda x: x[:, :2] - 0.5)
    cfg = MlpConfig(seed=11, max_epochs=5)
    w1, log1 = train(ds, cfg)
    w2, log2 = train(ds, cfg)
    assert log1.train_l1 == log2.train_l1
    assert log1.val_l1 == log2.val_l1
    for a, b in zip(w1.weights, w2.weights):
        assert np.array_equal(a, b)


def test_early_stop_returns_best_epoch_weights():
    ds = toy_dataset(2048, seed=4, label_fn=lambda x: np.column_stack(
        [np.sin(3 * x[:, 0]), x[:, 1] ** 2]))
    weights, log = train(ds, MlpConfig(seed=5, max_epochs=40, early_stop_patience=3))
    assert log.best_epoch == int(np.argmin(log.val_l1))
    if log.stopped_early:
        assert len(log.val_l1) < 40
    # returned weights are at least as good as the best recorded epoch
    # (output calibration can only improve the validation L1)
    rng = np.random.default_rng(5)
    order = rng.permutation(len(ds))
    n_val = int(round(0.15 * len(ds)))
    val_idx = order[:n_val]
    from vtpalm.gradient_mapper import _forward

    _, out = _forward(list(weights.weights), list(weights.biases),
                      ds.inputs[val_idx])
    val = float(np.mean(np.abs(out - ds.labels[val_idx])))
    assert val <= min(log.val_l1) + 1e-12


def test_output_calibration_never_hurts_validation():
    ds = toy_dataset(4096, seed=7, label_fn=lambda x: np.column_stack(
        [0.8 * x[:, 0] - 0.2, x[:, 1] * x[:, 2]]))
    rng = np.random.default_rng(7)
    order = rng.permutation(len(ds))
    n_val = int(round(0.15 * len(ds)))
    val_idx = order[:n_val]
    from vtpalm.gradient_mapper import _forward

    def val_l1(w):
        _, out = _forward(list(w.weights), list(w.biases), ds.inputs[val_idx])
        return float(np.mean(np.abs(out - ds.labels[val_idx])))

    w_cal, _ = train(ds, MlpConfig(seed=7, max_epochs=20, calibrate_output=True))
    w_raw, _ = train(ds, MlpConfig(seed=7, max_epochs=20, calibrate_output=False))
    assert val_l1(w_cal) <= val_l1(w_raw) + 1e-12


def test_training_log_csv(tmp_path):
    ds = toy_dataset(512, seed=6)
    _, log = train(ds, MlpConfig(seed=0, max_epochs=3))
    path = tmp_path / "log.csv"
    log.save_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,train_l1,val_l1"
    assert len(lines) == 1 + len(log.val_l1)


def test_backprop_matches_finite_differences():
    # fixed 100-sample batch, central differences, step 1e-4; the seed is
    # chosen so no ReLU or L1 kink sits within the step of any probed point
    # (at a kink the two-sided difference measures the subgradient midpoint)
    rng = np.random.default_rng(0)
    cfg = MlpConfig(seed=0)
    ws, bs = _init_weights(cfg, rng)
    x = rng.random((100, 5))
    y = rng.standard_normal((100, 2)) * 0.3
    _, gws, gbs = l1_loss_and_gradients(ws, bs, x, y)
    step = 1e-4
    for li in range(len(ws)):
        for arr, grads in ((ws, gws), (bs, gbs)):
            flat = arr[li].ravel()
            idx = rng.choice(flat.size, size=min(25, flat.size), replace=False)
            num = np.empty(len(idx))
            for j, k in enumerate(idx):
                orig = flat[k]
                flat[k] = orig + step
                lp, _, _ = l1_loss_and_gradients(ws, bs, x, y)
                flat[k] = orig - step
                lm, _, _ = l1_loss_and_gradients(ws, bs, x, y)
                flat[k] = orig
                num[j] = (lp - lm) / (2 * step)
            ana = grads[li].ravel()[idx]
            denom = max(np.linalg.norm(num), 1e-12)
            assert np.linalg.norm(ana - num) / denom < 1e-3


# --- inference ----------------------------------------------------------------


def test_infer_uniform_image_uniform_field():
    rng = np.random.default_rng(13)
    ws, bs = _init_weights(MlpConfig(seed=13), rng)
    weights = MlpWeights(tuple(ws), tuple(bs))
    img = RasterImage(np.full((6, 6, 3), 0.4))
    # kill the positional inputs so every pixel sees identical features
    w0 = np.array(ws[0])
    w0[3:, :] = 0.0
    weights = MlpWeights((w0, *ws[1:]), tuple(bs))
    field = infer_gradients(weights, img)
    assert np.allclose(field.gu, field.gu[0, 0])
    assert np.allclose(field.gv, field.gv[0, 0])


def test_infer_zero_domain_gives_zero_field():
    rng = np.random.default_rng(14)
    ws, bs = _init_weights(MlpConfig(seed=14), rng)
    weights = MlpWeights(tuple(ws), tuple(bs))
    img = RasterImage(np.random.default_rng(0).random((6, 6, 3)))
    field = infer_gradients(weights, img, SegMask(np.zeros((6, 6), dtype=np.uint8)))
    assert np.all(field.gu == 0.0) and np.all(field.gv == 0.0)


def test_infer_requires_3_channels():
    rng = np.random.default_rng(15)
    ws, bs = _init_weights(MlpConfig(seed=15), rng)
    with pytest.raises(TrainingError):
        infer_gradients(MlpWeights(tuple(ws), tuple(bs)), RasterImage(np.zeros((4, 4))))


def test_infer_reproducible_across_runs(trained, holdout_press):
    weights, _ = trained
    a = infer_gradients(weights, holdout_press["image"])
    b = infer_gradients(weights, holdout_press["image"])
    assert np.array_equal(a.gu, b.gu) and np.array_equal(a.gv, b.gv)


# --- quality on the synthetic calibration pipeline ----------------------------


def test_trained_validation_mse_at_most_0_04(trained):
    _, log = trained
    assert log.final_val_mse <= 0.04


def test_trained_field_correlates_with_analytic(trained, holdout_press):
    weights, _ = trained
    img = holdout_press["image"]
    gu_ref, gv_ref, disc = analytic_field(img, holdout_press["center"], holdout_press["r_star"])
    field = infer_gradients(weights, img, SegMask(disc.astype(np.uint8)))
    pred = np.concatenate([field.gu[disc], field.gv[disc]])
    ref = np.concatenate([gu_ref[disc], gv_ref[disc]])
    r = np.corrcoef(pred, ref)[0, 1]
    assert r >= 0.95


def test_lookup_baseline_exact_on_training_sample(press_batch):
    presses, _ = press_batch
    ds = build_dataset(presses[:1])
    press = presses[0]
    field = lookup_baseline(ds, press.image)
    # every sample queried at its own pixel returns its own label
    rng = np.random.default_rng(16)
    for i in map(int, rng.integers(0, len(ds), size=50)):
        s = ds[i]
        col = int(round(s.u * press.image.width))
        row = int(round(s.v * press.image.height))
        assert field.gu[row, col] == s.g_u
        assert field.gv[row, col] == s.g_v


def test_lookup_baseline_close_to_analytic(calibration_dataset, holdout_press):
    img = holdout_press["image"]
    gu_ref, gv_ref, disc = analytic_field(img, holdout_press["center"], holdout_press["r_star"])
    field = lookup_baseline(calibration_dataset, img, SegMask(disc.astype(np.uint8)))
    l1 = 0.5 * (np.abs(field.gu[disc] - gu_ref[disc]) + np.abs(field.gv[disc] - gv_ref[disc]))
    assert float(l1.mean()) < 0.1


def test_mlp_not_far_worse_than_lookup(trained, calibration_dataset, holdout_press):
    weights, _ = trained
    img = holdout_press["image"]
    gu_ref, gv_ref, disc = analytic_field(img, holdout_press["center"], holdout_press["r_star"])
    mask = SegMask(disc.astype(np.uint8))
    mlp = infer_gradients(weights, img, mask)
    base = lookup_baseline(calibration_dataset, img, mask)
    mlp_l1 = float(np.mean(np.abs(np.concatenate([mlp.gu[disc] - gu_ref[disc],
                                                  mlp.gv[disc] - gv_ref[disc]]))))
    base_l1 = float(np.mean(np.abs(np.concatenate([base.gu[disc] - gu_ref[disc],
                                                   base.gv[disc] - gv_ref[disc]]))))
    assert mlp_l1 <= base_l1 + 0.05
