import numpy as np
import pytest

from vtpalm import DepthMap, GradientField, HeightMap, RasterImage, SegMask
from vtpalm.fileio import (
    CorruptImageError,
    MissingFileError,
    UnsupportedFormatError,
    load_depth_map,
    load_gradient_field,
    load_height_map,
    load_image,
    load_seg_mask,
    read_kv,
    read_plane_csv,
    read_vtp1,
    save_depth_map,
    save_gradient_field,
    save_height_map,
    save_image,
    save_seg_mask,
    write_kv,
    write_plane_csv,
    write_vtp1,
)


def test_pgm_pixel_scaling(tmp_path):
    # 2x2 binary PGM with pixels 0, 255, 128, 64
    path = tmp_path / "tiny.pgm"
    path.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64]))
    img = load_image(path)
    assert img.channels == 1
    expected = np.array([[0.0, 1.0], [128 / 255, 64 / 255]])
    assert np.allclose(img.data[:, :, 0], expected)


def test_png_round_trip_exact(tmp_path):
    rng = np.random.default_rng(0)
    quantized = np.floor(rng.random((9, 7, 3)) * 256) / 255.0
    quantized = np.clip(quantized, 0, 1)
    img = RasterImage(quantized)
    path = tmp_path / "img.png"
    save_image(img, path)
    back = load_image(path)
    assert np.array_equal(back.data, np.floor(img.data * 255 + 0.5) / 255.0)
    # second round trip is byte-identical
    save_image(back, tmp_path / "img2.png")
    assert np.array_equal(load_image(tmp_path / "img2.png").data, back.data)


def test_large_3channel_png_dimensions(tmp_path):
    img = RasterImage(np.zeros((960, 1280, 3)))
    save_image(img, tmp_path / "frame.png")
    back = load_image(tmp_path / "frame.png")
    assert (back.width, back.height, back.channels) == (1280, 960, 3)


def test_save_clamps_out_of_range(tmp_path):
    img = RasterImage(np.array([[[-0.1]], [[1.3]]]))
    save_image(img, tmp_path / "clamp.png")
    back = load_image(tmp_path / "clamp.png")
    assert back.data[0, 0, 0] == 0.0
    assert back.data[1, 0, 0] == 1.0


def test_value_one_saves_as_255(tmp_path):
    save_image(RasterImage(np.array([[[1.0]]])), tmp_path / "one.pgm")
    raw = (tmp_path / "one.pgm").read_bytes()
    assert raw.endswith(bytes([255]))


def test_missing_unsupported_corrupt_are_distinct(tmp_path):
    with pytest.raises(MissingFileError):
        load_image(tmp_path / "nope.png")
    bad = tmp_path / "file.txt"
    bad.write_text("not an image at all")
    with pytest.raises(UnsupportedFormatError):
        load_image(bad)
    trunc = tmp_path / "trunc.pgm"
    trunc.write_bytes(b"P5\n64 64\n255\n" + bytes(16))  # payload far too short
    with pytest.raises(CorruptImageError):
        load_image(trunc)


def test_vtp1_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    planes = [rng.random((5, 8)).astype(np.float32).astype(np.float64) for _ in range(2)]
    path = tmp_path / "field.vtp1"
    write_vtp1(path, planes)
    back = read_vtp1(path)
    assert len(back) == 2
    for a, b in zip(planes, back):
        assert np.array_equal(a, b)


def test_vtp1_bad_magic(tmp_path):
    path = tmp_path / "bad.vtp1"
    path.write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(UnsupportedFormatError):
        read_vtp1(path)


def test_vtp1_partial_plane(tmp_path):
    path = tmp_path / "part.vtp1"
    path.write_bytes(b"VTP1" + (3).to_bytes(4, "little") + (2).to_bytes(4, "little") + bytes(10))
    with pytest.raises(CorruptImageError):
        read_vtp1(path)


def test_typed_vtp1_wrappers(tmp_path):
    rng = np.random.default_rng(2)
    depth = DepthMap(rng.random((4, 6)))
    save_depth_map(depth, tmp_path / "d.vtp1")
    assert np.allclose(load_depth_map(tmp_path / "d.vtp1").values, depth.values, atol=1e-7)

    mask = SegMask((rng.random((4, 6)) > 0.5).astype(np.uint8))
    save_seg_mask(mask, tmp_path / "m.vtp1")
    assert np.array_equal(load_seg_mask(tmp_path / "m.vtp1").values, mask.values)

    grad = GradientField(rng.standard_normal((4, 6)), rng.standard_normal((4, 6)))
    save_gradient_field(grad, tmp_path / "g.vtp1")
    back = load_gradient_field(tmp_path / "g.vtp1")
    assert np.allclose(back.gu, grad.gu, atol=1e-6)
    assert np.allclose(back.gv, grad.gv, atol=1e-6)

    height = HeightMap(rng.standard_normal((4, 6)), 0.05)
    save_height_map(height, tmp_path / "h.vtp1")
    assert np.allclose(load_height_map(tmp_path / "h.vtp1", 0.05).z, height.z, atol=1e-6)


def test_plane_csv_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    planes = [rng.random((3, 4)), rng.random((3, 4))]
    path = tmp_path / "planes.csv"
    write_plane_csv(path, planes)
    back = read_plane_csv(path)
    assert len(back) == 2
    for a, b in zip(planes, back):
        assert np.array_equal(a, b)  # repr round trip is exact for float64


def test_kv_round_trip(tmp_path):
    path = tmp_path / "params.txt"
    write_kv(path, {"beta": 2.5, "alpha": "hello", "n": 7})
    back = read_kv(path)
    assert back == {"alpha": "hello", "beta": "2.5", "n": "7"}
    # deterministic ordering
    assert path.read_text().splitlines()[0].startswith("alpha=")
