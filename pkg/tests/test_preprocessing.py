import functools
import shutil

import numpy as np
import pytest

from banis.datagen import EmbryoSpec, generate_dataset, read_manifest
from banis.errors import DataError, ValidationError
from banis.preprocessing import PreprocessConfig, build_splits, preprocess_image

from oracles import bilinear_sample, blur_pixel


@pytest.mark.parametrize("value, expected", [(255, 1.0), (0, -1.0)])
def test_constant_images_hit_the_endpoints(value, expected):
    raw = np.full((512, 512), value, np.uint8)
    out = preprocess_image(raw)
    assert out.shape == (64, 64)
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_checkerboard_matches_per_pixel_oracle():
    yy, xx = np.mgrid[:512, :512]
    raw = np.where(((yy // 6) + (xx // 6)) % 2 == 0, 255, 0).astype(np.uint8)
    cfg = PreprocessConfig(gaussian_sigma=1.0, intermediate_size=128, crop_size=64)
    out = preprocess_image(raw, cfg)

    src = raw.astype(float).tolist()
    blurred = functools.lru_cache(maxsize=None)(lambda r, c: blur_pixel(src, r, c, 1.0))
    top = (128 - 64) // 2
    expected = np.empty((64, 64))
    for y in range(64):
        for x in range(64):
            v = bilinear_sample(blurred, 512, 128, top + y, top + x)
            expected[y, x] = min(max(v / 127.5 - 1.0, -1.0), 1.0)
    assert abs(out.mean() - expected.mean()) < 1e-5
    np.testing.assert_allclose(out, expected, atol=1e-5)


def test_stage_order_and_shapes():
    raw = np.random.default_rng(0).integers(0, 256, (200, 200, 3), dtype=np.uint8)
    out, stages = preprocess_image(raw, PreprocessConfig(), return_stages=True)
    assert list(stages) == ["grayscale", "blur", "resize", "crop", "normalize"]
    assert stages["grayscale"].shape == (200, 200)
    assert stages["resize"].shape == (128, 128)
    assert stages["crop"].shape == (64, 64)
    assert out is stages["normalize"]
    assert out.min() >= -1 and out.max() <= 1
    out2, stages2 = preprocess_image(raw, PreprocessConfig(), return_stages=True)
    for k in stages:
        assert stages[k].tobytes() == stages2[k].tobytes()


def test_rgb_uses_luma_weights():
    raw = np.zeros((128, 128, 3), np.uint8)
    raw[..., 1] = 255
    out = preprocess_image(raw, PreprocessConfig(gaussian_sigma=0))
    np.testing.assert_allclose(out, 0.587 * 255 / 127.5 - 1.0)


def test_normalised_input_is_rejected():
    already = np.zeros((64, 64), np.float64)
    with pytest.raises(ValidationError, match="8-bit"):
        preprocess_image(already)


def test_crop_out_of_bounds_reports_coordinates():
    raw = np.zeros((256, 256), np.uint8)
    with pytest.raises(ValidationError) as err:
        preprocess_image(raw, PreprocessConfig(), crop_center=(10, 64))
    assert err.value.field == "crop_center"
    assert "(10, 64)" in str(err.value)


def test_config_invariants():
    with pytest.raises(ValidationError, match="crop_size"):
        PreprocessConfig(intermediate_size=32, crop_size=64)
    with pytest.raises(ValidationError, match="test_fraction"):
        PreprocessConfig(test_fraction=1.0)


SYNTH = PreprocessConfig(intermediate_size=64, crop_size=64)


@pytest.fixture(scope="module")
def fifty(tmp_path_factory):
    root = tmp_path_factory.mktemp("fifty")
    generate_dataset(EmbryoSpec(seed=21), 50, root)
    return root / "manifest.csv"


def test_split_sizes_fifty_pairs(fifty):
    train, test = build_splits(fifty, SYNTH, seed=5)
    assert (len(train), len(test)) == (45, 5)
    train0, test0 = build_splits(fifty, SYNTH)
    assert (len(train0), len(test0)) == (45, 5)


def test_split_is_deterministic_and_keeps_pairs_together(fifty):
    a = build_splits(fifty, SYNTH, seed=8)
    b = build_splits(fifty, SYNTH, seed=8)
    ids = lambda split: [p.pair_id for p in split]
    assert ids(a[0]) == ids(b[0]) and ids(a[1]) == ids(b[1])
    assert not set(ids(a[0])) & set(ids(a[1]))
    for p in a[0] + a[1]:
        assert p.membrane.shape == p.nuclei.shape == (64, 64)
        assert p.membrane_mask is not None and p.nuclei_mask is not None


def test_half_split_of_two(tmp_path):
    generate_dataset(EmbryoSpec(seed=2), 2, tmp_path)
    train, test = build_splits(tmp_path / "manifest.csv",
                               PreprocessConfig(64, 64, 64, test_fraction=0.5), seed=0)
    assert (len(train), len(test)) == (1, 1)


def test_missing_file_names_pair(tmp_path):
    entries = generate_dataset(EmbryoSpec(seed=2), 3, tmp_path)
    (tmp_path / entries[1].nuclei_path).unlink()
    with pytest.raises(DataError, match=entries[1].pair_id):
        build_splits(tmp_path / "manifest.csv", SYNTH)


def test_mismatched_pair_sizes(tmp_path):
    from PIL import Image
    entries = generate_dataset(EmbryoSpec(seed=2), 2, tmp_path)
    Image.new("L", (32, 32)).save(tmp_path / entries[0].nuclei_path)
    with pytest.raises(ValidationError, match=entries[0].pair_id):
        build_splits(tmp_path / "manifest.csv", SYNTH)
