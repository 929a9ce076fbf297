import hashlib
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image
from scipy import ndimage

from banis.datagen import (EmbryoSpec, generate_dataset, generate_pair, read_manifest,
                           split_indices)
from banis.errors import DataError, ValidationError
from banis.pngio import to_uint8

from oracles import dice_loops


def test_same_seed_is_bit_identical():
    p1 = generate_pair(EmbryoSpec(seed=7))
    p2 = generate_pair(EmbryoSpec(seed=7))
    for name in ("membrane_image", "nuclei_image", "membrane_mask", "nuclei_mask"):
        assert getattr(p1, name).tobytes() == getattr(p2, name).tobytes()


def test_different_seeds_differ():
    p1 = generate_pair(EmbryoSpec(seed=1))
    p2 = generate_pair(EmbryoSpec(seed=2))
    assert not np.array_equal(p1.membrane_mask, p2.membrane_mask)


def test_single_noiseless_cell_is_one_contour_and_one_disc():
    p = generate_pair(EmbryoSpec(cell_count=1, noise_sigma=0.0, seed=11))
    _, n_ring = ndimage.label(p.membrane_mask)
    _, n_background = ndimage.label(~p.membrane_mask)
    assert n_ring == 1
    # a closed contour splits the rest of the canvas into inside and outside
    assert n_background == 2
    _, n_disc = ndimage.label(p.nuclei_mask)
    assert n_disc == 1
    assert not (p.membrane_mask & p.nuclei_mask).any()


@pytest.mark.parametrize("seed", range(0, 200, 7))
def test_masks_are_disjoint_by_brute_force_dice(seed):
    p = generate_pair(EmbryoSpec(cell_count=3, seed=seed))
    assert dice_loops(p.membrane_mask.tolist(), p.nuclei_mask.tolist()) < 0.05


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 63 - 1), cells=st.integers(1, 4),
       noise=st.floats(0.0, 0.5))
def test_generation_invariants(seed, cells, noise):
    p = generate_pair(EmbryoSpec(cell_count=cells, noise_sigma=noise, seed=seed))
    assert p.membrane_image.shape == p.nuclei_image.shape == (64, 64)
    for img in (p.membrane_image, p.nuclei_image):
        assert img.min() >= -1.0 and img.max() <= 1.0
    assert not (p.membrane_mask & p.nuclei_mask).any()
    # every nucleus centroid sits inside some cell (membrane holes filled in)
    cells_region = ndimage.binary_fill_holes(p.membrane_mask) & ~p.membrane_mask
    labels, n = ndimage.label(p.nuclei_mask)
    assert n == cells
    for cy, cx in ndimage.center_of_mass(p.nuclei_mask, labels, range(1, n + 1)):
        assert cells_region[int(round(cy)), int(round(cx))]


def test_membrane_image_draws_only_boundaries():
    p = generate_pair(EmbryoSpec(noise_sigma=0.0, seed=5))
    bright = p.membrane_image > 0
    # bright pixels coincide with the band, up to antialiased edges
    assert (bright & ~ndimage.binary_dilation(p.membrane_mask)).sum() == 0
    assert (p.nuclei_image > 0)[p.membrane_mask].sum() == 0


@pytest.mark.parametrize("field, spec", [
    ("cell_count", EmbryoSpec(cell_count=0)),
    ("nucleus_radius_range", EmbryoSpec(nucleus_radius_range=(5.0, 3.0))),
    ("canvas_size", EmbryoSpec(canvas_size=8)),
    ("noise_sigma", EmbryoSpec(noise_sigma=1.0)),
    ("nucleus_radius_range", EmbryoSpec(canvas_size=16, nucleus_radius_range=(6.0, 8.0))),
])
def test_invalid_spec_names_field(field, spec):
    with pytest.raises(ValidationError) as err:
        generate_pair(spec)
    assert err.value.field == field
    assert field in str(err.value)


def _tree_digest(root):
    h = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            h.update(str(path.relative_to(root)).encode())
            h.update(path.read_bytes())
    return h.hexdigest()


def test_dataset_split_ten_pairs(tmp_path):
    entries = generate_dataset(EmbryoSpec(seed=3), 10, tmp_path)
    assert [e.split for e in entries].count("train") == 9
    assert [e.split for e in entries].count("test") == 1
    assert read_manifest(tmp_path / "manifest.csv") == entries


def test_dataset_single_pair_goes_to_train(tmp_path):
    entries = generate_dataset(EmbryoSpec(seed=3), 1, tmp_path)
    assert [e.split for e in entries] == ["train"]


def test_dataset_is_byte_reproducible(tmp_path):
    generate_dataset(EmbryoSpec(seed=9), 100, tmp_path / "a")
    generate_dataset(EmbryoSpec(seed=9), 100, tmp_path / "b")
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")


def test_dataset_file_format(tmp_path):
    entries = generate_dataset(EmbryoSpec(seed=4), 2, tmp_path)
    line = (tmp_path / "manifest.csv").read_text().splitlines()[0]
    assert len(line.split(",")) == 7
    e = entries[0]
    pair = generate_pair(replace(EmbryoSpec(seed=4), seed=e.seed))
    png = np.array(Image.open(tmp_path / e.membrane_path))
    assert png.dtype == np.uint8
    np.testing.assert_array_equal(png, to_uint8(pair.membrane_image))
    mask = np.array(Image.open(tmp_path / e.nuclei_mask_path))
    assert set(np.unique(mask)) <= {0, 255}
    np.testing.assert_array_equal(mask == 255, pair.nuclei_mask)


def test_dataset_rejects_zero_pairs(tmp_path):
    with pytest.raises(ValidationError, match="n_pairs"):
        generate_dataset(EmbryoSpec(), 0, tmp_path)


def test_dataset_io_failure_names_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(DataError, match="file"):
        generate_dataset(EmbryoSpec(), 2, blocker)


def test_split_indices_floor_rule():
    train, test = split_indices(50, 0.1, seed=0)
    assert len(test) == 5 and len(train) == 45
    assert sorted(train + test) == list(range(50))
    assert split_indices(50, 0.1, seed=0) == (train, test)
