import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from instance_i2i.data_model import Category, ImageSample, InstanceBox, validate_sample
from instance_i2i.datasets import (
    DatasetManifest,
    ImageRecord,
    ManifestError,
    MissingFileError,
    SyntheticSceneSpec,
    crop_instances,
    generate_synthetic,
    half_scale,
    hue_offset,
    load_manifest,
    mean_background_hue,
    merge_manifests,
    random_crop,
    read_image,
    resize_short_side,
    save_manifest,
    split,
    to_uint8,
    write_image,
)

from conftest import X, make_sample


class FixedRng:
    """Stands in for a numpy Generator whose integer draws are known."""

    def __init__(self, *values):
        self.values = list(values)

    def integers(self, lo, hi=None):
        return self.values.pop(0)


def _write_fixture(tmp_path, n=4, boxes=None):
    (tmp_path / "img").mkdir()
    images, anns = [], []
    for i in range(n):
        Image.fromarray(np.full((12, 16, 3), 40 * i, dtype=np.uint8)).save(tmp_path / "img" / f"{i}.png")
        images.append({"id": f"im{i}", "file": f"img/{i}.png", "width": 16, "height": 12,
                       "domain": "sunny" if i % 2 == 0 else "night"})
        anns.append({"image_id": f"im{i}", "bbox": [1, 1, 4, 3], "category": "car"})
    doc = {"domains": ["sunny", "night"], "images": images, "annotations": boxes if boxes is not None else anns}
    path = tmp_path / "annotations.json"
    path.write_text(json.dumps(doc, indent=1))
    return path


def _manifest_of(n):
    recs = tuple(ImageRecord(f"i{k:03d}", None, 4, 4, "a") for k in range(n))
    return DatasetManifest(None, ("a", "b"), recs)


# -- manifests ----------------------------------------------------------------


def test_load_four_image_fixture(tmp_path):
    m = load_manifest(_write_fixture(tmp_path))
    assert len(m) == 4
    s = m.load("im1")
    assert s.domain.name == "night" and s.domain.index == 1
    assert s.pixels.shape == (3, 12, 16)
    assert s.boxes == (InstanceBox(1, 1, 4, 3, Category.CAR),)
    assert validate_sample(s) == []
    # directory form works too
    assert load_manifest(tmp_path).ids == m.ids


def test_annotation_to_absent_image(tmp_path):
    path = _write_fixture(tmp_path, boxes=[{"image_id": "ghost", "bbox": [0, 0, 2, 2]}])
    with pytest.raises(MissingFileError, match="ghost"):
        load_manifest(path)


def test_missing_image_file_named(tmp_path):
    path = _write_fixture(tmp_path)
    (tmp_path / "img" / "2.png").unlink()
    with pytest.raises(MissingFileError, match="2.png"):
        load_manifest(path)


def test_negative_width_names_the_box(tmp_path):
    path = _write_fixture(tmp_path, boxes=[{"image_id": "im0", "bbox": [1, 1, -3, 2]}])
    with pytest.raises(ManifestError, match=r"annotations\[0\]\.bbox.*width"):
        load_manifest(path)


def test_json_syntax_error_gives_line(tmp_path):
    p = tmp_path / "annotations.json"
    p.write_text('{\n "images": [\n  {,\n ]\n}')
    with pytest.raises(ManifestError, match="line 3"):
        load_manifest(p)


def test_save_load_round_trip(tmp_path):
    x, y = generate_synthetic(SyntheticSceneSpec(image_size=16, n_images=3, object_size=(4, 8), seed=1))
    merged = merge_manifests(x, y)
    loaded = load_manifest(save_manifest(merged, tmp_path / "corpus"))
    assert loaded.ids == merged.ids
    for r in merged.records:
        a, b = merged.load(r.id), loaded.load(r.id)
        assert a.boxes == b.boxes
        # 8-bit quantisation is the only loss
        assert np.abs(a.pixels - b.pixels).max() <= 1 / 127.5 + 1e-6


def test_image_byte_mapping(tmp_path):
    px = np.zeros((3, 1, 3), dtype=np.float32)
    px[:, 0, 0], px[:, 0, 2] = -1.0, 1.0
    assert to_uint8(px)[0].tolist() == [[0] * 3, [128] * 3, [255] * 3]
    write_image(px, tmp_path / "a.png")
    assert np.array_equal(read_image(tmp_path / "a.png"), np.asarray(to_uint8(px), np.float32).transpose(2, 0, 1)
                          / 127.5 - 1)


# -- split ----------------------------------------------------------------------


@pytest.mark.parametrize("n,expected", [(100, (85, 15)), (1, (1, 0)), (10, (9, 1)), (0, (0, 0))])
def test_split_sizes(n, expected):
    train, test = split(_manifest_of(n), seed=3)
    assert (len(train), len(test)) == expected


@given(n=st.integers(0, 60), seed=st.integers(0, 2**32 - 1))
def test_split_is_a_deterministic_partition(n, seed):
    m = _manifest_of(n)
    train, test = split(m, seed)
    assert set(train) | set(test) == set(m.ids) and not set(train) & set(test)
    assert split(m, seed) == (train, test)


# -- geometry -------------------------------------------------------------------


def test_crop_upsamples_each_box():
    s = make_sample(64, boxes=((5, 5, 30, 30), (40, 1, 8, 10)), sid="s")
    crops = crop_instances(s, 120)
    assert [c.pixels.shape for c in crops] == [(3, 120, 120)] * 2
    assert [c.id for c in crops] == ["s#obj0", "s#obj1"]
    assert all(c.boxes == () and c.domain == X for c in crops)
    assert crop_instances(make_sample(boxes=()), 8) == []


def test_crop_of_exact_size_is_identity():
    s = make_sample(32, boxes=((3, 4, 16, 16),))
    (crop,) = crop_instances(s, 16)
    np.testing.assert_array_equal(crop.pixels, s.pixels[:, 4:20, 3:19])


def test_resize_short_side_landscape():
    s = ImageSample(np.zeros((3, 72, 108), np.float32), X)
    out = resize_short_side(s, 36)
    assert (out.height, out.width) == (36, 54)
    assert resize_short_side(out, 36) is out


def test_resize_short_side_boxes_hand_computed():
    # 100 tall, 50 wide; factor 7.2
    s = ImageSample(np.zeros((3, 100, 50), np.float32), X, (InstanceBox(10, 20, 30, 70), InstanceBox(45, 90, 5, 10)))
    out = resize_short_side(s, 360)
    assert (out.height, out.width) == (720, 360)
    assert out.boxes == (InstanceBox(72, 144, 216, 504), InstanceBox(324, 648, 36, 72))
    assert validate_sample(out) == []


def test_random_crop_whole_image():
    s = make_sample(16, boxes=((1, 1, 4, 4),))
    out = random_crop(s, 16, np.random.default_rng(0))
    np.testing.assert_array_equal(out.pixels, s.pixels)
    assert out.boxes == s.boxes


def test_random_crop_box_rules():
    s = make_sample(20, boxes=((4, 0, 10, 5), (12, 12, 4, 4), (8, 6, 10, 2)))
    out = random_crop(s, 10, FixedRng(0, 0))
    # first box keeps 6 of 10 columns (60%) and is clipped; second lies outside;
    # third keeps 2 of 10 columns (20%) and is dropped
    assert out.boxes == (InstanceBox(4, 0, 6, 5),)
    np.testing.assert_array_equal(out.pixels, s.pixels[:, :10, :10])


def test_random_crop_too_small():
    with pytest.raises(ValueError):
        random_crop(make_sample(8), 10, np.random.default_rng(0))


def test_half_scale_shapes_and_constants():
    s = ImageSample(np.full((3, 64, 64), 0.25, np.float32), X, (InstanceBox(10, 12, 20, 7),), "a")
    h = half_scale(s)
    assert h.pixels.shape == (3, 32, 32) and h.id == "a@half"
    np.testing.assert_allclose(h.pixels, 0.25, atol=1e-7)
    assert h.boxes == (InstanceBox(5, 6, 10, 4),)
    assert half_scale(ImageSample(np.zeros((3, 9, 7), np.float32), X)).pixels.shape == (3, 4, 3)


def test_half_scale_linear_ramp():
    a, b = 0.01, -0.3
    ramp = (a * np.arange(64) + b).astype(np.float64)
    s = ImageSample(np.broadcast_to(ramp, (3, 64, 64)), X)
    out = half_scale(s).pixels
    # each output column sits halfway between two source columns
    expected = a * (2 * np.arange(32) + 0.5) + b
    np.testing.assert_allclose(out[0, 5], expected, atol=1e-6)
    assert out[0, 0, -1] - out[0, 0, 0] == pytest.approx(a * 62, abs=1e-5)


@settings(max_examples=40, deadline=None)
@given(
    h=st.integers(8, 40),
    w=st.integers(8, 40),
    target=st.integers(4, 50),
    seed=st.integers(0, 1000),
)
def test_geometry_preserves_box_validity(h, w, target, seed):
    rng = np.random.default_rng(seed)
    boxes = []
    for _ in range(3):
        bw, bh = int(rng.integers(1, w + 1)), int(rng.integers(1, h + 1))
        boxes.append(InstanceBox(int(rng.integers(0, w - bw + 1)), int(rng.integers(0, h - bh + 1)), bw, bh))
    s = ImageSample(np.zeros((3, h, w), np.float32), X, tuple(boxes))
    r = resize_short_side(s, target)
    assert min(r.height, r.width) == target and validate_sample(r) == []
    assert validate_sample(half_scale(s)) == []
    size = min(h, w)
    assert validate_sample(random_crop(s, size, rng)) == []


# -- synthetic corpus ---------------------------------------------------------------


def test_synthetic_is_deterministic():
    spec = SyntheticSceneSpec(seed=7, n_images=5)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    for ma, mb in zip(a, b):
        assert ma.records == mb.records
        for k in ma.ids:
            assert np.array_equal(ma.pixels[k], mb.pixels[k])


def test_synthetic_one_object_each():
    x, y = generate_synthetic(SyntheticSceneSpec(n_objects=(1, 1), n_images=10))
    assert all(len(r.boxes) == 1 for r in x.records + y.records)
    assert all(validate_sample(s) == [] for s in x.samples() + y.samples())


def test_synthetic_palettes_separate():
    x, y = generate_synthetic(SyntheticSceneSpec(n_images=100, seed=7))
    hx = np.array([mean_background_hue(s.pixels, s.boxes) for s in x.samples()])
    hy = np.array([mean_background_hue(s.pixels, s.boxes) for s in y.samples()])
    pooled = np.sqrt((hx.var() + hy.var()) / 2)
    assert abs(hue_offset(hx.mean(), hy.mean())) > 3 * pooled


def test_hue_offset_wraps():
    assert hue_offset(0.95, 0.05) == pytest.approx(-0.1)
    assert hue_offset(0.05, 0.95) == pytest.approx(0.1)
