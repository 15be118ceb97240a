import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aedet.data import (
    Dataset,
    SceneSpec,
    generate_scene,
    read_dataset,
    read_ppm,
    render_shape,
    size_bucket,
    tight_box,
    write_dataset,
    write_ppm,
)
from aedet.errors import ConfigError, CorruptDatasetError, DatasetError


def test_zero_objects_is_background_only():
    img, labels = generate_scene(SceneSpec(min_objects=0, max_objects=0), 3)
    assert labels == []
    assert img.shape == (3, 64, 64) and img.dtype == np.float32
    assert 0.0 <= img.min() and img.max() <= 1.0


def test_same_index_bit_identical():
    spec = SceneSpec(seed=5)
    a, la = generate_scene(spec, 17)
    b, lb = generate_scene(spec, 17)
    assert a.tobytes() == b.tobytes() and la == lb
    c, _ = generate_scene(spec, 18)
    assert a.tobytes() != c.tobytes()


def test_pixels_on_8bit_lattice():
    img, _ = generate_scene(SceneSpec(), 0)
    k = img.astype(np.float64) * 255
    assert np.abs(k - np.round(k)).max() < 1e-4


@pytest.mark.parametrize("r,x0,y0", [(3, 10, 20), (8, 0, 0), (1, 62, 62), (12, 40, 5)])
def test_disk_analytic_box(r, x0, y0):
    s = 64
    mask = render_shape("disk", x0, y0, x0 + 2 * r, y0 + 2 * r, s)
    box = tight_box(mask)
    cx, cy = x0 + r, y0 + r
    assert box == (max(0, cx - r), max(0, cy - r), min(s, cx + r), min(s, cy + r))


@settings(max_examples=200, deadline=None)
@given(
    kind=st.sampled_from(["rectangle", "disk", "triangle"]),
    x0=st.integers(0, 50),
    y0=st.integers(0, 50),
    w=st.integers(3, 30),
    h=st.integers(3, 30),
)
def test_label_tightness(kind, x0, y0, w, h):
    mask = render_shape(kind, x0, y0, min(64, x0 + w), min(64, y0 + h), 64)
    box = tight_box(mask)
    assert box is not None
    bx0, by0, bx1, by1 = box
    assert not mask[:, :bx0].any() and not mask[:, bx1:].any()
    assert not mask[:by0].any() and not mask[by1:].any()
    # shrinking any side by one pixel drops a foreground pixel
    assert mask[by0:by1, bx0].any() and mask[by0:by1, bx1 - 1].any()
    assert mask[by0, bx0:bx1].any() and mask[by1 - 1, bx0:bx1].any()


@pytest.mark.parametrize("max_iou", [0.0, 0.5])
def test_labels_inside_image_and_no_heavy_overlap(max_iou):
    spec = SceneSpec(max_iou=max_iou)
    for i in range(200):
        _, labels = generate_scene(spec, i)
        assert spec.min_objects <= len(labels) <= spec.max_objects
        for b in labels:
            b.validate()
            x0, y0, x1, y1 = b.corners()
            assert 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1
        for j, a in enumerate(labels):
            for b in labels[j + 1 :]:
                ax0, ay0, ax1, ay1 = a.corners()
                bx0, by0, bx1, by1 = b.corners()
                iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
                ih = max(0.0, min(ay1, by1) - max(ay0, by0))
                inter = iw * ih
                assert inter / (a.area + b.area - inter) <= max_iou + 1e-12


def test_size_buckets_populated():
    spec = SceneSpec()
    counts = {"small": 0, "medium": 0, "large": 0}
    for i in range(1000):
        for b in generate_scene(spec, i)[1]:
            counts[size_bucket(b.area)] += 1
    total = sum(counts.values())
    for name, c in counts.items():
        assert c / total >= 0.10, (name, c / total)


def test_size_bucket_edges():
    assert size_bucket(0.0099) == "small"
    assert size_bucket(0.01) == "medium"
    assert size_bucket(0.09) == "medium"
    assert size_bucket(0.0901) == "large"


def test_spec_validation():
    with pytest.raises(ConfigError):
        SceneSpec(min_objects=3, max_objects=1)
    with pytest.raises(ConfigError):
        SceneSpec(classes=["hexagon"])
    with pytest.raises(ConfigError):
        SceneSpec(max_iou=0.6)
    with pytest.raises(ConfigError):
        SceneSpec.from_dict({"seed": 1, "colour": "red"})
    spec = SceneSpec(seed=9, noise=0.1)
    assert SceneSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


# --- on disk -----------------------------------------------------------------


def test_ppm_round_trip(tmp_path):
    img, _ = generate_scene(SceneSpec(), 4)
    write_ppm(tmp_path / "x.ppm", img)
    back = read_ppm(tmp_path / "x.ppm")
    assert back.tobytes() == img.tobytes()
    assert (tmp_path / "x.ppm").read_bytes().startswith(b"P6\n64 64\n255\n")


def test_write_read_round_trip(tmp_path):
    spec = SceneSpec(seed=2)
    write_dataset(spec, 12, tmp_path)
    ds = read_dataset(tmp_path)
    mem = Dataset.generate(spec, 12)
    assert len(ds) == 12
    assert ds.labels == mem.labels
    np.testing.assert_allclose(ds.images, mem.images, atol=0.5 / 255)
    assert ds.spec == spec
    assert sorted(p.name for p in tmp_path.iterdir())[:2] == ["000000.ppm", "000001.ppm"]


def test_count_zero(tmp_path):
    manifest = write_dataset(SceneSpec(), 0, tmp_path)
    assert manifest["count"] == 0
    assert not list(tmp_path.glob("*.ppm"))
    assert len(read_dataset(tmp_path)) == 0


def test_identical_checksums(tmp_path):
    a = write_dataset(SceneSpec(seed=4), 6, tmp_path / "a")
    b = write_dataset(SceneSpec(seed=4), 6, tmp_path / "b")
    c = write_dataset(SceneSpec(seed=5), 6, tmp_path / "c")
    assert a["checksum"] == b["checksum"] != c["checksum"]
    assert len(a["checksum"]) == 64


def test_tampered_image_is_named(tmp_path):
    write_dataset(SceneSpec(), 5, tmp_path)
    target = tmp_path / "000003.ppm"
    raw = bytearray(target.read_bytes())
    raw[-1] ^= 0xFF
    target.write_bytes(bytes(raw))
    with pytest.raises(CorruptDatasetError, match="000003.ppm"):
        read_dataset(tmp_path)


def test_tampered_labels(tmp_path):
    write_dataset(SceneSpec(), 3, tmp_path)
    (tmp_path / "labels.json").write_text("[[], [], []]")
    with pytest.raises(CorruptDatasetError, match="labels.json"):
        read_dataset(tmp_path)


def test_missing_file(tmp_path):
    write_dataset(SceneSpec(), 3, tmp_path)
    (tmp_path / "000001.ppm").unlink()
    with pytest.raises(DatasetError, match="000001.ppm"):
        read_dataset(tmp_path)
    with pytest.raises(DatasetError):
        read_dataset(tmp_path / "nowhere")


def test_dataset_length_mismatch():
    with pytest.raises(DatasetError):
        Dataset(np.zeros((2, 3, 8, 8), np.float32), [[]])


def test_subset_and_seed_split():
    spec = SceneSpec()
    tr = Dataset.generate(spec, 4)
    va = Dataset.generate(replace(spec, seed=1), 4)
    assert tr.images.tobytes() != va.images.tobytes()
    sub = tr.subset([2, 0])
    assert sub.labels == [tr.labels[2], tr.labels[0]]
