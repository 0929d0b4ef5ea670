import numpy as np
import pytest
from scipy import stats

from ccpc import shapes
from ccpc.shapes import (
    DatasetFormatError,
    DegenerateLabelError,
    LabeledCloud,
    ShapeFamily,
    dimension_label,
    part_ratio_label,
    read_dataset,
    sample_shape,
    write_dataset,
)


# ---------------------------------------------------------------------------
# dimension labels

def test_dimension_label_unit_cube_corners():
    corners = np.array(np.meshgrid([0, 1], [0, 1], [0, 1])).reshape(3, -1).T.astype(float)
    np.testing.assert_array_equal(dimension_label(corners), [1.0, 1.0, 1.0])


def test_dimension_label_degenerate():
    pts = np.tile([0.3, 0.4, 0.5], (5, 1))
    np.testing.assert_array_equal(dimension_label(pts), [0.0, 0.0, 0.0])


def test_dimension_label_matches_linear_scan():
    rng = np.random.default_rng(0)
    pts = rng.uniform(size=(50, 3))
    lo = pts[0].copy()
    hi = pts[0].copy()
    for p in pts[1:]:
        for ax in range(3):
            lo[ax] = min(lo[ax], p[ax])
            hi[ax] = max(hi[ax], p[ax])
    np.testing.assert_allclose(dimension_label(pts), hi - lo, rtol=0, atol=0)


def test_dimension_label_requires_two_points():
    with pytest.raises(ValueError):
        dimension_label(np.zeros((1, 3)))


# ---------------------------------------------------------------------------
# part-ratio labels

def _cloud_with_parts(counts):
    ids = np.concatenate([np.full(c, i, dtype=np.uint8) for i, c in enumerate(counts)])
    pts = np.random.default_rng(1).uniform(size=(ids.size, 3)).astype(np.float32)
    return LabeledCloud(points=pts, y=np.zeros(2), part_ids=ids, family="lamp")


def test_part_ratio_half_simplex():
    # 50 base / 30 part1 / 20 part2 -> exposed shares (0.3, 0.2); with the
    # implied base share the full simplex sums to one
    c = _cloud_with_parts([50, 30, 20])
    y = part_ratio_label(c)
    np.testing.assert_allclose(y, [0.3, 0.2])
    assert abs((1 - y.sum()) - 0.5) < 1e-12


def test_part_ratio_all_points_in_base():
    c = _cloud_with_parts([100])
    y = part_ratio_label(c, n_parts=3)
    np.testing.assert_array_equal(y, [0.0, 0.0])


def test_part_ratio_symmetry():
    c = _cloud_with_parts([40, 30, 30])
    y = part_ratio_label(c)
    assert y[0] == y[1]


def test_part_ratio_empty_base_errors():
    ids = np.concatenate([np.full(30, 1, dtype=np.uint8), np.full(30, 2, dtype=np.uint8)])
    pts = np.zeros((60, 3), dtype=np.float32)
    c = LabeledCloud(points=pts, y=np.zeros(2), part_ids=ids, family="lamp")
    with pytest.raises(DegenerateLabelError):
        part_ratio_label(c, n_parts=3)


def test_part_ratio_requires_part_ids():
    c = LabeledCloud(points=np.zeros((4, 3)), y=np.zeros(3))
    with pytest.raises(DegenerateLabelError):
        part_ratio_label(c)


# ---------------------------------------------------------------------------
# sampling

def test_box_label_close_to_nominal_extents():
    fam = ShapeFamily(kind="box", ranges=((0.5, 0.5), (0.5, 0.5), (0.5, 0.5)))
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        c = sample_shape(fam, rng, n_points=256)
        worst = max(worst, np.abs(c.y - 0.5).max())
    assert worst < 0.02


def test_table_leg_rule():
    fam = ShapeFamily(kind="table")
    narrow = shapes._primitives(fam, np.array([0.3, 0.6, 0.6]))
    wide = shapes._primitives(fam, np.array([0.7, 0.6, 0.6]))
    assert sum(1 for *_, part in narrow if part == 1) == 1
    assert sum(1 for *_, part in wide if part == 1) == 4


def test_face_counts_proportional_to_areas():
    fam = ShapeFamily(kind="box", ranges=((0.9, 0.9), (0.45, 0.45), (0.15, 0.15)))
    rng = np.random.default_rng(3)
    n = 20000
    c = sample_shape(fam, rng, n_points=n)
    ex, ey, ez = 0.9, 0.45, 0.15
    lo32 = (np.array([0.5, 0.5, 0.5]) - np.array([ex, ey, ez]) / 2).astype(np.float32)
    hi32 = (np.array([0.5, 0.5, 0.5]) + np.array([ex, ey, ez]) / 2).astype(np.float32)
    counts = np.zeros(6)
    for p in c.points:
        for ax in range(6):
            axis, side = divmod(ax, 2)
            bound = hi32[axis] if side else lo32[axis]
            if p[axis] == bound:
                counts[ax] += 1
                break
    assert counts.sum() == n
    areas = np.array([ey * ez, ey * ez, ex * ez, ex * ez, ex * ey, ex * ey])
    expected = n * areas / areas.sum()
    assert stats.chisquare(counts, expected).pvalue > 0.01


def test_sampled_labels_inside_unit_interval():
    rng = np.random.default_rng(4)
    for kind in ("box", "table", "lamp"):
        fam = ShapeFamily(kind=kind)
        for _ in range(20):
            c = sample_shape(fam, rng, n_points=128)
            assert np.all(c.y >= 0.0) and np.all(c.y <= 1.0)
            assert np.all(np.isfinite(c.points))


def test_part_ratio_generation():
    clouds = shapes.generate_dataset(ShapeFamily(kind="lamp"), 5, 128, seed=9, label="part-ratio")
    for c in clouds:
        assert c.y.shape == (2,)
        assert 0.0 <= c.y.sum() <= 1.0


# ---------------------------------------------------------------------------
# dataset files

def test_dataset_roundtrip_bit_identical(tmp_path):
    fam = ShapeFamily(kind="table")
    clouds = shapes.generate_dataset(fam, 10, 64, seed=5)
    write_dataset(tmp_path / "ds", clouds)
    loaded = read_dataset(tmp_path / "ds")
    assert len(loaded) == 10
    for a, b in zip(clouds, loaded):
        assert a.points.tobytes() == b.points.tobytes()
        np.testing.assert_array_equal(a.y, b.y)
        np.testing.assert_array_equal(a.part_ids, b.part_ids)
        assert a.family == b.family


def test_empty_dataset_roundtrip(tmp_path):
    write_dataset(tmp_path / "empty", [])
    assert read_dataset(tmp_path / "empty") == []


def test_corrupted_magic_raises(tmp_path):
    write_dataset(tmp_path / "ds", shapes.generate_dataset(ShapeFamily(), 2, 32, seed=1))
    bin_path = tmp_path / "ds" / "points.bin"
    blob = bytearray(bin_path.read_bytes())
    blob[:4] = b"XXXX"
    bin_path.write_bytes(bytes(blob))
    with pytest.raises(DatasetFormatError):
        read_dataset(tmp_path / "ds")


def test_truncated_blob_raises(tmp_path):
    write_dataset(tmp_path / "ds", shapes.generate_dataset(ShapeFamily(), 2, 32, seed=1))
    bin_path = tmp_path / "ds" / "points.bin"
    blob = bin_path.read_bytes()
    bin_path.write_bytes(blob[:-16])
    with pytest.raises(DatasetFormatError):
        read_dataset(tmp_path / "ds")


def test_same_seed_same_bytes(tmp_path):
    fam = ShapeFamily(kind="box")
    write_dataset(tmp_path / "a", shapes.generate_dataset(fam, 6, 64, seed=7))
    write_dataset(tmp_path / "b", shapes.generate_dataset(fam, 6, 64, seed=7))
    assert (tmp_path / "a" / "points.bin").read_bytes() == (tmp_path / "b" / "points.bin").read_bytes()


def test_ply_export(tmp_path):
    c = sample_shape(ShapeFamily(kind="lamp"), np.random.default_rng(8), n_points=16)
    out = tmp_path / "cloud.ply"
    shapes.write_ply(out, c.points, c.part_ids)
    text = out.read_text().splitlines()
    assert text[0] == "ply"
    assert "element vertex 16" in text
    assert "property uchar part" in text
    assert len(text) == text.index("end_header") + 17
