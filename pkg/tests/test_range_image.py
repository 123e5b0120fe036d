import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import iou_by_sets
from rangeseg.container import FormatError
from rangeseg.range_image import (
    GridConfig,
    IoUAccumulator,
    InputStats,
    PointCloud,
    RangeImage,
    channel_stats,
    compute_iou,
    inject_dropout,
    normalize_batch,
    project,
    read_dataset,
    write_dataset,
)

GRID = GridConfig(height=8, width=16)


def point_at(grid, row, col, dist):
    theta = grid.row_centers()[row]
    phi = grid.col_centers()[col]
    return dist * np.array([math.cos(theta) * math.cos(phi), math.cos(theta) * math.sin(phi), math.sin(theta)])


def test_projection_lands_in_expected_pixel():
    p = point_at(GRID, 3, 5, 10.0)
    img, stats = project(PointCloud([p], [1], [0.4]), GRID)
    assert img.mask[3, 5] == 1 and img.mask.sum() == 1
    assert img.labels[3, 5] == 1 and img.ignore[3, 5] == 0
    assert img.depth[3, 5] == pytest.approx(10.0, abs=1e-12)
    assert img.intensity[3, 5] == 0.4
    assert (stats.points, stats.projected) == (1, 1)


def test_nearest_point_wins_collisions():
    near, far = point_at(GRID, 2, 2, 5.0), point_at(GRID, 2, 2, 9.0)
    img, stats = project(PointCloud([far, near], [2, 1]), GRID)
    assert img.labels[2, 2] == 1 and img.depth[2, 2] == pytest.approx(5.0)
    assert stats.projected == 1


def test_empty_pixels_are_ignored_background():
    img, _ = project(PointCloud(np.zeros((0, 3)), np.zeros(0)), GRID)
    assert img.mask.sum() == 0 and np.all(img.ignore == 1) and np.all(img.labels == 0)


def test_point_cloud_validation():
    with pytest.raises(ValueError):
        PointCloud([[1, 0, 0]], [7])
    with pytest.raises(ValueError):
        PointCloud([[1, 0, 0]], [0], [1.5])
    with pytest.raises(ValueError):
        PointCloud([[0, 0, 0]], [0])
    with pytest.raises(ValueError):
        PointCloud([[1, 0, 0], [2, 0, 0]], [0])


def test_grid_validation():
    with pytest.raises(ValueError):
        GridConfig(height=0)
    with pytest.raises(ValueError):
        GridConfig(elevation=(0.1, -0.1))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_projection_depth_consistency(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(200, 3)) * [10, 6, 1] + [15, 0, -0.5]
    img, _ = project(PointCloud(pts, rng.integers(0, 4, 200)), GRID)
    m = img.mask == 1
    np.testing.assert_allclose(img.depth[m], np.sqrt(img.x[m] ** 2 + img.y[m] ** 2 + img.z[m] ** 2), atol=1e-12)


def test_dropout_zero_is_identity_and_one_clears_everything():
    rng = np.random.default_rng(0)
    img, _ = project(PointCloud(rng.normal(size=(300, 3)) * 5 + [12, 0, 0], rng.integers(0, 4, 300)), GRID)
    assert inject_dropout(img, 0.0, 1).identical(img)
    cleared = inject_dropout(img, 1.0, 1)
    assert cleared.mask.sum() == 0 and np.all(cleared.ignore == 1) and np.all(cleared.depth == 0)
    assert inject_dropout(img, 0.3, 5).identical(inject_dropout(img, 0.3, 5))
    with pytest.raises(ValueError):
        inject_dropout(img, 1.2, 0)


def _random_image(rng, h=6, w=9):
    img = RangeImage.empty(h, w)
    img.mask[:] = rng.integers(0, 2, (h, w))
    img.labels[:] = rng.integers(0, 4, (h, w)) * img.mask
    img.ignore[:] = 1 - img.mask
    img.depth[:] = rng.uniform(1, 50, (h, w)) * img.mask
    return img


def test_iou_matches_set_oracle_on_random_grids():
    rng = np.random.default_rng(11)
    for _ in range(200):
        gt = _random_image(rng)
        pred = rng.integers(0, 4, gt.shape)
        for c in range(4):
            assert compute_iou(pred, gt, c).iou == iou_by_sets(pred, gt.labels, gt.ignore, c)


def test_iou_edge_cases():
    gt = RangeImage.empty(2, 2)
    res = compute_iou(np.zeros((2, 2), int), gt, 1)
    assert res.iou == 1.0 and res.empty_union
    with pytest.raises(ValueError):
        compute_iou(np.zeros((2, 2), int), gt, 4)
    with pytest.raises(ValueError):
        compute_iou(np.zeros((3, 2), int), gt, 0)


def test_accumulator_pools_counts():
    rng = np.random.default_rng(2)
    imgs = [_random_image(rng) for _ in range(3)]
    preds = [rng.integers(0, 4, im.shape) for im in imgs]
    acc = IoUAccumulator()
    for p, im in zip(preds, imgs):
        acc.add(p, im)
    for c in range(4):
        inter = sum(compute_iou(p, im, c).intersection for p, im in zip(preds, imgs))
        union = sum(compute_iou(p, im, c).union for p, im in zip(preds, imgs))
        assert acc.iou()[c] == pytest.approx(inter / union)


def test_dataset_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    imgs = [_random_image(rng, 4, 8) for _ in range(3)]
    for im in imgs:
        im.intensity[:] = rng.random(im.shape) * im.mask
    path = tmp_path / "d.rsds"
    write_dataset(path, imgs)
    back = read_dataset(path)
    assert len(back) == 3 and all(a.identical(b) for a, b in zip(imgs, back))


def test_dataset_truncation_reports_offset(tmp_path):
    path = tmp_path / "d.rsds"
    write_dataset(path, [RangeImage.empty(4, 8)])
    data = path.read_bytes()
    path.write_bytes(data[:-5])
    with pytest.raises(FormatError) as err:
        read_dataset(path)
    assert "ignore channel of image 0" in str(err.value) and err.value.offset > 0


def test_dataset_bad_magic_and_trailing_bytes(tmp_path):
    path = tmp_path / "d.rsds"
    path.write_bytes(b"XXXX" + struct.pack("<HI", 1, 0))
    with pytest.raises(FormatError):
        read_dataset(path)
    write_dataset(path, [])
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(FormatError):
        read_dataset(path)


def test_channel_stats_and_normalization():
    rng = np.random.default_rng(6)
    imgs = [_random_image(rng) for _ in range(4)]
    stats = channel_stats(imgs)
    depth = np.concatenate([im.depth[im.mask == 1] for im in imgs])
    assert stats.mean[4] == pytest.approx(depth.mean())
    assert stats.std[4] == pytest.approx(depth.std())
    assert stats.std[3] == 1.0  # constant intensity channel passes through
    x = normalize_batch(imgs, stats)
    assert x.shape == (4, 6, 6, 9)
    for k, im in enumerate(imgs):
        assert np.all(x[k, :, im.mask == 0] == 0)
        assert np.array_equal(x[k, 5], im.mask.astype(float))
    back = InputStats.from_dict(stats.to_dict())
    assert np.array_equal(back.mean, stats.mean) and np.array_equal(back.std, stats.std)
