import numpy as np
import pytest
from scipy import ndimage

from pouchreg.boundary import (
    RefineConfig,
    largest_component,
    min_closed_path,
    path_cost,
    polygon_to_mask,
    refine_boundary,
)
from pouchreg.image import EmptyMaskError
from pouchreg.metrics import hausdorff_masks, iou

from conftest import disk_case, ellipse_mask
from oracles import closed_path_brute, closed_path_product


def test_brute_oracles_agree(rng):
    for _ in range(5):
        w = rng.normal(size=(5, 4))
        assert closed_path_brute(w, 1) == pytest.approx(closed_path_product(w, 1), abs=1e-12)


@pytest.mark.parametrize("cols,rows,jump", [(12, 10, 1), (12, 4, 1), (8, 10, 2), (6, 7, 3), (12, 3, 2)])
def test_dp_matches_enumeration(rng, cols, rows, jump):
    for _ in range(3):
        w = rng.normal(size=(cols, rows))
        path, cost = min_closed_path(w, jump)
        assert cost == pytest.approx(closed_path_brute(w, jump), abs=1e-12)
        assert cost == pytest.approx(path_cost(w, path), abs=1e-12)
        steps = np.abs(np.diff(np.append(path, path[0])))
        assert steps.max() <= jump


def test_dp_ties_pick_smallest_start_then_lexicographic():
    assert list(min_closed_path(np.zeros((6, 5)), 1)[0]) == [0] * 6
    w = np.zeros((4, 3))
    w[:, 0] = 1.0
    # row 1 and row 2 paths tie; the smaller start wins
    assert list(min_closed_path(w, 1)[0]) == [1, 1, 1, 1]


def test_dp_rejects_single_column():
    with pytest.raises(ValueError):
        min_closed_path(np.zeros((1, 4)), 1)


def test_config_validation():
    for bad in ({"radial_samples": 7}, {"angular_samples": 15}, {"max_radial_jump": 0}, {"band_fraction": 1.0}):
        with pytest.raises(ValueError):
            RefineConfig(**bad)


def test_disk_recovered_from_eroded_start():
    img, truth = disk_case()
    initial = ndimage.binary_erosion(truth, iterations=3)
    res = refine_boundary(img, initial)
    assert hausdorff_masks(res.mask, truth) <= 1.5
    c = np.array(res.center)
    r = np.hypot(*(res.polygon - c).T)
    assert np.abs(r - 20.0).max() <= 1.5


def test_constant_image_takes_innermost_path():
    img = np.full((64, 64), 0.5)
    _, truth = disk_case()
    res = refine_boundary(img, truth)
    assert not res.rows.any()
    j = np.arange(res.radii.shape[0])
    assert np.array_equal(res.radii[j, res.rows], res.radii.min(axis=1))


def test_ellipse_kept(rng):
    mask = ellipse_mask((96, 96), 47.3, 46.8, 30, 18, 0.4)
    res = refine_boundary(mask.astype(float), mask)
    assert iou(res.mask, mask) >= 0.95


def test_polygon_within_band_and_simple():
    img, truth = disk_case()
    res = refine_boundary(img, ndimage.binary_erosion(truth, iterations=2))
    j = np.arange(res.radii.shape[0])
    chosen = res.radii[j, res.rows]
    assert np.all(chosen >= res.radii.min(axis=1)) and np.all(chosen <= res.radii.max(axis=1))
    # star-shaped about the center with strictly increasing angle: simple polygon
    d = res.polygon - np.array(res.center)
    ang = np.unwrap(np.arctan2(d[:, 1], d[:, 0]))
    assert np.all(np.diff(ang) > 0) and ang[-1] - ang[0] < 2 * np.pi
    assert np.all(np.hypot(d[:, 0], d[:, 1]) > 0)


def test_band_clipped_at_border():
    img = np.zeros((40, 40))
    mask = np.zeros((40, 40), bool)
    mask[0:20, 0:20] = True
    img[mask] = 1.0
    res = refine_boundary(img, mask)
    assert res.clipped
    assert res.mask.any()


def test_errors():
    with pytest.raises(EmptyMaskError):
        refine_boundary(np.zeros((20, 20)), np.zeros((20, 20), bool))


def test_largest_component_and_rasterizer():
    m = np.zeros((10, 10), bool)
    m[1:3, 1:3] = True
    m[5:9, 5:9] = True
    lc = largest_component(m)
    assert lc.sum() == 16 and not lc[1, 1]
    square = np.array([[1.5, 1.5], [5.5, 1.5], [5.5, 4.5], [1.5, 4.5]])
    r = polygon_to_mask(square, (8, 8))
    assert r.sum() == 12 and r[2:5, 2:6].all()
