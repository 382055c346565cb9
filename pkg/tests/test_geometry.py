import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import ndimage

from boxmil import autodiff as ad
from boxmil.geometry import (BBox, PolarGrid, PolarSpec, Region, apply_plan, bilinear_plan,
                             bilinear_sample, box_mask, crop_with_margin, margin_region,
                             polar_coords, polar_transform, rotate_region, rotated_shape)
from boxmil.validation import BoundsError, ContractError


def test_bbox_dimensions():
    b = BBox(2, 3, 8, 7)
    assert (b.width, b.height) == (7, 5)
    assert b.half_diagonal == pytest.approx(0.5 * math.hypot(7, 5))
    assert b.contains(3, 2) and b.contains(7, 8)
    assert not b.contains(2, 2)


@pytest.mark.parametrize("args", [(5, 0, 4, 3), (0, 5, 3, 4), (-1, 0, 2, 2), (0, 0, 1, 1, 0)])
def test_bbox_rejects_malformed(args):
    with pytest.raises(ContractError):
        BBox(*args)


def test_bbox_outside_image():
    with pytest.raises(BoundsError):
        BBox(0, 0, 10, 3).check_within((8, 8))


def test_box_mask_is_inclusive():
    m = box_mask(BBox(1, 2, 3, 4), (6, 6))
    assert m.sum() == 9
    assert m[2, 1] == 1 and m[4, 3] == 1 and m[1, 1] == 0


def test_margin_region_clamps():
    reg = margin_region(BBox(1, 0, 5, 3), 2, (8, 7))
    assert reg == Region(0, 0, 6, 7)


def test_crop_with_margin_offsets():
    a = np.arange(100.0).reshape(10, 10)
    crop, (r0, c0) = crop_with_margin(a, BBox(4, 5, 6, 6), 1)
    assert (r0, c0) == (4, 3)
    assert crop.shape == (4, 5)
    assert crop[0, 0] == a[4, 3]


def test_bilinear_exact_on_grid():
    rng = np.random.default_rng(0)
    a = rng.random((5, 6))
    ys, xs = np.mgrid[0:5, 0:6]
    np.testing.assert_allclose(bilinear_sample(a, ys, xs), a)


def test_bilinear_midpoint_average():
    a = np.array([[0.0, 2.0], [4.0, 6.0]])
    assert bilinear_sample(a, np.array([0.5]), np.array([0.5]))[0] == pytest.approx(3.0)


def test_bilinear_zero_outside():
    a = np.ones((3, 3))
    vals = bilinear_sample(a, np.array([-0.5, 2.5, -3.0]), np.array([1.0, 1.0, 1.0]))
    np.testing.assert_allclose(vals, [0.5, 0.5, 0.0])


@given(st.floats(-2, 8), st.floats(-2, 8))
def test_plan_weights_are_a_partition_inside(y, x):
    reg = Region(0, 0, 7, 7)
    idx, wt = bilinear_plan(np.array(y), np.array(x), reg, (7, 7))
    assert np.all(wt >= 0)
    if 0 <= y <= 6 and 0 <= x <= 6:
        assert wt.sum() == pytest.approx(1.0)
    else:
        assert wt.sum() <= 1.0 + 1e-12


def test_plan_ignores_pixels_outside_region():
    # samples near the crop edge must not read the neighbouring image pixels
    img = np.ones((6, 6))
    reg = Region(1, 1, 3, 3)
    idx, wt = bilinear_plan(np.array([-0.5]), np.array([1.0]), reg, img.shape)
    assert apply_plan(img, idx, wt)[0] == pytest.approx(0.5)


def test_plan_matches_tape_sampling():
    rng = np.random.default_rng(1)
    img = rng.random((9, 9))
    reg = Region(2, 1, 5, 6)
    ys, xs = rng.uniform(-1, 6, size=(2, 10))
    idx, wt = bilinear_plan(ys, xs, reg, img.shape)
    tape = ad.Tape()
    v = ad.sample(tape.const(img), idx, wt).value
    np.testing.assert_allclose(v, apply_plan(img, idx, wt))


@pytest.mark.parametrize("h,w", [(5, 7), (6, 4), (9, 9)])
def test_rotation_zero_is_identity(h, w):
    a = np.random.default_rng(h).random((h, w))
    np.testing.assert_allclose(rotate_region(a, 0.0), a, atol=1e-12)


@given(st.integers(1, 30), st.integers(1, 30), st.floats(-89, 89))
def test_rotated_shape_holds_region_and_keeps_parity(h, w, theta):
    ho, wo = rotated_shape(h, w, theta)
    t = math.radians(theta)
    assert ho >= h * abs(math.cos(t)) + w * abs(math.sin(t)) - 1e-6
    assert wo >= h * abs(math.sin(t)) + w * abs(math.cos(t)) - 1e-6
    assert (ho - h) % 2 == 0 and (wo - w) % 2 == 0


def test_rotation_rejects_right_angles():
    with pytest.raises(ContractError):
        rotate_region(np.ones((3, 3)), 90.0)


@pytest.mark.parametrize("theta", [-40.0, -20.0, 15.0, 30.0])
def test_rotation_matches_scipy_interior(theta):
    # independent oracle: scipy rotates counterclockwise as displayed, bilinear (order=1)
    n = 21
    yy, xx = np.mgrid[0:n, 0:n]
    a = np.exp(-((yy - 8.0) ** 2 + (xx - 13.0) ** 2) / 18.0)
    ours = rotate_region(a, theta)
    ho, wo = ours.shape
    oy, ox = (ho - n) // 2, (wo - n) // 2
    ours = ours[oy:oy + n, ox:ox + n]
    ref = ndimage.rotate(a, theta, reshape=False, order=1, mode="constant")
    inner = (slice(4, n - 4), slice(4, n - 4))
    np.testing.assert_allclose(ours[inner], ref[inner], atol=1e-9)


def test_rotation_moves_right_point_up_for_positive_angle():
    a = np.zeros((11, 11))
    a[5, 9] = 1.0
    out = rotate_region(a, 30.0)
    cy, cx = (out.shape[0] - 1) / 2, (out.shape[1] - 1) / 2
    y, x = np.unravel_index(np.argmax(out), out.shape)
    assert y < cy and x > cx


def test_polar_coords_first_ray_points_right_quarter_points_up():
    spec = PolarSpec((5.0, 5.0), 4.0, PolarGrid(5, 4))
    ys, xs = polar_coords(spec)
    np.testing.assert_allclose(xs[:, 0], 5 + np.arange(5))
    np.testing.assert_allclose(ys[:, 0], 5.0)
    np.testing.assert_allclose(ys[:, 1], 5 - np.arange(5), atol=1e-12)
    np.testing.assert_allclose(ys[0], 5.0)


@given(st.floats(3.0, 9.0))
def test_polar_transform_of_disk(rho):
    # independent oracle: a disk centred on the origin is a step in r on every ray
    n = 25
    c = 12.0
    yy, xx = np.mgrid[0:n, 0:n]
    disk = (np.hypot(yy - c, xx - c) <= rho).astype(float)
    grid = PolarGrid(25, 16)
    out = polar_transform(disk, PolarSpec((c, c), 12.0, grid))
    r = grid.radii(12.0)
    np.testing.assert_allclose(out[r < rho - 1.5], 1.0, atol=1e-12)
    np.testing.assert_allclose(out[r > rho + 1.5], 0.0, atol=1e-12)


def test_polar_grid_validation():
    with pytest.raises(ContractError):
        PolarGrid(1, 10)
    with pytest.raises(ContractError):
        PolarSpec((0, 0), 0.0, PolarGrid())
    np.testing.assert_allclose(PolarGrid(3, 4).radii(2.0), [0, 1, 2])


@given(st.integers(0, 2**32 - 1), st.floats(-60, 60), st.floats(24, 64))
def test_rotation_round_trip_restores_interior(seed, theta, wavelength):
    # two bilinear passes blur in proportion to curvature, so the image is a
    # unit-amplitude plane wave of at least 24 px wavelength
    rng = np.random.default_rng(seed)
    h, w = (int(v) for v in rng.integers(16, 33, size=2))
    yy, xx = np.mgrid[0:h, 0:w]
    a, phase = rng.uniform(0, 2 * np.pi, size=2)
    img = 0.5 + 0.5 * np.sin(2 * np.pi / wavelength * (np.cos(a) * xx + np.sin(a) * yy) + phase)
    back = rotate_region(rotate_region(img, theta), -theta)
    oy, ox = (back.shape[0] - h) // 2, (back.shape[1] - w) // 2
    err = np.abs(back[oy:oy + h, ox:ox + w] - img)[3:-3, 3:-3]
    assert err.max() < 1e-2


@given(st.integers(0, 2**32 - 1))
def test_polar_transform_preserves_range(seed):
    rng = np.random.default_rng(seed)
    region = rng.uniform(0.2, 0.9, size=(int(rng.integers(4, 20)), int(rng.integers(4, 20))))
    h, w = region.shape
    origin = (float(rng.uniform(0, h - 1)), float(rng.uniform(0, w - 1)))
    spec = PolarSpec(origin, float(rng.uniform(1, 15)), PolarGrid(8, 16))
    out = polar_transform(region, spec)
    # samples leaving the region blend towards zero, so the range is [0, max]
    assert out.max() <= region.max() + 1e-12 and out.min() >= 0.0


@given(st.integers(0, 2**32 - 1), st.integers(0, 4))
def test_box_mask_commutes_with_crop(seed, margin):
    rng = np.random.default_rng(seed)
    dims = (int(rng.integers(4, 20)), int(rng.integers(4, 20)))
    y1, y2 = sorted(int(v) for v in rng.integers(0, dims[0], size=2))
    x1, x2 = sorted(int(v) for v in rng.integers(0, dims[1], size=2))
    box = BBox(x1, y1, x2, y2)
    cropped, (oy, ox) = crop_with_margin(box_mask(box, dims), box, margin)
    local = BBox(x1 - ox, y1 - oy, x2 - ox, y2 - oy)
    np.testing.assert_array_equal(cropped, box_mask(local, cropped.shape))
