"""Brute-force reference implementations used by the tests.

They avoid the package's sampling plans: coordinates come from the rotation
and polar formulas written out directly, box membership from the closed form
of a bilinearly interpolated box indicator, and values from
``scipy.ndimage.map_coordinates``.
"""

import math

import numpy as np
from scipy import ndimage


def box_coverage(box, ys, xs):
    """Bilinear interpolation of the box indicator: product of two 1-D tents."""
    def tent(v, lo, hi):
        d = np.maximum(np.maximum(lo - v, v - hi), 0.0)
        return np.clip(1.0 - d, 0.0, 1.0)

    return tent(ys, box.y1, box.y2) * tent(xs, box.x1, box.x2)


def sample_bilinear(plane, ys, xs):
    return ndimage.map_coordinates(plane, [ys, xs], order=1, mode="grid-constant", cval=0.0)


def crop_bounds(box, margin, dims):
    h, w = dims
    return (max(box.y1 - margin, 0), max(box.x1 - margin, 0),
            min(box.y2 + margin, h - 1), min(box.x2 + margin, w - 1))


def parallel_bags(plane, box, theta, margin=2):
    """Rows and columns of the crop rotated by ``theta`` degrees (counterclockwise on screen)."""
    y0, x0, y1, x1 = crop_bounds(box, margin, plane.shape)
    h, w = y1 - y0 + 1, x1 - x0 + 1
    t = math.radians(theta)
    c, s = math.cos(t), math.sin(t)
    ho = math.ceil(h * abs(c) + w * abs(s) - 1e-9)
    wo = math.ceil(h * abs(s) + w * abs(c) - 1e-9)
    ho += (ho - h) % 2
    wo += (wo - w) % 2
    bags = []
    inside = np.zeros((ho, wo), bool)
    values = np.zeros((ho, wo))
    for yo in range(ho):
        for xo in range(wo):
            # rotate the output offset back by -theta in (x right, y up) coordinates
            X, Y = xo - (wo - 1) / 2, -(yo - (ho - 1) / 2)
            Xs, Ys = c * X + s * Y, -s * X + c * Y
            ys, xs = -Ys + (h - 1) / 2 + y0, Xs + (w - 1) / 2 + x0
            inside[yo, xo] = box_coverage(box, ys, xs) >= 0.5
            values[yo, xo] = sample_bilinear(plane, [ys], [xs])[0]
    for r in range(ho):
        if inside[r].any():
            bags.append(values[r][inside[r]])
    for col in range(wo):
        if inside[:, col].any():
            bags.append(values[:, col][inside[:, col]])
    return bags


def polar_rays(box, origin, n_r, n_theta):
    """Per ray, the in-box prefix length found by marching outward from ``origin``."""
    oy, ox = origin
    R = 0.5 * math.hypot(box.x2 - box.x1 + 1, box.y2 - box.y1 + 1)
    lengths = []
    coords = []
    for j in range(n_theta):
        th = 2 * math.pi * j / n_theta
        pts = []
        for i in range(n_r):
            r = i * R / (n_r - 1)
            ys, xs = oy - r * math.sin(th), ox + r * math.cos(th)
            if box_coverage(box, ys, xs) < 0.5:
                break
            pts.append((ys, xs))
        lengths.append(len(pts))
        coords.append(pts)
    return lengths, coords


def baseline_counts(boxes, dims, category=1):
    """Positive and negative crossing-line bag counts by scanning every row and column."""
    h, w = dims
    boxes = [b for b in boxes if b.category == category]
    pos = sum(b.height + b.width for b in boxes)
    neg = sum(1 for y in range(h) if not any(b.y1 <= y <= b.y2 for b in boxes))
    neg += sum(1 for x in range(w) if not any(b.x1 <= x <= b.x2 for b in boxes))
    return pos, neg


def canonical(bags, decimals=9):
    return sorted(tuple(np.round(np.asarray(b, dtype=float), decimals)) for b in bags)
