"""Boxes, box masks, cropping, and the two resampling transforms.

Coordinates: ``x`` grows rightward (columns), ``y`` grows downward (rows).
Angles are in degrees for rotations and radians for polar grids, measured
counterclockwise from +x as seen on screen, so a positive angle moves points
toward smaller ``y``.

Both transforms are bilinear with zero outside the source array.  They are
expressed as *sampling plans*: four flat source indices and four weights per
output sample.  The same plan resamples a numpy array here and a tape
variable in :mod:`boxmil.losses`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .validation import BoundsError, ContractError


@dataclass(frozen=True)
class BBox:
    """Inclusive pixel box ``[y1..y2] x [x1..x2]`` with a 1-based category."""

    x1: int
    y1: int
    x2: int
    y2: int
    category: int = 1

    def __post_init__(self):
        if self.x1 > self.x2 or self.y1 > self.y2 or self.x1 < 0 or self.y1 < 0:
            raise ContractError(f"malformed box {self}")
        if self.category < 1:
            raise ContractError("box category must be >= 1")

    @property
    def width(self) -> int:
        return self.x2 - self.x1 + 1

    @property
    def height(self) -> int:
        return self.y2 - self.y1 + 1

    @property
    def half_diagonal(self) -> float:
        return 0.5 * math.hypot(self.width, self.height)

    def contains(self, y, x) -> bool:
        return self.y1 <= y <= self.y2 and self.x1 <= x <= self.x2

    def check_within(self, dims):
        h, w = dims[:2]
        if self.x2 >= w or self.y2 >= h:
            raise BoundsError(f"{self} outside image of size {h}x{w}")


@dataclass(frozen=True)
class PolarGrid:
    n_r: int = 20
    n_theta: int = 90

    def __post_init__(self):
        if self.n_r < 2 or self.n_theta < 4:
            raise ContractError("polar grid needs n_r >= 2 and n_theta >= 4")

    def radii(self, radius: float) -> np.ndarray:
        return np.arange(self.n_r) * (radius / (self.n_r - 1))

    def angles(self) -> np.ndarray:
        return np.arange(self.n_theta) * (2.0 * np.pi / self.n_theta)


@dataclass(frozen=True)
class PolarSpec:
    """Polar resampling about ``origin = (y, x)`` out to ``radius``."""

    origin: tuple
    radius: float
    grid: PolarGrid

    def __post_init__(self):
        if not self.radius > 0:
            raise ContractError("polar radius must be positive")


@dataclass(frozen=True)
class Region:
    """Axis-aligned window of an image: rows ``y0:y0+h``, cols ``x0:x0+w``."""

    y0: int
    x0: int
    h: int
    w: int

    def slices(self):
        return slice(self.y0, self.y0 + self.h), slice(self.x0, self.x0 + self.w)


def box_mask(box: BBox, dims) -> np.ndarray:
    """H x W indicator that is 1 exactly on the pixels of ``box``."""
    box.check_within(dims)
    mask = np.zeros(tuple(dims[:2]), dtype=np.float64)
    mask[box.y1:box.y2 + 1, box.x1:box.x2 + 1] = 1.0
    return mask


def margin_region(box: BBox, margin: int, dims) -> Region:
    if margin < 0:
        raise ContractError("margin must be >= 0")
    h, w = dims[:2]
    y0, x0 = max(box.y1 - margin, 0), max(box.x1 - margin, 0)
    y1, x1 = min(box.y2 + margin, h - 1), min(box.x2 + margin, w - 1)
    return Region(y0, x0, y1 - y0 + 1, x1 - x0 + 1)


def crop_with_margin(array, box: BBox, margin: int):
    """Crop ``array`` to ``box`` grown by ``margin`` and clamped to the image.

    Returns ``(region_array, (row_offset, col_offset))``.
    """
    array = np.asarray(array)
    reg = margin_region(box, margin, array.shape)
    rs, cs = reg.slices()
    return array[rs, cs], (reg.y0, reg.x0)


# -- bilinear plans ---------------------------------------------------------------

def bilinear_plan(ys, xs, region: Region, image_shape):
    """Flat indices/weights for bilinear sampling inside ``region`` of an image.

    ``ys``/``xs`` are in region coordinates.  Corners outside the region get
    weight 0, which realises zero padding around the crop.
    Returns ``(index, weight)`` each of shape ``ys.shape + (4,)``.
    """
    ys = np.asarray(ys, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    fy = ys - y0
    fx = xs - x0
    y0 = y0.astype(np.intp)
    x0 = x0.astype(np.intp)
    W = image_shape[1]
    cy = np.stack([y0, y0, y0 + 1, y0 + 1], axis=-1)
    cx = np.stack([x0, x0 + 1, x0, x0 + 1], axis=-1)
    wt = np.stack([(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx], axis=-1)
    valid = (cy >= 0) & (cy < region.h) & (cx >= 0) & (cx < region.w)
    wt = np.where(valid, wt, 0.0)
    iy = np.where(valid, cy + region.y0, 0)
    ix = np.where(valid, cx + region.x0, 0)
    return iy * W + ix, wt


def apply_plan(image, index, weight):
    """Evaluate a sampling plan on a 2-D numpy array."""
    flat = np.asarray(image, dtype=np.float64).reshape(-1)
    return (flat[index] * weight).sum(axis=-1)


def bilinear_sample(array, ys, xs):
    """Bilinear samples of a 2-D array at fractional ``(ys, xs)``; zero outside."""
    array = np.asarray(array, dtype=np.float64)
    reg = Region(0, 0, *array.shape)
    return apply_plan(array, *bilinear_plan(ys, xs, reg, array.shape))


# -- parallel transformation --------------------------------------------------------

def rotated_shape(h: int, w: int, theta: float):
    """Output size that holds an ``h x w`` region rotated by ``theta`` degrees.

    Parity matches the input so the rotation centre stays on the pixel grid.
    """
    t = math.radians(theta)
    c, s = abs(math.cos(t)), abs(math.sin(t))
    ho = math.ceil(h * c + w * s - 1e-9)
    wo = math.ceil(h * s + w * c - 1e-9)
    ho += (ho - h) % 2
    wo += (wo - w) % 2
    return ho, wo


def rotation_coords(h: int, w: int, theta: float):
    """Source (ys, xs) in region coordinates for each pixel of the rotated output."""
    ho, wo = rotated_shape(h, w, theta)
    t = math.radians(theta)
    c, s = math.cos(t), math.sin(t)
    yo, xo = np.mgrid[0:ho, 0:wo].astype(np.float64)
    dy = yo - (ho - 1) / 2.0
    dx = xo - (wo - 1) / 2.0
    # inverse of the on-screen counterclockwise rotation (y down)
    xs = c * dx - s * dy + (w - 1) / 2.0
    ys = s * dx + c * dy + (h - 1) / 2.0
    return ys, xs


def rotate_region(region, theta: float) -> np.ndarray:
    """Rotate a 2-D array about its centre by ``theta`` degrees (bilinear, zero fill)."""
    region = np.asarray(region, dtype=np.float64)
    if not -90.0 < theta < 90.0:
        raise ContractError("rotation angle must lie in (-90, 90) degrees")
    ys, xs = rotation_coords(*region.shape, theta)
    return bilinear_sample(region, ys, xs)


# -- polar transformation --------------------------------------------------------------

def polar_coords(spec: PolarSpec):
    """Cartesian (ys, xs) of the ``n_r x n_theta`` polar grid; row = radius, column = ray."""
    r = spec.grid.radii(spec.radius)[:, None]
    th = spec.grid.angles()[None, :]
    oy, ox = spec.origin
    xs = ox + r * np.cos(th)
    ys = oy - r * np.sin(th)
    return ys, xs


def polar_transform(region, spec: PolarSpec) -> np.ndarray:
    """Resample ``region`` onto the polar grid of ``spec`` (origin in region coordinates)."""
    region = np.asarray(region, dtype=np.float64)
    ys, xs = polar_coords(spec)
    return bilinear_sample(region, ys, xs)
