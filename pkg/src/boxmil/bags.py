"""Positive and negative bag construction for box-supervised MIL.

Bags are built as :class:`BagPlan` objects: for every bag member a fixed set
of flat pixel indices and interpolation coefficients into one H x W
prediction plane, plus a membership weight (0 marks padding).  A plan can be
evaluated on a numpy plane (giving :class:`Bag` lists) or gathered from a tape
variable by :mod:`boxmil.losses`, so the bag values stay differentiable.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    BBox,
    PolarGrid,
    PolarSpec,
    Region,
    apply_plan,
    bilinear_plan,
    box_mask,
    margin_region,
    polar_coords,
    rotation_coords,
)
from .smoothmax import polar_weights
from .validation import ContractError, check_prediction

POSITIVE = "positive"
NEGATIVE = "negative"

MASK_THRESHOLD = 0.5
DEFAULT_MARGIN = 2


@dataclass
class Bag:
    values: np.ndarray
    polarity: str
    category: int
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.size == 0:
            raise ContractError("bags must be non-empty")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=np.float64)
            if self.weights.shape != self.values.shape:
                raise ContractError("bag weights must match bag values")

    def __len__(self):
        return self.values.size


@dataclass(frozen=True)
class AngleSet:
    """Evenly spaced angles from ``a`` to ``b`` (both included) with step ``s`` degrees."""

    a: float = -40.0
    b: float = 40.0
    s: float = 20.0

    def __post_init__(self):
        if not (-90 < self.a <= self.b < 90) or not self.s > 0:
            raise ContractError(f"invalid angle set {self}")

    def values(self) -> np.ndarray:
        n = int(np.floor((self.b - self.a) / self.s + 1e-9)) + 1
        return self.a + self.s * np.arange(n)

    @classmethod
    def parse(cls, text) -> "AngleSet":
        a, b, s = (float(t) for t in str(text).replace("(", "").replace(")", "").split(","))
        return cls(a, b, s)

    def __str__(self):
        return f"{self.a:g},{self.b:g},{self.s:g}"


def _angle_values(angles) -> np.ndarray:
    if isinstance(angles, AngleSet):
        return angles.values()
    vals = np.atleast_1d(np.asarray(angles, dtype=np.float64))
    if np.any(np.abs(vals) >= 90):
        raise ContractError("angles must lie in (-90, 90) degrees")
    return vals


@dataclass
class BagPlan:
    """Packed bags over one prediction plane of size ``dims``.

    ``index``/``coef`` have shape ``(B, L, K)``; ``weights`` has shape
    ``(B, L)`` with 0 on padding.  ``radial`` marks weights that carry the
    Gaussian radial profile rather than plain 0/1 membership.
    """

    index: np.ndarray
    coef: np.ndarray
    weights: np.ndarray
    polarity: str
    category: int
    radial: bool = False
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.index.shape[0]

    @property
    def lengths(self) -> np.ndarray:
        return (self.weights > 0).sum(axis=1)

    @property
    def membership(self) -> np.ndarray:
        return (self.weights > 0).astype(np.float64)

    def evaluate(self, plane) -> np.ndarray:
        """Padded ``(B, L)`` bag values sampled from a numpy plane."""
        return apply_plan(plane, self.index, self.coef)

    def to_bags(self, plane) -> list[Bag]:
        vals = self.evaluate(plane)
        out = []
        for b in range(len(self)):
            keep = self.weights[b] > 0
            w = self.weights[b][keep] if self.radial else None
            out.append(Bag(vals[b][keep], self.polarity, self.category, w))
        return out

    @staticmethod
    def empty(polarity, category, k=1) -> "BagPlan":
        return BagPlan(np.zeros((0, 1, k), np.intp), np.zeros((0, 1, k)),
                       np.zeros((0, 1)), polarity, category)

    @staticmethod
    def concat(plans: list["BagPlan"]) -> "BagPlan":
        """Stack plans of one polarity/category, padding to a common length and width."""
        if not plans:
            raise ContractError("nothing to concatenate")
        L = max(p.index.shape[1] for p in plans)
        K = max(p.index.shape[2] for p in plans)
        B = sum(len(p) for p in plans)
        index = np.zeros((B, L, K), dtype=np.intp)
        coef = np.zeros((B, L, K))
        weights = np.zeros((B, L))
        i = 0
        for p in plans:
            nb, nl, nk = p.index.shape
            index[i:i + nb, :nl, :nk] = p.index
            coef[i:i + nb, :nl, :nk] = p.coef
            weights[i:i + nb, :nl] = p.weights
            i += nb
        first = plans[0]
        return BagPlan(
            index, coef, weights,
            first.polarity, first.category,
            radial=any(p.radial for p in plans),
        )


def _gather_plan(ys, xs, width):
    """Exact single-pixel plan for integer coordinates."""
    idx = (np.asarray(ys) * width + np.asarray(xs))[..., None]
    return idx.astype(np.intp), np.ones(idx.shape)


def _lines(rows: np.ndarray, dims, polarity, category, xs=None) -> BagPlan:
    """Plans for full horizontal lines ``rows`` restricted to columns ``xs``."""
    h, w = dims
    xs = np.arange(w) if xs is None else xs
    yy, xx = np.meshgrid(rows, xs, indexing="ij")
    idx, coef = _gather_plan(yy, xx, w)
    return BagPlan(idx, coef, np.ones(yy.shape), polarity, category)


def _transposed_lines(cols: np.ndarray, dims, polarity, category, ys=None) -> BagPlan:
    h, w = dims
    ys = np.arange(h) if ys is None else ys
    xx, yy = np.meshgrid(cols, ys, indexing="ij")
    idx, coef = _gather_plan(yy, xx, w)
    return BagPlan(idx, coef, np.ones(yy.shape), polarity, category)


def _plane(pred, category):
    pred = check_prediction(pred)
    if not 1 <= category <= pred.shape[2]:
        raise ContractError(f"category {category} outside 1..{pred.shape[2]}")
    return pred[:, :, category - 1]


# -- MIL baseline ---------------------------------------------------------------

def baseline_positive_plan(box: BBox, dims) -> BagPlan:
    box.check_within(dims)
    rows = _lines(np.arange(box.y1, box.y2 + 1), dims, POSITIVE, box.category,
                  xs=np.arange(box.x1, box.x2 + 1))
    cols = _transposed_lines(np.arange(box.x1, box.x2 + 1), dims, POSITIVE, box.category,
                             ys=np.arange(box.y1, box.y2 + 1))
    return BagPlan.concat([rows, cols])


def baseline_negative_plan(boxes, category: int, dims) -> BagPlan:
    h, w = dims
    free_rows = np.ones(h, bool)
    free_cols = np.ones(w, bool)
    for b in boxes:
        if b.category == category:
            free_rows[b.y1:b.y2 + 1] = False
            free_cols[b.x1:b.x2 + 1] = False
    parts = []
    if free_rows.any():
        parts.append(_lines(np.flatnonzero(free_rows), dims, NEGATIVE, category))
    if free_cols.any():
        parts.append(_transposed_lines(np.flatnonzero(free_cols), dims, NEGATIVE, category))
    if not parts:
        return BagPlan.empty(NEGATIVE, category)
    return BagPlan.concat(parts)


def baseline_positive_bags(pred, box: BBox) -> list[Bag]:
    """One bag per row and per column of the box: ``height + width`` bags."""
    plane = _plane(pred, box.category)
    return baseline_positive_plan(box, plane.shape).to_bags(plane)


def baseline_negative_bags(pred, boxes, category: int) -> list[Bag]:
    """One bag per full image row/column that meets no box of ``category``."""
    plane = _plane(pred, category)
    return baseline_negative_plan(boxes, category, plane.shape).to_bags(plane)


# -- pixel negatives ---------------------------------------------------------------

def outside_mask(boxes, category: int, dims) -> np.ndarray:
    """Boolean H x W map of pixels covered by no box of ``category``."""
    out = np.ones(tuple(dims), bool)
    for b in boxes:
        if b.category == category:
            b.check_within(dims)
            out[b.y1:b.y2 + 1, b.x1:b.x2 + 1] = False
    return out


def pixel_negative_bags(pred, boxes, category: int) -> list[Bag]:
    """A singleton bag for every pixel outside all boxes of ``category``."""
    plane = _plane(pred, category)
    vals = plane[outside_mask(boxes, category, plane.shape)]
    return [Bag(np.array([v]), NEGATIVE, category) for v in vals]


# -- parallel transformation ------------------------------------------------------------

def parallel_positive_plan(box: BBox, dims, angles=AngleSet(), margin: int = DEFAULT_MARGIN) -> BagPlan:
    """Rows and columns of the rotated box mask, for every angle.

    The crop (box plus ``margin``) of the prediction and of the box mask are
    rotated together; the mask is binarised at 0.5 and every rotated row or
    column with at least one in-box pixel is a bag.
    """
    box.check_within(dims)
    reg = margin_region(box, margin, dims)
    mask = box_mask(box, dims)
    parts = []
    per_angle = []
    for theta in _angle_values(angles):
        ys, xs = rotation_coords(reg.h, reg.w, float(theta))
        idx, coef = bilinear_plan(ys, xs, reg, dims)
        inside = apply_plan(mask, idx, coef) >= MASK_THRESHOLD
        rows = np.flatnonzero(inside.any(axis=1))
        cols = np.flatnonzero(inside.any(axis=0))
        if rows.size == 0:
            warnings.warn(f"box {box} has an empty mask at {theta:g} degrees; angle skipped")
            per_angle.append(0)
            continue
        parts.append(BagPlan(idx[rows], coef[rows], inside[rows].astype(np.float64),
                             POSITIVE, box.category))
        parts.append(BagPlan(idx[:, cols].transpose(1, 0, 2), coef[:, cols].transpose(1, 0, 2),
                             inside[:, cols].T.astype(np.float64), POSITIVE, box.category))
        per_angle.append(rows.size + cols.size)
    if not parts:
        plan = BagPlan.empty(POSITIVE, box.category, 4)
    else:
        plan = BagPlan.concat(parts)
    plan.meta["per_angle"] = per_angle
    return plan


def parallel_positive_bags(pred, box: BBox, angles=AngleSet(), margin: int = DEFAULT_MARGIN) -> list[Bag]:
    plane = _plane(pred, box.category)
    return parallel_positive_plan(box, plane.shape, angles, margin).to_bags(plane)


# -- polar transformation ---------------------------------------------------------------

def select_polar_origin(pred, box: BBox, category: int | None = None):
    """Pixel ``(y, x)`` with the highest prediction inside ``box``.

    Ties go to the first pixel in row-major order.
    """
    plane = _plane(pred, box.category if category is None else category)
    box.check_within(plane.shape)
    return _argmax_in_box(plane, box)


def _argmax_in_box(plane, box: BBox):
    sub = plane[box.y1:box.y2 + 1, box.x1:box.x2 + 1]
    k = int(np.argmax(sub))
    dy, dx = divmod(k, sub.shape[1])
    return box.y1 + dy, box.x1 + dx


def polar_membership(box: BBox, origin, dims, grid: PolarGrid, margin: int = DEFAULT_MARGIN):
    """Sampling plan of the polar grid and the binarised polar box mask.

    Returns ``(index, coef, inside)`` with ``index``/``coef`` of shape
    ``(n_r, n_theta, 4)`` and ``inside`` of shape ``(n_r, n_theta)``.
    """
    oy, ox = origin
    if not box.contains(oy, ox):
        raise ContractError(f"polar origin {origin} lies outside {box}")
    reg = margin_region(box, margin, dims)
    spec = PolarSpec((oy - reg.y0, ox - reg.x0), box.half_diagonal, grid)
    ys, xs = polar_coords(spec)
    idx, coef = bilinear_plan(ys, xs, reg, dims)
    inside = apply_plan(box_mask(box, dims), idx, coef) >= MASK_THRESHOLD
    return idx, coef, inside


def polar_positive_plan(box: BBox, origin, dims, grid: PolarGrid = PolarGrid(),
                        margin: int = DEFAULT_MARGIN, w_min: float = 0.5) -> BagPlan:
    """One bag per polar ray: the in-box prefix of the ray starting at ``origin``."""
    box.check_within(dims)
    idx, coef, inside = polar_membership(box, origin, dims, grid, margin)
    # prefix of in-box samples along each ray (rows are radii)
    prefix = np.cumprod(inside, axis=0).astype(bool)
    w = polar_weights(grid.n_r, w_min).w
    weights = np.where(prefix, w[:, None], 0.0)
    return BagPlan(idx.transpose(1, 0, 2), coef.transpose(1, 0, 2), weights.T,
                   POSITIVE, box.category, radial=True, meta={"origin": tuple(origin)})


def polar_positive_bags(pred, box: BBox, origin, grid: PolarGrid = PolarGrid(),
                        margin: int = DEFAULT_MARGIN, w_min: float = 0.5) -> list[Bag]:
    plane = _plane(pred, box.category)
    return polar_positive_plan(box, origin, plane.shape, grid, margin, w_min).to_bags(plane)
