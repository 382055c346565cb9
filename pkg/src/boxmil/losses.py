"""Training objectives: MIL-baseline BCE, focal bag losses, pairwise smoothness,
and the combined parallel + polar objective.

Two code paths exist on purpose.  The small functions (:func:`unary_baseline`,
:func:`unary_focal`, :func:`pairwise_loss`) take explicit bag lists and are the
readable reference.  :func:`batch_loss` gathers every bag of a whole batch
from the network output in a handful of tape nodes and is what training uses.
Tests check that both agree.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .bags import (
    AngleSet,
    Bag,
    BagPlan,
    DEFAULT_MARGIN,
    baseline_negative_plan,
    baseline_positive_plan,
    outside_mask,
    parallel_positive_plan,
    polar_positive_plan,
    _argmax_in_box,
)
from .geometry import PolarGrid
from .smoothmax import SmoothMaxKind, reduce
from .validation import ContractError

EPS = 1e-6

METHODS = ("baseline", "pa", "po", "proposed", "fsis")


@dataclass(frozen=True)
class LossConfig:
    """Every free hyperparameter of the objectives.

    ``kind`` reduces parallel (and baseline) bags, ``polar_kind`` reduces
    polar bags, whose weights are the radial profile set by ``w_min``.
    """

    lam: float = 10.0
    beta: float = 0.25
    gamma: float = 2.0
    kind: SmoothMaxKind = SmoothMaxKind("softmax", 4.0)
    polar_kind: SmoothMaxKind = SmoothMaxKind("softmax", 1.0)
    angles: AngleSet = AngleSet(-40.0, 40.0, 20.0)
    grid: PolarGrid = PolarGrid(20, 60)
    w_min: float = 0.5
    margin: int = DEFAULT_MARGIN
    baseline_kind: SmoothMaxKind = SmoothMaxKind("hard")

    def __post_init__(self):
        if self.lam < 0:
            raise ContractError("lambda must be >= 0")
        if not 0.0 <= self.beta <= 1.0:
            raise ContractError("beta must lie in [0, 1]")
        if self.gamma < 0:
            raise ContractError("gamma must be >= 0")
        if not 0.0 < self.w_min < 1.0:
            raise ContractError("w_min must lie in (0, 1)")

    def with_(self, **kw) -> "LossConfig":
        return replace(self, **kw)


class Packed(NamedTuple):
    """Padded bag values ``(B, L)`` (array or Var), weights, and whether they are radial."""

    values: object
    weights: np.ndarray
    radial: bool = False


def pack(bags: list[Bag]) -> Packed:
    """Pad a list of bags (or plain value arrays) into one matrix; weight 0 marks padding."""
    bags = [b if isinstance(b, Bag) else Bag(b, "positive", 1) for b in bags]
    if not bags:
        return Packed(np.zeros((0, 1)), np.zeros((0, 1)))
    L = max(len(b) for b in bags)
    vals = np.zeros((len(bags), L))
    wts = np.zeros((len(bags), L))
    radial = False
    for i, b in enumerate(bags):
        n = len(b)
        vals[i, :n] = b.values
        if b.weights is not None:
            wts[i, :n] = b.weights
            radial = True
        else:
            wts[i, :n] = 1.0
    return Packed(vals, wts, radial)


def _as_packed(bags) -> Packed:
    if isinstance(bags, Packed):
        return bags
    return pack(list(bags))


def _common_tape(*items):
    for it in items:
        if isinstance(it.values, ad.Var):
            return it.values.tape
    return ad.Tape()


def _to_var(tape, x):
    if isinstance(x, ad.Var):
        return x
    return tape.const(np.asarray(x, dtype=np.float64))


def bag_predictions(bags: Packed, kind: SmoothMaxKind, use_weights: bool, tape) -> ad.Var:
    """Clamped bag predictions ``P(b)`` for a packed set."""
    w = bags.weights if (use_weights and bags.radial) else (bags.weights > 0).astype(np.float64)
    p = reduce(_to_var(tape, bags.values), kind, w)
    return ad.clip(p, EPS, 1.0 - EPS)


def unary_baseline(pos, neg, kind: SmoothMaxKind = SmoothMaxKind("hard")) -> ad.Var:
    """Bag-level binary cross entropy averaged over all positive and negative bags."""
    pos, neg = _as_packed(pos), _as_packed(neg)
    n_pos, n_neg = len(pos.weights), len(neg.weights)
    if n_pos + n_neg == 0:
        raise ContractError("unary loss needs at least one bag")
    tape = _common_tape(pos, neg)
    total = tape.const(0.0)
    if n_pos:
        total = total + ad.vsum(ad.log(bag_predictions(pos, kind, False, tape)))
    if n_neg:
        total = total + ad.vsum(ad.log(1.0 - bag_predictions(neg, kind, False, tape)))
    return total * (-1.0 / (n_pos + n_neg))


def unary_focal(pos, neg, beta: float, gamma: float, kind: SmoothMaxKind,
                use_weights: bool = False) -> ad.Var:
    """Focal bag loss normalised by ``max(1, #positive bags)``."""
    pos, neg = _as_packed(pos), _as_packed(neg)
    n_pos, n_neg = len(pos.weights), len(neg.weights)
    tape = _common_tape(pos, neg)
    total = tape.const(0.0)
    if n_pos:
        p = bag_predictions(pos, kind, use_weights, tape)
        total = total + ad.vsum((1.0 - p) ** gamma * ad.log(p)) * beta
    if n_neg:
        p = bag_predictions(neg, kind, False, tape)
        total = total + ad.vsum(p ** gamma * ad.log(1.0 - p)) * (1.0 - beta)
    return total * (-1.0 / max(1, n_pos))


# -- pairwise ----------------------------------------------------------------------

def edge_pairs(h: int, w: int) -> np.ndarray:
    """Flat index pairs of all 4-neighbour edges of an h x w grid, each edge once."""
    idx = np.arange(h * w).reshape(h, w)
    horiz = np.stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()], axis=-1)
    vert = np.stack([idx[:-1, :].ravel(), idx[1:, :].ravel()], axis=-1)
    return np.concatenate([horiz, vert])


def _pred_var(pred):
    if isinstance(pred, ad.Var):
        return pred
    return ad.Tape().const(np.asarray(pred, dtype=np.float64))


def pairwise_loss(pred, category: int) -> ad.Var:
    """Mean squared difference over 4-neighbour pixel pairs of one category plane."""
    pred = _pred_var(pred)
    if pred.ndim == 2:
        pred = ad.reshape(pred, pred.shape + (1,))
    h, w, C = pred.shape
    if not 1 <= category <= C:
        raise ContractError(f"category {category} outside 1..{C}")
    pairs = edge_pairs(h, w)
    if len(pairs) == 0:
        return pred.tape.const(0.0)
    index = pairs * C + (category - 1)
    diff = ad.sample(pred, index, np.broadcast_to([1.0, -1.0], index.shape))
    return ad.vsum(diff * diff) * (1.0 / len(pairs))


# -- batch objective -----------------------------------------------------------------

@dataclass
class _Group:
    """Bags for one term (e.g. parallel positives) gathered across a batch."""

    plans: list = field(default_factory=list)
    coefs: list = field(default_factory=list)

    def add(self, plan: BagPlan, offset: int, C: int, c: int, coef: float):
        if len(plan) == 0:
            return
        self.plans.append(BagPlan(plan.index * C + (offset + c - 1), plan.coef, plan.weights,
                                  plan.polarity, plan.category, plan.radial))
        self.coefs.append(np.full(len(plan), coef))

    def freeze(self):
        """``(plan, per-bag coefficients)`` or ``None`` when the group is empty."""
        if not self.plans:
            return None
        return BagPlan.concat(self.plans), np.concatenate(self.coefs)


def _group_predictions(pred: ad.Var, group, kind: SmoothMaxKind, use_weights: bool):
    plan, coef = group
    values = ad.sample(pred, plan.index, plan.coef)
    p = bag_predictions(Packed(values, plan.weights, plan.radial), kind, use_weights, pred.tape)
    return p, coef


def select_origins(pred_values, annotations):
    """Per image, the argmax pixel of each box on its category plane."""
    out = []
    for n, boxes in enumerate(annotations):
        out.append([_argmax_in_box(pred_values[n, :, :, b.category - 1], b) for b in boxes])
    return out


@dataclass(frozen=True)
class BagLayout:
    """Where every bag of a batch samples from and how much it weighs.

    Depends on the boxes, origins, config and shape but not on prediction
    values, so one layout can serve many evaluations on the same geometry.
    """

    method: str
    shape: tuple
    positive: tuple = ()
    negative: object = None
    neg_coef: np.ndarray | None = None


def bag_layout(annotations, shape, config: LossConfig = LossConfig(), method: str = "proposed",
               origins=None) -> BagLayout:
    """Assemble the bag plans of a batch with prediction shape ``(N, H, W, C)``.

    Polar methods need ``origins`` (see :func:`select_origins`).
    """
    if method not in METHODS:
        raise ContractError(f"unknown method {method!r}")
    N, H, W, C = shape
    if len(annotations) != N:
        raise ContractError("one annotation list per image is required")
    for boxes in annotations:
        for b in boxes:
            if b.category > C:
                raise ContractError(f"box category {b.category} exceeds {C} outputs")
            b.check_within((H, W))
    scale = 1.0 / N
    if method == "fsis":
        return BagLayout(method, tuple(shape))
    if method == "baseline":
        pos, neg = _Group(), _Group()
        for n, boxes in enumerate(annotations):
            off = n * H * W * C
            for c in range(1, C + 1):
                pplans = [baseline_positive_plan(b, (H, W)) for b in boxes if b.category == c]
                nplan = baseline_negative_plan(boxes, c, (H, W))
                count = sum(len(p) for p in pplans) + len(nplan)
                if count == 0:
                    continue
                for p in pplans:
                    pos.add(p, off, C, c, scale / count)
                neg.add(nplan, off, C, c, scale / count)
        return BagLayout(method, tuple(shape), (pos.freeze(),), neg.freeze())

    use_pa = method in ("pa", "proposed")
    use_po = method in ("po", "proposed")
    if use_po and origins is None:
        raise ContractError(f"method {method!r} needs polar origins")
    pa, po = _Group(), _Group()
    neg_coef = np.zeros((N, H, W, C))
    for n, boxes in enumerate(annotations):
        off = n * H * W * C
        for c in range(1, C + 1):
            cat_boxes = [(i, b) for i, b in enumerate(boxes) if b.category == c]
            w_neg = 0.0
            if use_pa:
                plans = [parallel_positive_plan(b, (H, W), config.angles, config.margin)
                         for _, b in cat_boxes]
                n_pos = max(1, sum(len(p) for p in plans))
                for p in plans:
                    pa.add(p, off, C, c, scale / n_pos)
                w_neg += 1.0 / n_pos
            if use_po:
                plans = [polar_positive_plan(b, origins[n][i], (H, W), config.grid,
                                             config.margin, config.w_min)
                         for i, b in cat_boxes]
                n_pos = max(1, sum(len(p) for p in plans))
                for p in plans:
                    po.add(p, off, C, c, scale / n_pos)
                w_neg += 1.0 / n_pos
            neg_coef[n, :, :, c - 1] = outside_mask(boxes, c, (H, W)) * (w_neg * scale)
    return BagLayout(method, tuple(shape), (pa.freeze(), po.freeze()), None, neg_coef)


def batch_loss(pred: ad.Var, annotations, config: LossConfig = LossConfig(), method: str = "proposed",
               masks=None, origins=None, layout: BagLayout | None = None) -> ad.Var:
    """Mean per-image loss for a batch prediction of shape ``(N, H, W, C)``.

    ``annotations[n]`` lists the boxes of image ``n``.  For polar methods the
    origins default to the in-box argmax of the current prediction.  ``masks``
    (``N x H x W x C`` binary) are needed only for ``method="fsis"``.  A
    prebuilt ``layout`` from :func:`bag_layout` skips bag assembly; it must
    come from the same annotations, origins and config.
    """
    if method not in METHODS:
        raise ContractError(f"unknown method {method!r}")
    if pred.ndim != 4:
        raise ContractError("batch prediction must be N x H x W x C")
    N, H, W, C = pred.shape
    if layout is None:
        if method in ("po", "proposed") and origins is None and len(annotations) == N:
            origins = select_origins(pred.value, annotations)
        layout = bag_layout(annotations, pred.shape, config, method, origins)
    elif layout.method != method or layout.shape != tuple(pred.shape):
        raise ContractError("layout was built for a different method or shape")
    tape = pred.tape
    scale = 1.0 / N

    if method == "fsis":
        if masks is None:
            raise ContractError("fsis needs ground-truth masks")
        m = np.asarray(masks, dtype=np.float64).reshape(N, H, W, C)
        p = ad.clip(pred, EPS, 1.0 - EPS)
        bce = ad.vsum(ad.log(p) * m + ad.log(1.0 - p) * (1.0 - m))
        return bce * (-1.0 / (N * H * W * C))

    total = tape.const(0.0)
    if method == "baseline":
        (pos,), neg = layout.positive, layout.negative
        if pos is not None:
            p, coef = _group_predictions(pred, pos, config.baseline_kind, False)
            total = total - ad.vsum(ad.log(p) * coef)
        if neg is not None:
            p, coef = _group_predictions(pred, neg, config.baseline_kind, False)
            total = total - ad.vsum(ad.log(1.0 - p) * coef)
    else:
        for group, kind, use_w in zip(layout.positive, (config.kind, config.polar_kind),
                                      (False, True)):
            if group is not None:
                p, coef = _group_predictions(pred, group, kind, use_w)
                focal = (1.0 - p) ** config.gamma * ad.log(p)
                total = total - ad.vsum(focal * coef) * config.beta
        if layout.neg_coef.any():
            p = ad.clip(pred, EPS, 1.0 - EPS)
            focal = p ** config.gamma * ad.log(1.0 - p)
            total = total - ad.vsum(focal * layout.neg_coef) * (1.0 - config.beta)

    if config.lam > 0:
        pairs = edge_pairs(H, W)
        if len(pairs):
            base = (np.arange(N)[:, None, None] * (H * W)
                    + pairs[None]).reshape(N, 1, -1, 2) * C
            index = base + np.arange(C)[None, :, None, None]
            diff = ad.sample(pred, index, np.broadcast_to([1.0, -1.0], index.shape))
            total = total + ad.vsum(diff * diff) * (config.lam * scale / len(pairs))
    return total


def _single(pred):
    pred = _pred_var(pred)
    if pred.ndim == 2:
        pred = ad.reshape(pred, pred.shape + (1,))
    if pred.ndim != 3:
        raise ContractError("prediction map must be H x W x C")
    return ad.reshape(pred, (1,) + pred.shape)


def total_loss(pred, annotations, config: LossConfig = LossConfig(), origins=None) -> ad.Var:
    """Parallel focal + polar focal + pairwise terms summed over categories, one image."""
    return batch_loss(_single(pred), [list(annotations)], config, "proposed",
                      origins=None if origins is None else [origins])


def method_loss(pred, annotations, config: LossConfig, method: str, origins=None) -> ad.Var:
    """Single-image objective of any weakly supervised method."""
    return batch_loss(_single(pred), [list(annotations)], config, method,
                      origins=None if origins is None else [origins])


def mil_baseline_loss(pred, annotations, lam: float = 10.0,
                      kind: SmoothMaxKind = SmoothMaxKind("hard")) -> ad.Var:
    """Crossing-line BCE plus ``lam`` times the pairwise term, summed over categories."""
    cfg = LossConfig(lam=lam, baseline_kind=kind)
    return batch_loss(_single(pred), [list(annotations)], cfg, "baseline")
