"""Named finite-difference gradient checks for primitives, reducers and losses.

Every entry builds a random instance from a seed and returns the max relative
error of :func:`boxmil.autodiff.gradcheck`.  Loss checks differentiate with
respect to logits of an 8 x 8 map so the sigmoid sits inside the chain.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .bags import AngleSet
from .geometry import BBox
from .losses import LossConfig, bag_layout, batch_loss, select_origins
from .smoothmax import SmoothMaxKind, alpha_quasimax, alpha_softmax, polar_weights, weighted_smoothmax

SIZE = 8


def _away_from_zero(rng, shape, gap=0.1):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap, x)


def random_boxes(rng, h=SIZE, w=SIZE, n_max=2, n_classes=1):
    """One or more random boxes (at least 2 x 2) inside an ``h x w`` image."""
    out = []
    for _ in range(int(rng.integers(1, n_max + 1))):
        bh, bw = (int(v) for v in rng.integers(2, min(h, w) - 1, size=2))
        y1 = int(rng.integers(0, h - bh + 1))
        x1 = int(rng.integers(0, w - bw + 1))
        c = int(rng.integers(1, n_classes + 1))
        out.append(BBox(x1, y1, x1 + bw - 1, y1 + bh - 1, c))
    return out


def _loss_check(method, rng, config=None, n_classes=1):
    config = config or LossConfig(angles=AngleSet(-30, 30, 30), lam=1.0)
    boxes = random_boxes(rng, n_classes=n_classes)
    x = rng.normal(size=(1, SIZE, SIZE, n_classes))
    masks = (rng.random(x.shape) < 0.3).astype(float)
    origins = None
    if method in ("po", "proposed"):
        p0 = 1.0 / (1.0 + np.exp(-x))
        origins = select_origins(p0, [boxes])

    # the geometry is fixed while x is perturbed, so the bags are assembled once
    layout = bag_layout([boxes], x.shape, config, method, origins)

    def f(v):
        return batch_loss(ad.sigmoid(v), [boxes], config, method, masks, origins, layout)

    return ad.gradcheck(f, x)


def _reducer_check(rng, reducer):
    x = rng.normal(size=(5, 7))
    return ad.gradcheck(lambda v: ad.vsum(reducer(ad.sigmoid(v))), x)


def _unary(fn):
    def check(rng):
        x = _away_from_zero(rng, (3, 4))
        return ad.gradcheck(lambda v: ad.vsum(fn(v) * np.arange(12.0).reshape(3, 4)), x)
    return check


def _binary(fn, positive=False):
    def check(rng):
        a = rng.normal(size=(3, 4))
        b = rng.uniform(0.5, 2.0, size=(4,)) if positive else rng.normal(size=(4,))
        c = np.concatenate([a.ravel(), b])

        def f(v):
            va = ad.reshape(ad.sample(v, np.arange(12)[:, None], np.ones((12, 1))), (3, 4))
            vb = ad.sample(v, np.arange(12, 16)[:, None], np.ones((4, 1)))
            return ad.vsum(fn(va, vb) * np.arange(12.0).reshape(3, 4))

        return ad.gradcheck(f, c)
    return check


def _conv(rng):
    x = rng.normal(size=(2, 6, 6, 3))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    n_x = x.size

    def f(v):
        xv = ad.reshape(ad.sample(v, np.arange(n_x)[:, None], np.ones((n_x, 1))), x.shape)
        wv = ad.reshape(ad.sample(v, np.arange(n_x, n_x + w.size)[:, None],
                                  np.ones((w.size, 1))), w.shape)
        bv = ad.sample(v, np.arange(n_x + w.size, v.size)[:, None], np.ones((4, 1)))
        y = ad.conv2d(xv, wv, bv, stride=2, pad=1)
        return ad.vsum(y * y)

    return ad.gradcheck(f, np.concatenate([x.ravel(), w.ravel(), b]))


def _sample(rng):
    x = rng.normal(size=(5, 5))
    index = rng.integers(0, 25, size=(6, 4))
    weights = rng.random((6, 4))
    return ad.gradcheck(lambda v: ad.vsum(ad.sample(v, index, weights) ** 2), x)


def _vmax(rng):
    x = rng.permutation(20).reshape(4, 5) * 0.1
    where = rng.random((4, 5)) < 0.7
    where[:, 0] = True
    return ad.gradcheck(lambda v: ad.vsum(ad.vmax(v, axis=-1, where=where) * np.arange(4.0)), x)


def _shape_ops(rng):
    x = rng.normal(size=(2, 4, 4, 3))

    def f(v):
        up = ad.upsample2(v)
        t = ad.transpose(ad.reshape(up, (2, 8, 24)), (0, 2, 1))
        cat = ad.concat([t, ad.exp(t * 0.1)], axis=1)
        return ad.vsum(cat * cat * 0.5)

    return ad.gradcheck(f, x)


def _plain(reducer):
    def check(rng):
        alpha = float(rng.choice([4.0, 6.0, 8.0]))
        return _reducer_check(rng, lambda v: reducer(v, alpha))
    return check


def _weighted(variant):
    def check(rng):
        w = polar_weights(7, 0.5).w
        kind = SmoothMaxKind(variant, float(rng.choice([0.5, 1.0, 2.0])))
        return _reducer_check(rng, lambda v: weighted_smoothmax(v, np.broadcast_to(w, (5, 7)), kind))
    return check


OPS = {
    "add": _binary(ad.add),
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul),
    "div": _binary(ad.div, positive=True),
    "pow": _unary(lambda v: ad.power(ad.exp(v * 0.5), 2.5)),
    "exp": _unary(ad.exp),
    "log": _unary(lambda v: ad.log(v * v + 0.5)),
    "sigmoid": _unary(ad.sigmoid),
    "relu": _unary(ad.relu),
    "clip": _unary(lambda v: ad.clip(v, -0.75, 0.75)),
    "sum": _unary(lambda v: ad.vsum(v * v, axis=0) * v),
    "max": _vmax,
    "sample": _sample,
    "conv2d": _conv,
    "shape": _shape_ops,
    "softmax": _plain(alpha_softmax),
    "quasimax": _plain(alpha_quasimax),
    "weighted_softmax": _weighted("softmax"),
    "weighted_quasimax": _weighted("quasimax"),
    "loss_baseline": lambda rng: _loss_check("baseline", rng),
    "loss_pa": lambda rng: _loss_check("pa", rng),
    "loss_po": lambda rng: _loss_check("po", rng),
    "loss_proposed": lambda rng: _loss_check("proposed", rng),
    "loss_proposed_quasimax": lambda rng: _loss_check(
        "proposed", rng, LossConfig(angles=AngleSet(-30, 30, 30), kind=SmoothMaxKind("quasimax", 6),
                                    polar_kind=SmoothMaxKind("quasimax", 1))),
    "loss_two_categories": lambda rng: _loss_check("proposed", rng, n_classes=2),
    "loss_fsis": lambda rng: _loss_check("fsis", rng),
}

LOSS_OPS = tuple(k for k in OPS if k.startswith("loss_"))
REDUCER_OPS = ("softmax", "quasimax", "weighted_softmax", "weighted_quasimax")


def run_check(op: str, seed: int) -> float:
    """Max relative gradient error of check ``op`` on the instance drawn from ``seed``."""
    if op not in OPS:
        raise KeyError(f"unknown op {op!r}; choose from {', '.join(OPS)}")
    return float(OPS[op](np.random.default_rng([int(seed), 17])))
