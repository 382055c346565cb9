"""scikit-learn style estimator around the box-supervised training loop."""

from __future__ import annotations

import time

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .bags import AngleSet
from .geometry import BBox, PolarGrid
from .losses import METHODS, LossConfig, batch_loss, select_origins
from .model import forward, init_params, predict as model_predict
from .smoothmax import SmoothMaxKind
from .validation import ContractError, check_images


class AdamState:
    """First/second moment estimates and the step counter."""

    def __init__(self):
        self.m = {}
        self.v = {}
        self.t = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.99,
              eps=1e-8):
    """Bias-corrected Adam update of ``params`` in place; returns ``(params, state)``."""
    if lr <= 0 or not (0 <= beta1 < 1 and 0 <= beta2 < 1):
        raise ContractError("invalid Adam hyperparameters")
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {k!r} at step {state.t + 1}")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {p.shape} for {k!r}")
        if k not in state.m:
            state.m[k] = np.zeros(p.shape)
            state.v[k] = np.zeros(p.shape)
        m = state.m[k]
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype)
    return params, state


def dice_per_group(pred_binary, gt_binary, groups=None, ids=None):
    """Dice of each group of slices, pooling all pixels (and categories) of the group.

    Empty prediction and empty ground truth give 1.  ``ids`` selects and orders
    the groups; an id absent from ``groups`` is an error.
    """
    pred = np.asarray(pred_binary).astype(bool)
    gt = np.asarray(gt_binary).astype(bool)
    if pred.shape != gt.shape:
        raise ContractError(f"shape mismatch {pred.shape} vs {gt.shape}")
    n = pred.shape[0]
    groups = np.arange(n) if groups is None else np.asarray(groups)
    if len(groups) != n:
        raise ContractError("one group id per slice is required")
    present = list(dict.fromkeys(groups.tolist()))
    if ids is None:
        ids = present
    out = []
    for g in ids:
        sel = groups == g
        if not sel.any():
            raise KeyError(f"unknown group id {g!r}")
        a, b = pred[sel], gt[sel]
        denom = a.sum() + b.sum()
        out.append(1.0 if denom == 0 else 2.0 * np.logical_and(a, b).sum() / denom)
    return out


def _as_boxes(y):
    out = []
    for boxes in y:
        boxes = getattr(boxes, "boxes", boxes)
        row = []
        for b in boxes:
            row.append(b if isinstance(b, BBox) else BBox(*[int(v) for v in b]))
        out.append(row)
    return out


class BoxMILSegmenter(BaseEstimator):
    """Segmentation network trained from bounding boxes.

    ``fit(X, y)`` takes images ``X`` of shape ``(N, H, W)`` and, per image, a
    list of :class:`~boxmil.geometry.BBox`.  ``method`` picks the objective:
    ``"proposed"`` (parallel + polar MIL), ``"pa"``, ``"po"``, ``"baseline"``
    (crossing-line MIL) or ``"fsis"`` (full masks, passed as ``masks=``).
    """

    def __init__(self, method="proposed", n_classes=1, channels=(8, 16, 32), epochs=60,
                 batch_size=16, lr=1e-3, beta1=0.9, beta2=0.99, lam=10.0, beta=0.25, gamma=2.0,
                 kind="softmax:4", polar_kind="softmax:1", angles="-40,40,20", n_r=20,
                 n_theta=60, w_min=0.5, margin=2, baseline_kind="hard", threshold=0.5,
                 dtype="float32", random_state=0, verbose=False):
        self.method = method
        self.n_classes = n_classes
        self.channels = channels
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.lam = lam
        self.beta = beta
        self.gamma = gamma
        self.kind = kind
        self.polar_kind = polar_kind
        self.angles = angles
        self.n_r = n_r
        self.n_theta = n_theta
        self.w_min = w_min
        self.margin = margin
        self.baseline_kind = baseline_kind
        self.threshold = threshold
        self.dtype = dtype
        self.random_state = random_state
        self.verbose = verbose

    def loss_config(self) -> LossConfig:
        def kind(k):
            return k if isinstance(k, SmoothMaxKind) else SmoothMaxKind.parse(k)

        angles = self.angles if isinstance(self.angles, AngleSet) else AngleSet.parse(self.angles)
        return LossConfig(lam=self.lam, beta=self.beta, gamma=self.gamma, kind=kind(self.kind),
                          polar_kind=kind(self.polar_kind), angles=angles,
                          grid=PolarGrid(self.n_r, self.n_theta), w_min=self.w_min,
                          margin=self.margin, baseline_kind=kind(self.baseline_kind))

    def _validate(self):
        if self.method not in METHODS:
            raise ContractError(f"unknown method {self.method!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ContractError("batch_size must be >= 1 and epochs >= 0")
        return self.loss_config()

    def fit(self, X, y, masks=None, eval_set=None, object_masks=None):
        """Train on images ``X`` with boxes ``y``.

        ``eval_set=(X_val, masks_val, groups_val)`` enables per-epoch
        validation dice and best-checkpoint selection.  ``object_masks``
        (training ground truth, diagnostics only) lets the origin statistics
        report how many polar origins fall inside their object.
        """
        cfg = self._validate()
        X = check_images(X, multiple_of=4)
        boxes = _as_boxes(y)
        if len(boxes) != len(X):
            raise ContractError("one box list per image is required")
        if self.method == "fsis" and masks is None:
            raise ContractError("method='fsis' needs masks")
        if masks is not None:
            masks = np.asarray(masks).reshape(X.shape + (self.n_classes,))
        if object_masks is not None:
            object_masks = np.asarray(object_masks).reshape(X.shape + (self.n_classes,))
        dtype = np.dtype(self.dtype)
        params = init_params(self.random_state, self.channels, self.n_classes)
        work = params.astype(dtype)
        state = AdamState()
        rng = np.random.default_rng([self.random_state, 2])
        n = len(X)
        polar = self.method in ("po", "proposed")

        self.history_ = []
        self.steps_ = []
        self.origin_stats_ = []
        t0 = time.perf_counter()
        row = self._epoch_row(0, self._mean_loss(work, X, boxes, masks, cfg), work, eval_set)
        self.history_.append(row)
        best = (row["val_dice_mean"] if eval_set is not None else 0, params.copy())
        for epoch in range(1, self.epochs + 1):
            order = rng.permutation(n)
            total, seen = 0.0, 0
            n_orig = n_box = n_obj = 0
            for start in range(0, n, self.batch_size):
                idx = order[start:start + self.batch_size]
                bboxes = [boxes[i] for i in idx]
                tape = ad.Tape()
                pred, leaves = forward(work, X[idx], tape)
                origins = None
                if polar:
                    origins = select_origins(pred.value, bboxes)
                    for j, (bl, ol) in enumerate(zip(bboxes, origins)):
                        for b, (oy, ox) in zip(bl, ol):
                            if not b.contains(oy, ox):
                                raise AssertionError(f"origin {(oy, ox)} outside {b}")
                            n_box += 1
                            if object_masks is not None:
                                n_obj += int(object_masks[idx[j], oy, ox, b.category - 1])
                        n_orig += len(ol)
                loss = batch_loss(pred, bboxes, cfg, self.method,
                                  None if masks is None else masks[idx], origins)
                grads = ad.backward(tape, loss)
                grads = {k: grads[v] for k, v in leaves.items()}
                adam_step(params.arrays, grads, state, self.lr, self.beta1, self.beta2)
                work = params.astype(dtype)
                total += loss.item() * len(idx)
                seen += len(idx)
                self.steps_.append((state.t, epoch, loss.item()))
            if polar:
                self.origin_stats_.append((epoch, n_orig, n_box, n_obj))
            row = self._epoch_row(epoch, total / seen, work, eval_set)
            self.history_.append(row)
            if self.verbose:
                print(f"epoch {epoch:3d} loss {row['loss']:.5f} "
                      f"val {row['val_dice_mean']:.4f} ({time.perf_counter() - t0:.0f}s)")
            score = row["val_dice_mean"] if eval_set is not None else epoch
            if score > best[0]:
                best = (score, params.copy())
        self.params_ = params
        self.best_params_ = best[1]
        self.n_steps_ = state.t
        self.fit_time_ = time.perf_counter() - t0
        return self

    def _mean_loss(self, work, X, boxes, masks, cfg):
        total = 0.0
        for start in range(0, len(X), self.batch_size):
            sl = slice(start, start + self.batch_size)
            pred, _ = forward(work, X[sl], ad.Tape())
            loss = batch_loss(pred, boxes[sl], cfg, self.method,
                              None if masks is None else masks[sl])
            total += loss.item() * len(X[sl])
        return total / len(X)

    def _epoch_row(self, epoch, loss, work, eval_set):
        row = {"epoch": epoch, "loss": loss, "val_dice_mean": float("nan"),
               "val_dice_std": float("nan")}
        if eval_set is not None:
            Xv, mv, gv = (tuple(eval_set) + (None,))[:3]
            proba = model_predict(work, Xv)
            d = dice_per_group(proba >= self.threshold, np.asarray(mv).reshape(proba.shape), gv)
            row["val_dice_mean"] = float(np.mean(d))
            row["val_dice_std"] = float(np.std(d))
        return row

    def _params(self, best):
        check_is_fitted(self, "params_")
        return self.best_params_ if best else self.params_

    def predict_proba(self, X, best=True):
        """Per-pixel, per-category probabilities ``(N, H, W, C)``."""
        return model_predict(self._params(best), X)

    def predict(self, X, best=True):
        return (self.predict_proba(X, best) >= self.threshold).astype(np.uint8)

    def score(self, X, masks, groups=None):
        """Mean grouped dice of the best parameters against ``masks``."""
        pred = self.predict(X)
        return float(np.mean(dice_per_group(pred, np.asarray(masks).reshape(pred.shape), groups)))

    def __sklearn_is_fitted__(self):
        return hasattr(self, "params_")


__all__ = ["AdamState", "BoxMILSegmenter", "NotFittedError", "adam_step", "dice_per_group"]
