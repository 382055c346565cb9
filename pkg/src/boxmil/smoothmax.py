"""Bag-prediction reducers: hard max, alpha-softmax, alpha-quasimax and their
radially weighted forms.

Every reducer works along the last axis, so a padded ``(n_bags, L)`` matrix
reduces to ``n_bags`` predictions in one call.  Padding is expressed through
``weights``: an entry with weight 0 does not belong to the bag.  Inputs may be
numpy arrays (a float or array is returned) or :class:`~boxmil.autodiff.Var`
values (a Var is returned, so gradients flow to every bag member).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .validation import ContractError

HARD = "hard"
SOFTMAX = "softmax"
QUASIMAX = "quasimax"


@dataclass(frozen=True)
class SmoothMaxKind:
    """Which reducer turns a bag into its prediction."""

    variant: str = SOFTMAX
    alpha: float = 4.0

    def __post_init__(self):
        if self.variant not in (HARD, SOFTMAX, QUASIMAX):
            raise ContractError(f"unknown smooth-max variant {self.variant!r}")
        if self.variant != HARD and not self.alpha > 0:
            raise ContractError("alpha must be positive")

    @classmethod
    def parse(cls, text: str) -> "SmoothMaxKind":
        """Parse ``"hard"``, ``"softmax:4"`` or ``"quasimax:0.5"``."""
        name, _, alpha = text.strip().partition(":")
        return cls(name, float(alpha) if alpha else 4.0)

    def __str__(self):
        return self.variant if self.variant == HARD else f"{self.variant}:{self.alpha:g}"


@dataclass(frozen=True)
class PolarWeights:
    w: np.ndarray
    w_min: float

    @property
    def sigma(self) -> float:
        n_r = len(self.w)
        return (n_r - 1) / math.sqrt(-2.0 * math.log(self.w_min))


def polar_weights(n_r: int, w_min: float) -> PolarWeights:
    """Gaussian radial weights ``exp(-k^2 / (2 sigma^2))`` decaying from 1 to ``w_min``."""
    if n_r < 2:
        raise ContractError("n_r must be >= 2")
    if not 0.0 < w_min < 1.0:
        raise ContractError("w_min must lie in (0, 1)")
    sigma = (n_r - 1) / math.sqrt(-2.0 * math.log(w_min))
    k = np.arange(n_r, dtype=np.float64)
    return PolarWeights(np.exp(-k * k / (2.0 * sigma * sigma)), float(w_min))


def _prepare(values, weights):
    is_var = isinstance(values, ad.Var)
    if not is_var:
        values = np.asarray(values, dtype=np.float64)
    shape = values.shape
    if len(shape) == 0 or shape[-1] == 0:
        raise ContractError("cannot reduce an empty bag")
    if weights is None:
        weights = np.ones(shape)
    else:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != shape:
            raise ContractError(
                f"weights shape {weights.shape} does not match values {shape}")
    member = weights > 0
    if not np.all(member.any(axis=-1)):
        raise ContractError("cannot reduce an empty bag")
    if is_var:
        tape_values = values
    else:
        tape_values = ad.Tape().const(values)
    raw = tape_values.value
    shift = np.max(np.where(member, raw, -np.inf), axis=-1, keepdims=True)
    return is_var, tape_values, weights, member, shift


def _finish(result, is_var):
    if is_var:
        return result
    v = result.value
    return float(v) if v.ndim == 0 else np.array(v)


def bag_max(values, weights=None):
    """Largest member of each bag."""
    is_var, v, _, member, _ = _prepare(values, weights)
    return _finish(ad.vmax(v, axis=-1, where=member), is_var)


def alpha_softmax(values, alpha: float, weights=None):
    """``sum w p e^{a p} / sum w e^{a p}`` with unit weights unless given."""
    if not alpha > 0:
        raise ContractError("alpha must be positive")
    is_var, v, w, _, shift = _prepare(values, weights)
    e = ad.exp((v - shift) * alpha) * w
    out = ad.vsum(v * e, axis=-1) / ad.vsum(e, axis=-1)
    return _finish(out, is_var)


def alpha_quasimax(values, alpha: float, weights=None):
    """``(log sum w e^{a p} - log sum w) / a``; with unit weights the log-n correction."""
    if not alpha > 0:
        raise ContractError("alpha must be positive")
    is_var, v, w, _, shift = _prepare(values, weights)
    lse = ad.log(ad.vsum(ad.exp((v - shift) * alpha) * w, axis=-1))
    corr = np.log(w.sum(axis=-1))
    out = (lse - corr) / alpha + shift[..., 0]
    return _finish(out, is_var)


def weighted_smoothmax(values, weights, kind: SmoothMaxKind):
    if kind.variant == HARD:
        raise ContractError("weighted smooth maximum needs a smooth variant")
    if weights is None:
        raise ContractError("weighted smooth maximum needs weights")
    n = values.shape[-1] if hasattr(values, "shape") else len(values)
    if np.shape(weights)[-1] != n:
        raise ContractError("weights and values differ in length")
    return reduce(values, kind, weights)


def reduce(values, kind: SmoothMaxKind, weights=None):
    """Apply the reducer selected by ``kind``; ``weights`` only gate membership for hard max."""
    if kind.variant == HARD:
        return bag_max(values, weights)
    if kind.variant == SOFTMAX:
        return alpha_softmax(values, kind.alpha, weights)
    return alpha_quasimax(values, kind.alpha, weights)
