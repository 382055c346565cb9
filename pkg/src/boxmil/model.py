"""Tiny two-level encoder-decoder with skip connections.

    enc1 (H)   : conv3x3 -> relu -> conv3x3 -> relu
    enc2 (H/2) : conv3x3/2 -> relu -> conv3x3 -> relu
    mid  (H/4) : conv3x3/2 -> relu -> conv3x3 -> relu
    dec2 (H/2) : upsample, concat enc2, conv3x3 -> relu
    dec1 (H)   : upsample, concat enc1, conv3x3 -> relu
    head       : conv1x1 -> sigmoid, one output per category

Activations are channels-last; the output layout is ``(N, H, W, C)``.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .validation import ContractError, FormatError, check_images

CHECKPOINT_MAGIC = b"BMILNET\0"
CHECKPOINT_VERSION = 1

DEFAULT_CHANNELS = (8, 16, 32)


def _layer_shapes(channels, n_classes):
    c1, c2, c3 = channels
    return {
        "enc1a": (c1, 1, 3, 3),
        "enc1b": (c1, c1, 3, 3),
        "enc2a": (c2, c1, 3, 3),
        "enc2b": (c2, c2, 3, 3),
        "mida": (c3, c2, 3, 3),
        "midb": (c3, c3, 3, 3),
        "dec2": (c2, c3 + c2, 3, 3),
        "dec1": (c1, c2 + c1, 3, 3),
        "head": (n_classes, c1, 1, 1),
    }


@dataclass
class NetParams:
    """Kernels ``<layer>.w`` and biases ``<layer>.b`` keyed by name."""

    arrays: dict
    channels: tuple
    n_classes: int

    def names(self):
        return list(self.arrays)

    def copy(self) -> "NetParams":
        return NetParams({k: v.copy() for k, v in self.arrays.items()},
                         self.channels, self.n_classes)

    def astype(self, dtype) -> "NetParams":
        return NetParams({k: v.astype(dtype) for k, v in self.arrays.items()},
                         self.channels, self.n_classes)

    def flatten(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.arrays.values()])

    def unflatten(self, flat) -> dict:
        out, i = {}, 0
        for k, v in self.arrays.items():
            out[k] = np.asarray(flat[i:i + v.size]).reshape(v.shape)
            i += v.size
        return out

    @property
    def size(self) -> int:
        return sum(v.size for v in self.arrays.values())


def init_params(seed: int, channels=DEFAULT_CHANNELS, n_classes: int = 1,
                dtype=np.float64) -> NetParams:
    """He-uniform kernels (variance ``2 / fan_in``), zero biases."""
    channels = tuple(int(c) for c in channels)
    if len(channels) != 3 or min(channels) < 1:
        raise ContractError("channels must be three positive integers")
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in _layer_shapes(channels, n_classes).items():
        fan_in = shape[1] * shape[2] * shape[3]
        bound = np.sqrt(6.0 / fan_in)
        arrays[f"{name}.w"] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        arrays[f"{name}.b"] = np.zeros(shape[0], dtype=dtype)
    return NetParams(arrays, channels, n_classes)


def _conv(x, p, name, stride=1):
    w, b = p[f"{name}.w"], p[f"{name}.b"]
    pad = w.shape[-1] // 2
    return ad.relu(ad.conv2d(x, w, b, stride=stride, pad=pad))


def forward_logits(params: NetParams, images, tape: ad.Tape | None = None, leaves=None):
    """Logits of shape ``(N, H, W, C)`` on ``tape``.

    Returns ``(logits, leaves)``; ``leaves`` maps parameter names to tape
    variables (registered as differentiable leaves when not supplied).
    """
    x = check_images(images, multiple_of=4)
    dtype = next(iter(params.arrays.values())).dtype
    tape = ad.Tape() if tape is None else tape
    if leaves is None:
        leaves = {k: tape.var(v) for k, v in params.arrays.items()}
    p = leaves
    h = tape.const(x[..., None].astype(dtype))
    e1 = _conv(_conv(h, p, "enc1a"), p, "enc1b")
    e2 = _conv(_conv(e1, p, "enc2a", stride=2), p, "enc2b")
    m = _conv(_conv(e2, p, "mida", stride=2), p, "midb")
    d2 = _conv(ad.concat([ad.upsample2(m), e2], axis=-1), p, "dec2")
    d1 = _conv(ad.concat([ad.upsample2(d2), e1], axis=-1), p, "dec1")
    logits = ad.conv2d(d1, p["head.w"], p["head.b"], stride=1, pad=0)
    return logits, leaves


def forward(params: NetParams, images, tape: ad.Tape | None = None, leaves=None):
    """Sigmoid prediction map ``(N, H, W, C)`` on a tape; returns ``(pred, leaves)``."""
    logits, leaves = forward_logits(params, images, tape, leaves)
    return ad.sigmoid(logits), leaves


def predict(params: NetParams, images, batch_size: int = 32) -> np.ndarray:
    """Numpy prediction map for a stack of images, no gradients kept."""
    x = check_images(images, multiple_of=4)
    out = []
    for i in range(0, len(x), batch_size):
        pred, _ = forward(params, x[i:i + batch_size], ad.Tape(), leaves=None)
        out.append(np.asarray(pred.value, dtype=np.float64))
    return np.concatenate(out)


# -- checkpoint ---------------------------------------------------------------------

def save_checkpoint(params: NetParams, path_or_file):
    """Magic, version, shape table, then float32 little-endian payload."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(params.arrays)))
    buf.write(struct.pack("<4I", *params.channels, params.n_classes))
    for name, arr in params.arrays.items():
        enc = name.encode()
        buf.write(struct.pack("<H", len(enc)) + enc)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for arr in params.arrays.values():
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    data = buf.getvalue()
    if hasattr(path_or_file, "write"):
        path_or_file.write(data)
    else:
        with open(path_or_file, "wb") as fh:
            fh.write(data)


def load_checkpoint(path_or_file, dtype=np.float64) -> NetParams:
    if hasattr(path_or_file, "read"):
        data = path_or_file.read()
    else:
        with open(path_or_file, "rb") as fh:
            data = fh.read()
    f = io.BytesIO(data)
    if f.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise FormatError("not a boxmil checkpoint (bad magic)")
    version, count = struct.unpack("<II", f.read(8))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    c1, c2, c3, n_classes = struct.unpack("<4I", f.read(16))
    table = []
    for _ in range(count):
        (n,) = struct.unpack("<H", f.read(2))
        name = f.read(n).decode()
        (ndim,) = struct.unpack("<I", f.read(4))
        shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
        table.append((name, shape))
    arrays = {}
    for name, shape in table:
        size = int(np.prod(shape))
        raw = f.read(4 * size)
        if len(raw) != 4 * size:
            raise FormatError("truncated checkpoint payload")
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(dtype)
    return NetParams(arrays, (c1, c2, c3), n_classes)
