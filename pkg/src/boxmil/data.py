"""Synthetic datasets, box derivation/perturbation, MARD, and file formats.

On-disk dataset layout (one directory per split)::

    images/00000.pgm          8-bit grayscale (P5)
    masks/00000_c1.pgm        one mask per category, 0 or 255
    annotations.csv           image_id,category,x1,y1,x2,y2,mx1,mx2,my1,my2
    volumes.csv               image_id,volume_id

Images are quantised to multiples of 1/255 at generation time so that a
PGM round trip is bit-exact.
"""

from __future__ import annotations

import csv
import os
import re
import struct
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .geometry import BBox
from .validation import ContractError, FormatError, GenerationError

PRED_MAGIC = b"BMIL"
PRED_VERSION = 1

SHAPE_KINDS = ("ellipse", "rectangle", "blob")
_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class SyntheticSpec:
    count: int = 20
    height: int = 64
    width: int = 64
    n_classes: int = 1
    shapes_per_image: tuple = (1, 2)
    kinds: tuple = ("ellipse", "blob")
    size_range: tuple = (8, 24)
    noise: float = 0.08
    seed: int = 0
    slices_per_volume: int = 4
    contrast: tuple = (0.25, 0.45)

    def __post_init__(self):
        if self.count < 1:
            raise ContractError("count must be >= 1")
        if self.height % 4 or self.width % 4:
            raise ContractError("image dims must be divisible by 4")
        if not set(self.kinds) <= set(SHAPE_KINDS):
            raise ContractError(f"unknown shape kinds {self.kinds}")
        lo, hi = self.shapes_per_image
        if not 0 <= lo <= hi:
            raise ContractError("invalid shapes_per_image range")
        if not 1 <= self.size_range[0] <= self.size_range[1]:
            raise ContractError("invalid size range")


@dataclass(frozen=True)
class PerturbSpec:
    """Outward box margins: ``fixed`` uses ``lo`` on every side, ``uniform`` draws from [lo, hi]."""

    mode: str = "fixed"
    lo: int = 0
    hi: int = 0
    per_side: bool = True

    def __post_init__(self):
        if self.mode not in ("fixed", "uniform"):
            raise ContractError(f"unknown perturbation mode {self.mode!r}")
        if self.lo < 0 or (self.mode == "uniform" and self.lo > self.hi):
            raise ContractError("invalid margin range")

    @classmethod
    def fixed(cls, m: int) -> "PerturbSpec":
        return cls("fixed", m, m)

    @classmethod
    def uniform(cls, lo: int, hi: int, per_side: bool = True) -> "PerturbSpec":
        return cls("uniform", lo, hi, per_side)

    @classmethod
    def parse(cls, text: str) -> "PerturbSpec":
        """Accept ``"5"`` or ``"U(0,10)"``."""
        text = str(text).strip()
        m = re.fullmatch(r"[Uu]\(\s*(\d+)\s*,\s*(\d+)\s*\)", text)
        if m:
            return cls.uniform(int(m.group(1)), int(m.group(2)))
        return cls.fixed(int(text))

    def draw(self, rng) -> tuple:
        if self.mode == "fixed":
            return (self.lo,) * 4
        if self.per_side:
            return tuple(int(v) for v in rng.integers(self.lo, self.hi + 1, size=4))
        return (int(rng.integers(self.lo, self.hi + 1)),) * 4

    def __str__(self):
        return str(self.lo) if self.mode == "fixed" else f"U({self.lo},{self.hi})"


@dataclass
class Annotation:
    boxes: list
    margins: list = field(default_factory=list)
    mask: np.ndarray | None = None


@dataclass
class Dataset:
    """Images ``(N, H, W)`` in [0, 1], masks ``(N, H, W, C)`` in {0, 1}."""

    images: np.ndarray
    masks: np.ndarray
    annotations: list
    volumes: np.ndarray

    def __len__(self):
        return len(self.images)

    @property
    def boxes(self):
        return [a.boxes for a in self.annotations]

    @property
    def n_classes(self):
        return self.masks.shape[-1]


# -- shapes ----------------------------------------------------------------------

def _shape_mask(kind, size, rng, h, w):
    """Mask of one connected object placed at a random position, or None."""
    r = size / 2.0
    cy = rng.uniform(r + 1, h - r - 2)
    cx = rng.uniform(r + 1, w - r - 2)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if kind == "ellipse":
        a = r
        b = r * rng.uniform(0.55, 1.0)
        t = rng.uniform(0, np.pi)
        u = (xx - cx) * np.cos(t) + (yy - cy) * np.sin(t)
        v = -(xx - cx) * np.sin(t) + (yy - cy) * np.cos(t)
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    if kind == "rectangle":
        hh = r * rng.uniform(0.5, 1.0)
        return (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= hh)
    # blob: discs whose centres lie inside a main disc, so the union is connected
    main = r * rng.uniform(0.55, 0.75)
    m = (xx - cx) ** 2 + (yy - cy) ** 2 <= main ** 2
    for _ in range(rng.integers(2, 5)):
        ang = rng.uniform(0, 2 * np.pi)
        d = rng.uniform(0, main * 0.9)
        rr = rng.uniform(0.3, 1.0) * (r - d)
        rr = max(rr, 1.0)
        m |= (xx - cx - d * np.cos(ang)) ** 2 + (yy - cy - d * np.sin(ang)) ** 2 <= rr ** 2
    return m


def _smooth_field(rng, h, w, scale=8.0):
    f = ndimage.gaussian_filter(rng.standard_normal((h, w)), scale, mode="wrap")
    f -= f.min()
    peak = f.max()
    return f / peak if peak > 0 else f


def generate_image(spec: SyntheticSpec, index: int, max_tries: int = 200):
    """One ``(image, mask, boxes)`` triple from the per-image stream ``(seed, index)``."""
    rng = np.random.default_rng([spec.seed, index])
    h, w, C = spec.height, spec.width, spec.n_classes
    mask = np.zeros((h, w, C), dtype=np.uint8)
    occupied = np.zeros((h, w), dtype=bool)
    n_obj = int(rng.integers(spec.shapes_per_image[0], spec.shapes_per_image[1] + 1))
    bg = 0.1 + 0.3 * _smooth_field(rng, h, w)
    image = bg.copy()
    for _ in range(n_obj):
        for _ in range(max_tries):
            kind = spec.kinds[int(rng.integers(len(spec.kinds)))]
            size = rng.uniform(spec.size_range[0], spec.size_range[1])
            obj = _shape_mask(kind, size, rng, h, w)
            if not obj.any():
                continue
            _, n = ndimage.label(obj, structure=_EIGHT)
            if n != 1:
                continue
            # keep a one-pixel gap so objects never merge under 8-connectivity
            if (ndimage.binary_dilation(obj, _EIGHT, iterations=2) & occupied).any():
                continue
            break
        else:
            raise GenerationError(index, "could not place a disjoint object")
        c = int(rng.integers(C))
        occupied |= obj
        mask[obj, c] = 1
        level = 0.45 + rng.uniform(*spec.contrast)
        image[obj] = level
    if spec.noise > 0:
        image = image + rng.normal(0.0, spec.noise, size=image.shape)
    image = np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
    boxes = []
    for c in range(C):
        boxes.extend(tight_box_from_mask(mask[:, :, c], category=c + 1))
    return image, mask, boxes


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Deterministic dataset; image ``i`` depends only on ``(spec.seed, i)``."""
    imgs, masks, anns = [], [], []
    for i in range(spec.count):
        img, m, boxes = generate_image(spec, i)
        imgs.append(img)
        masks.append(m)
        anns.append(Annotation(boxes, [(0, 0, 0, 0)] * len(boxes), m))
    volumes = np.arange(spec.count) // max(1, spec.slices_per_volume)
    return Dataset(np.stack(imgs), np.stack(masks), anns, volumes)


# -- boxes ----------------------------------------------------------------------------

def tight_box_from_mask(mask, category: int = 1) -> list[BBox]:
    """Smallest enclosing box of every 8-connected component, in label order."""
    mask = np.asarray(mask).astype(bool)
    labels, n = ndimage.label(mask, structure=_EIGHT)
    boxes = []
    for sl in ndimage.find_objects(labels):
        ys, xs = sl
        boxes.append(BBox(xs.start, ys.start, xs.stop - 1, ys.stop - 1, category))
    return boxes


def perturb_box_with_margins(box: BBox, spec: PerturbSpec, rng, dims):
    """Loosened box and the effective ``(mx1, mx2, my1, my2)`` after clamping."""
    box.check_within(dims)
    h, w = dims[:2]
    mx1, mx2, my1, my2 = spec.draw(rng)
    x1 = max(box.x1 - mx1, 0)
    x2 = min(box.x2 + mx2, w - 1)
    y1 = max(box.y1 - my1, 0)
    y2 = min(box.y2 + my2, h - 1)
    out = BBox(x1, y1, x2, y2, box.category)
    return out, (box.x1 - x1, x2 - box.x2, box.y1 - y1, y2 - box.y2)


def perturb_box(box: BBox, spec: PerturbSpec, rng, dims) -> BBox:
    """Move every side outward by a drawn margin, clamped to the image."""
    return perturb_box_with_margins(box, spec, rng, dims)[0]


def perturb_dataset(dataset: Dataset, spec: PerturbSpec, seed: int = 0) -> Dataset:
    """Copy of ``dataset`` with loosened boxes; margins recorded per box."""
    dims = dataset.images.shape[1:]
    anns = []
    for i, ann in enumerate(dataset.annotations):
        rng = np.random.default_rng([seed, i, 1])
        boxes, margins = [], []
        for b in ann.boxes:
            nb, m = perturb_box_with_margins(b, spec, rng, dims)
            boxes.append(nb)
            margins.append(m)
        anns.append(Annotation(boxes, margins, ann.mask))
    return replace(dataset, annotations=anns)


def mard(object_w, object_h, mx1, mx2, my1, my2) -> float:
    """Mean absolute relative difference between a box and its object."""
    if object_w < 1 or object_h < 1:
        raise ContractError("object width and height must be >= 1")
    return 0.5 * ((mx1 + mx2) / object_w + (my1 + my2) / object_h)


def mard_values(dataset: Dataset) -> np.ndarray:
    """MARD of every box, using the tight box implied by its recorded margins."""
    vals = []
    for ann in dataset.annotations:
        for b, (mx1, mx2, my1, my2) in zip(ann.boxes, ann.margins):
            w = b.width - mx1 - mx2
            h = b.height - my1 - my2
            vals.append(mard(w, h, mx1, mx2, my1, my2))
    return np.asarray(vals)


def dataset_mard_stats(dataset: Dataset, spec: PerturbSpec | None = None, seed: int = 0):
    """``(mean, std)`` of MARD over all boxes, after perturbing with ``spec`` if given."""
    if spec is not None:
        dataset = perturb_dataset(dataset, spec, seed)
    vals = mard_values(dataset)
    if vals.size == 0:
        return 0.0, 0.0
    return float(vals.mean()), float(vals.std())


# -- PGM ----------------------------------------------------------------------------

def write_pgm(path, array):
    """Write values in [0, 1] (or uint8) as binary 8-bit PGM."""
    a = np.asarray(array)
    if a.dtype == bool:
        a = a.astype(np.float64)
    if a.dtype != np.uint8:
        a = np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = a.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(a.tobytes())


def read_pgm_u8(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PGM is supported")
    pos += 1
    raw = data[pos:pos + w * h]
    if len(raw) != w * h:
        raise FormatError(f"{path}: truncated pixel data")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w)


def read_pgm(path) -> np.ndarray:
    return read_pgm_u8(path).astype(np.float64) / 255.0


# -- annotations CSV ---------------------------------------------------------------------

ANNOTATION_FIELDS = ["image_id", "category", "x1", "y1", "x2", "y2", "mx1", "mx2", "my1", "my2"]


def write_annotations(path, annotations):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(ANNOTATION_FIELDS)
        for i, ann in enumerate(annotations):
            margins = ann.margins or [(0, 0, 0, 0)] * len(ann.boxes)
            for b, m in zip(ann.boxes, margins):
                wr.writerow([i, b.category, b.x1, b.y1, b.x2, b.y2, *m])


def read_annotations(path, n_images=None) -> list[Annotation]:
    rows = {}
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        missing = set(ANNOTATION_FIELDS[:6]) - set(rd.fieldnames or [])
        if missing:
            raise FormatError(f"{path}: missing columns {sorted(missing)}")
        for line, r in enumerate(rd, start=2):
            try:
                i = int(r["image_id"])
                box = BBox(int(r["x1"]), int(r["y1"]), int(r["x2"]), int(r["y2"]), int(r["category"]))
                m = tuple(int(r.get(k) or 0) for k in ("mx1", "mx2", "my1", "my2"))
            except (ValueError, ContractError) as exc:
                raise FormatError(f"{path}:{line}: {exc}") from exc
            rows.setdefault(i, []).append((box, m))
    n = n_images if n_images is not None else (max(rows) + 1 if rows else 0)
    return [Annotation([b for b, _ in rows.get(i, [])], [m for _, m in rows.get(i, [])])
            for i in range(n)]


# -- dataset directories ----------------------------------------------------------------

def save_dataset(dataset: Dataset, out_dir):
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    for i, img in enumerate(dataset.images):
        write_pgm(os.path.join(out_dir, "images", f"{i:05d}.pgm"), img)
        for c in range(dataset.n_classes):
            write_pgm(os.path.join(out_dir, "masks", f"{i:05d}_c{c + 1}.pgm"),
                      dataset.masks[i, :, :, c].astype(np.uint8) * 255)
    write_annotations(os.path.join(out_dir, "annotations.csv"), dataset.annotations)
    with open(os.path.join(out_dir, "volumes.csv"), "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["image_id", "volume_id"])
        for i, v in enumerate(dataset.volumes):
            wr.writerow([i, int(v)])


def load_dataset(in_dir) -> Dataset:
    img_dir = os.path.join(in_dir, "images")
    if not os.path.isdir(img_dir):
        raise FormatError(f"{in_dir}: no images/ directory")
    names = sorted(f for f in os.listdir(img_dir) if f.endswith(".pgm"))
    if not names:
        raise FormatError(f"{img_dir}: no .pgm images")
    ids = [int(os.path.splitext(n)[0]) for n in names]
    if ids != list(range(len(ids))):
        raise FormatError(f"{img_dir}: image ids must be 0..N-1")
    images = np.stack([read_pgm(os.path.join(img_dir, n)) for n in names])
    mask_dir = os.path.join(in_dir, "masks")
    C = 0
    while os.path.exists(os.path.join(mask_dir, f"00000_c{C + 1}.pgm")):
        C += 1
    C = max(C, 1)
    masks = np.zeros(images.shape + (C,), dtype=np.uint8)
    for i in ids:
        for c in range(C):
            p = os.path.join(mask_dir, f"{i:05d}_c{c + 1}.pgm")
            if os.path.exists(p):
                masks[i, :, :, c] = read_pgm_u8(p) > 127
    anns = read_annotations(os.path.join(in_dir, "annotations.csv"), len(ids))
    for i, a in enumerate(anns):
        a.mask = masks[i]
    vpath = os.path.join(in_dir, "volumes.csv")
    volumes = np.arange(len(ids))
    if os.path.exists(vpath):
        with open(vpath, newline="") as fh:
            for r in csv.DictReader(fh):
                volumes[int(r["image_id"])] = int(r["volume_id"])
    return Dataset(images, masks, anns, volumes)


# -- prediction dumps -----------------------------------------------------------------

def write_predictions(path, pred):
    """``BMIL`` magic, u32 version, u32 H, W, C, then float32 LE values (row-major, category-minor)."""
    pred = np.asarray(pred)
    if pred.ndim == 2:
        pred = pred[..., None]
    h, w, c = pred.shape
    with open(path, "wb") as fh:
        fh.write(PRED_MAGIC + struct.pack("<4I", PRED_VERSION, h, w, c))
        fh.write(np.ascontiguousarray(pred, dtype="<f4").tobytes())


def read_predictions(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != PRED_MAGIC:
        raise FormatError(f"{path}: bad prediction magic")
    version, h, w, c = struct.unpack("<4I", data[4:20])
    if version != PRED_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    payload = data[20:]
    if len(payload) != 4 * h * w * c:
        raise FormatError(f"{path}: payload size mismatch")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, c).astype(np.float64)
