"""Manifests, augmentation and a deterministic synthetic radiograph generator.

Images are float arrays ``[C, H, W]`` in [0, 1] until :func:`normalize`.
"""
from __future__ import annotations

import csv
import json
import os
import queue
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
from scipy import ndimage

from .metrics import Box

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


# -- manifests -------------------------------------------------------------------------

@dataclass
class Sample:
    image_ref: str
    labels: np.ndarray
    boxes: list[tuple[int, Box]] = field(default_factory=list)


@dataclass
class DatasetManifest:
    entries: list[Sample]
    class_names: list[str]

    def __post_init__(self):
        k = len(self.class_names)
        for s in self.entries:
            if len(s.labels) != k:
                raise ValueError(f"{s.image_ref}: {len(s.labels)} labels for {k} classes")
            for c, _ in s.boxes:
                if not 0 <= c < k:
                    raise ValueError(f"{s.image_ref}: box class {c} out of range")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def labels(self) -> np.ndarray:
        return np.stack([s.labels for s in self.entries]) if self.entries else np.zeros((0, len(self.class_names)))


def write_manifest(manifest: DatasetManifest, csv_path, boxes_path=None) -> None:
    """CSV ``path,label_0,...`` plus an optional JSON box sidecar ``{path: [{class,x,y,w,h}]}``."""
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path"] + [f"label_{i}" for i in range(len(manifest.class_names))])
        for s in manifest.entries:
            w.writerow([s.image_ref] + [int(v) for v in s.labels])
    if boxes_path is not None:
        side = {
            s.image_ref: [{"class": int(c), "x": b.x, "y": b.y, "w": b.w, "h": b.h} for c, b in s.boxes]
            for s in manifest.entries if s.boxes
        }
        with open(boxes_path, "w") as fh:
            json.dump(side, fh, indent=1, sort_keys=True)


def read_manifest(csv_path, boxes_path=None, class_names: list[str] | None = None) -> DatasetManifest:
    with open(csv_path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "path":
        raise ValueError(f"{csv_path}: expected a header starting with 'path'")
    k = len(rows[0]) - 1
    side = {}
    if boxes_path is not None and os.path.exists(boxes_path):
        with open(boxes_path) as fh:
            side = json.load(fh)
    entries = []
    for row in rows[1:]:
        if not row:
            continue
        boxes = [(int(b["class"]), Box(int(b["x"]), int(b["y"]), int(b["w"]), int(b["h"]))) for b in side.get(row[0], [])]
        entries.append(Sample(row[0], np.array([int(v) for v in row[1:]], dtype=np.int64), boxes))
    return DatasetManifest(entries, class_names or [h.replace("label_", "class_") for h in rows[0][1:]][:k])


def load_png(path) -> np.ndarray:
    """8- or 16-bit grayscale PNG -> float64 [1, H, W] in [0, 1]."""
    from PIL import Image

    with Image.open(path) as im:
        arr = np.array(im)
    if arr.ndim == 3:
        arr = arr[..., :3].mean(axis=-1)
    scale = 65535.0 if arr.dtype == np.uint16 or arr.max() > 255 else 255.0
    return (arr.astype(np.float64) / scale)[None]


def save_png16(path, image: np.ndarray) -> None:
    from PIL import Image

    arr = np.clip(np.asarray(image).squeeze(), 0, 1)
    Image.fromarray(np.round(arr * 65535).astype(np.uint16)).save(path)


# -- geometry -----------------------------------------------------------------------------

def resize_bilinear(image: np.ndarray, out_h: int, out_w: int, crop=None) -> np.ndarray:
    """Bilinear resample of ``image[C, H, W]`` (optionally a crop ``(top, left, h, w)``)."""
    c, h, w = image.shape
    top, left, ch, cw = crop if crop is not None else (0, 0, h, w)
    if crop is None and (out_h, out_w) == (h, w):
        return image.copy()
    # pixel-centre alignment
    ys = top + (np.arange(out_h) + 0.5) * ch / out_h - 0.5
    xs = left + (np.arange(out_w) + 0.5) * cw / out_w - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    a = image[:, y0][:, :, x0]
    b = image[:, y0][:, :, x1]
    cc = image[:, y1][:, :, x0]
    d = image[:, y1][:, :, x1]
    out = (a * (1 - wx) + b * wx) * (1 - wy) + (cc * (1 - wx) + d * wx) * wy
    return out.astype(image.dtype)


def sample_crop(h: int, w: int, scale, ratio, rng: np.random.Generator) -> tuple[int, int, int, int]:
    """Crop window (top, left, height, width) for random resized crop.

    Up to 10 rejection draws; falls back to a centre crop clamped to the ratio range.
    """
    lo, hi = scale
    if not 0 < lo <= hi <= 1:
        raise ValueError(f"crop scale must satisfy 0 < lo <= hi <= 1, got {scale}")
    area = h * w
    log_r = np.log(ratio)
    for _ in range(10):
        target = area * rng.uniform(lo, hi)
        aspect = np.exp(rng.uniform(log_r[0], log_r[1]))
        cw = int(round(np.sqrt(target * aspect)))
        ch = int(round(np.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h and lo * area <= cw * ch <= hi * area:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    in_ratio = w / h
    if in_ratio < min(ratio):
        cw, ch = w, int(round(w / min(ratio)))
    elif in_ratio > max(ratio):
        ch, cw = h, int(round(h * max(ratio)))
    else:
        cw, ch = w, h
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def random_resized_crop(image, scale=(0.5, 1.0), ratio=(3 / 4, 4 / 3), out_size: int = 224,
                        rng: np.random.Generator | None = None, return_crop: bool = False):
    rng = rng if rng is not None else np.random.default_rng()
    _, h, w = image.shape
    crop = sample_crop(h, w, scale, ratio, rng)
    out = resize_bilinear(image, out_size, out_size, crop)
    return (out, crop) if return_crop else out


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, :, ::-1].copy()


# -- RandAug (grayscale-safe pool) --------------------------------------------------------

def _affine(image, matrix, rng=None):
    c, h, w = image.shape
    centre = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = centre - matrix @ centre
    return np.stack([
        ndimage.affine_transform(ch, matrix, offset=offset, order=1, mode="nearest") for ch in image
    ]).astype(image.dtype)


def _signed(level: float, rng) -> float:
    return level if rng.random() < 0.5 else -level


def _translate(img, m, rng):
    _, h, w = img.shape
    dy = _signed(m / 10 * 0.3 * h, rng) * (rng.random() < 0.5)
    dx = _signed(m / 10 * 0.3 * w, rng) if dy == 0 else 0.0
    return np.stack([ndimage.shift(ch, (dy, dx), order=1, mode="nearest") for ch in img]).astype(img.dtype)


def _rotate(img, m, rng):
    t = np.deg2rad(_signed(m / 10 * 30.0, rng))
    return _affine(img, np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]]))


def _shear(img, m, rng):
    s = _signed(m / 10 * 0.3, rng)
    mat = np.array([[1.0, 0.0], [s, 1.0]]) if rng.random() < 0.5 else np.array([[1.0, s], [0.0, 1.0]])
    return _affine(img, mat)


def _blend(a, b, factor):
    return np.clip(b + factor * (a - b), 0, 1).astype(a.dtype)


def _contrast(img, m, rng):
    return _blend(img, np.full_like(img, img.mean()), 1 + _signed(m / 10 * 0.9, rng))


def _brightness(img, m, rng):
    return _blend(img, np.zeros_like(img), 1 + _signed(m / 10 * 0.9, rng))


def _sharpness(img, m, rng):
    smooth = np.stack([ndimage.uniform_filter(ch, 3, mode="nearest") for ch in img])
    return _blend(img, smooth, 1 + _signed(m / 10 * 0.9, rng))


def _posterize(img, m, rng):
    bits = 8 - int(round(m / 10 * 4))
    if bits >= 8:
        return img.copy()
    levels = 2 ** bits
    return (np.floor(img * (levels - 1) + 0.5) / (levels - 1)).astype(img.dtype)


def _equalize(img, m, rng):
    flat = img.reshape(-1)
    ranks = np.argsort(np.argsort(flat, kind="stable"), kind="stable")
    eq = (ranks / max(flat.size - 1, 1)).reshape(img.shape)
    return (img + (m / 10) * (eq - img)).astype(img.dtype)


RANDAUG_OPS: dict[str, Callable] = {
    "translate": _translate,
    "rotate": _rotate,
    "shear": _shear,
    "contrast": _contrast,
    "brightness": _brightness,
    "sharpness": _sharpness,
    "posterize": _posterize,
    "equalize": _equalize,
}


def randaug_lite(image: np.ndarray, num_ops: int = 2, magnitude: float = 6, rng: np.random.Generator | None = None):
    """Apply ``num_ops`` ops drawn uniformly (with replacement) from :data:`RANDAUG_OPS`."""
    if not 0 <= magnitude <= 10:
        raise ValueError(f"RandAug magnitude must lie in [0, 10], got {magnitude}")
    rng = rng if rng is not None else np.random.default_rng()
    names = list(RANDAUG_OPS)
    out = image
    for _ in range(num_ops):
        op = names[int(rng.integers(len(names)))]
        if magnitude == 0:
            continue
        out = RANDAUG_OPS[op](out, magnitude, rng)
    return out.copy() if out is image else out


# -- normalization ----------------------------------------------------------------------

def normalize(image: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64).reshape(-1, 1, 1)
    std = np.asarray(std, dtype=np.float64).reshape(-1, 1, 1)
    if np.any(std <= 0):
        raise ValueError("normalize: std must be positive per channel")
    return ((image - mean) / std).astype(image.dtype)


def denormalize(image: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64).reshape(-1, 1, 1)
    std = np.asarray(std, dtype=np.float64).reshape(-1, 1, 1)
    return (image * std + mean).astype(image.dtype)


def to_three_channels(image: np.ndarray) -> np.ndarray:
    return np.repeat(image, 3, axis=0) if image.shape[0] == 1 else image


@dataclass(frozen=True)
class AugmentConfig:
    crop_scale: tuple[float, float] | None = (0.5, 1.0)  # None disables random resized crop
    hflip_prob: float = 0.5
    randaug: tuple[int, float] | None = None  # (num_ops, magnitude)
    mean: tuple[float, ...] = IMAGENET_MEAN
    std: tuple[float, ...] = IMAGENET_STD
    train_size: int = 224
    pretrain_size: int = 256

    def __post_init__(self):
        if self.crop_scale is not None:
            lo, hi = self.crop_scale
            if not 0 < lo <= hi <= 1:
                raise ValueError(f"crop scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        if self.randaug is not None and not 0 <= self.randaug[1] <= 10:
            raise ValueError("RandAug magnitude must lie in [0, 10]")


def pretrain_transform(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """resize -> random resized crop -> horizontal flip -> normalize; nothing else."""
    x = to_three_channels(image)
    x = resize_bilinear(x, cfg.pretrain_size, cfg.pretrain_size)
    if cfg.crop_scale is not None:
        x = random_resized_crop(x, cfg.crop_scale, out_size=cfg.train_size, rng=rng)
    else:
        x = resize_bilinear(x, cfg.train_size, cfg.train_size)
    if rng.random() < cfg.hflip_prob:
        x = hflip(x)
    return normalize(x, cfg.mean, cfg.std)


def finetune_transform(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Pre-training pipeline plus RandAug before normalization; no mixup/cutmix."""
    x = to_three_channels(image)
    x = resize_bilinear(x, cfg.pretrain_size, cfg.pretrain_size)
    if cfg.crop_scale is not None:
        x = random_resized_crop(x, cfg.crop_scale, out_size=cfg.train_size, rng=rng)
    else:
        x = resize_bilinear(x, cfg.train_size, cfg.train_size)
    if rng.random() < cfg.hflip_prob:
        x = hflip(x)
    if cfg.randaug is not None:
        x = randaug_lite(x, cfg.randaug[0], cfg.randaug[1], rng)
    return normalize(x, cfg.mean, cfg.std)


def eval_transform(image: np.ndarray, cfg: AugmentConfig) -> np.ndarray:
    x = resize_bilinear(to_three_channels(image), cfg.train_size, cfg.train_size)
    return normalize(x, cfg.mean, cfg.std)


# -- synthetic pseudo-radiographs ---------------------------------------------------------

@dataclass(frozen=True)
class LesionKind:
    prior: float
    radius: tuple[float, float]
    delta: float
    shape: str = "blob"  # blob | ring | bar | texture


DEFAULT_LESIONS = (
    LesionKind(0.35, (3.0, 4.5), 0.40, "blob"),
    LesionKind(0.30, (3.5, 5.0), -0.35, "blob"),
    LesionKind(0.30, (4.5, 6.5), 0.45, "bar"),
    LesionKind(0.25, (3.5, 4.5), 0.30, "texture"),
)


@dataclass(frozen=True)
class SyntheticSpec:
    seed: int = 0
    image_size: int = 32
    lesions: tuple[LesionKind, ...] = DEFAULT_LESIONS
    noise: float = 0.02
    jitter: float = 0.04  # per-sample anatomical variation, fraction of size

    @property
    def n_classes(self) -> int:
        return len(self.lesions)

    def lesion_free(self) -> "SyntheticSpec":
        return SyntheticSpec(self.seed, self.image_size,
                             tuple(LesionKind(0.0, k.radius, k.delta, k.shape) for k in self.lesions),
                             self.noise, self.jitter)

    @classmethod
    def with_classes(cls, n_classes: int, seed: int = 0, image_size: int = 32) -> "SyntheticSpec":
        kinds = tuple(DEFAULT_LESIONS[i % len(DEFAULT_LESIONS)] for i in range(n_classes))
        return cls(seed=seed, image_size=image_size, lesions=kinds)


def _background(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    s = spec.image_size
    yy, xx = np.mgrid[0:s, 0:s] / (s - 1)
    j = spec.jitter
    cy = 0.52 + rng.uniform(-j, j)
    off = 0.22 + rng.uniform(-j, j) / 2
    ry, rx = 0.30 + rng.uniform(-j, j), 0.15 + rng.uniform(-j, j) / 2
    img = 0.50 + 0.10 * (yy - 0.5)  # soft vertical gradient
    for sx in (0.5 - off, 0.5 + off):
        d = ((yy - cy) / ry) ** 2 + ((xx - sx) / rx) ** 2
        img -= 0.25 * np.clip(1 - d, 0, 1) ** 0.5  # lung fields
    img += 0.10 * np.exp(-((xx - 0.5) / 0.08) ** 2) * (yy > 0.25)  # mediastinum
    phase = rng.uniform(0, 2 * np.pi)
    img += 0.04 * np.sin(2 * np.pi * 4.5 * yy + phase) * (np.abs(xx - 0.5) > 0.1)  # ribs
    coarse = rng.standard_normal((4, 4))
    img += spec.noise * ndimage.zoom(coarse, s / 4, order=3)[:s, :s]
    return np.clip(img, 0.05, 0.95)


def _lesion_layer(kind: LesionKind, s: int, cy: float, cx: float, r: float, rng) -> np.ndarray:
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    if kind.shape == "bar":
        half_len, half_w = r, 1.0
        horizontal = rng.random() < 0.5
        dy, dx = (half_w, half_len) if horizontal else (half_len, half_w)
        inside = (np.abs(yy - cy) <= dy) & (np.abs(xx - cx) <= dx)
        return np.where(inside, kind.delta, 0.0)
    d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    inside = d <= r
    if kind.shape == "ring":
        inside &= d >= r - 1.5
        return np.where(inside, kind.delta, 0.0)
    if kind.shape == "texture":
        checker = np.where((yy.astype(int) // 2 + xx.astype(int) // 2) % 2 == 0, 1.0, -1.0)
        return np.where(inside, kind.delta * checker, 0.0)
    return np.where(inside, kind.delta * (1 - 0.5 * (d / r) ** 2), 0.0)


def _support_box(layer: np.ndarray) -> Box:
    ys, xs = np.nonzero(layer)
    return Box(int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1))


def _draw_labels(spec: SyntheticSpec, rng) -> np.ndarray:
    return np.array([rng.random() < k.prior for k in spec.lesions], dtype=np.int64)


def synthetic_labels(spec: SyntheticSpec, index: int) -> np.ndarray:
    """Labels of sample ``index`` without rendering the image."""
    return _draw_labels(spec, np.random.default_rng([spec.seed, index]))


def generate_synthetic_layers(spec: SyntheticSpec, index: int):
    """(background, image, labels, boxes) for sample ``index``; pure in (spec, index).

    Lesions of different classes never overlap, and each box is the tight
    bounding box of its lesion's non-zero support.
    """
    rng = np.random.default_rng([spec.seed, index])
    labels = _draw_labels(spec, rng)
    bg = _background(spec, rng)
    s = spec.image_size
    img = bg.copy()
    boxes: list[tuple[int, Box]] = []
    occupied = np.zeros((s, s), bool)
    for c in np.nonzero(labels)[0]:
        kind = spec.lesions[c]
        for attempt in range(200):
            # crowded canvases: shrink the lesion after repeated misses
            r = rng.uniform(*kind.radius) * (1.0 if attempt < 50 else 0.7 if attempt < 120 else 0.5)
            margin = int(np.ceil(r)) + 1
            cy = rng.uniform(margin, s - 1 - margin)
            cx = rng.uniform(margin, s - 1 - margin)
            layer = _lesion_layer(kind, s, cy, cx, r, rng)
            box = _support_box(layer)
            grown = np.zeros_like(occupied)
            grown[max(box.y - 1, 0):box.y + box.h + 1, max(box.x - 1, 0):box.x + box.w + 1] = True
            if not (grown & occupied).any():
                break
        else:
            raise RuntimeError(f"could not place lesion of class {c} in sample {index}")
        occupied |= grown
        img = img + layer
        boxes.append((int(c), box))
    return bg[None], np.clip(img, 0.0, 1.0)[None], labels, boxes


def generate_synthetic(spec: SyntheticSpec, index: int):
    """(image [1, H, W] in [0, 1], multi-hot labels, [(class, Box)])."""
    _, img, labels, boxes = generate_synthetic_layers(spec, index)
    return img, labels, boxes


ANOMALY_KINDS = ("bar", "glyph", "square")


def inject_anomaly(image: np.ndarray, rng: np.random.Generator, kind: str | None = None,
                   size: int | None = None) -> tuple[np.ndarray, Box]:
    """Stamp a bright foreign object (bar / letter-like glyph / marker square) onto ``image``."""
    _, h, w = image.shape
    kind = kind or ANOMALY_KINDS[int(rng.integers(len(ANOMALY_KINDS)))]
    size = size or max(4, h // 5)
    y = int(rng.integers(1, h - size - 1))
    x = int(rng.integers(1, w - size - 1))
    stamp = np.zeros((size, size))
    if kind == "bar":
        t = max(1, size // 3)
        stamp[(size - t) // 2:(size - t) // 2 + t, :] = 1
    elif kind == "glyph":
        t = max(1, size // 4)
        stamp[:, :t] = 1  # "L"-shaped mark
        stamp[-t:, :] = 1
    else:
        stamp[:, :] = 1
    out = image.copy()
    region = out[:, y:y + size, x:x + size]
    out[:, y:y + size, x:x + size] = np.where(stamp > 0, 1.0, region)
    ys, xs = np.nonzero(stamp)
    return out, Box(x + int(xs.min()), y + int(ys.min()), int(np.ptp(xs)) + 1, int(np.ptp(ys)) + 1)


def synthetic_arrays(spec: SyntheticSpec, indices) -> tuple[np.ndarray, np.ndarray, list]:
    imgs, labels, boxes = [], [], []
    for i in indices:
        im, lab, bx = generate_synthetic(spec, int(i))
        imgs.append(im)
        labels.append(lab)
        boxes.append(bx)
    return np.stack(imgs), np.stack(labels), boxes


# -- datasets and loading -------------------------------------------------------------------

@dataclass
class ArrayDataset:
    """In-memory dataset of raw images [N, C, H, W] in [0, 1] with multi-hot labels."""

    images: np.ndarray
    labels: np.ndarray
    boxes: list = field(default_factory=list)
    class_names: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "ArrayDataset":
        idx = np.asarray(idx)
        boxes = [self.boxes[i] for i in idx] if self.boxes else []
        return ArrayDataset(self.images[idx], self.labels[idx], boxes, self.class_names)

    @classmethod
    def synthetic(cls, spec: SyntheticSpec, n: int, offset: int = 0) -> "ArrayDataset":
        imgs, labels, boxes = synthetic_arrays(spec, range(offset, offset + n))
        return cls(imgs, labels, boxes, [f"class_{i}" for i in range(spec.n_classes)])

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, root=".") -> "ArrayDataset":
        imgs = [load_png(Path(root) / s.image_ref) for s in manifest.entries]
        return cls(np.stack(imgs), manifest.labels, [s.boxes for s in manifest.entries], manifest.class_names)


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    # one stream per (epoch, sample): identical results at any worker count
    return np.random.default_rng([seed, epoch, index])


def iterate_batches(
    dataset: ArrayDataset, batch_size: int, transform: Callable | None, seed: int, epoch: int,
    shuffle: bool = True, workers: int = 1, prefetch: int = 2,
) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield (images, labels, indices) batches; the last partial batch is kept.

    With ``workers > 1`` samples are transformed on a thread pool and batches
    are produced ahead of time into a bounded queue.
    """
    n = len(dataset)
    order = np.random.default_rng([seed, epoch, 2**31 - 1]).permutation(n) if shuffle else np.arange(n)
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]

    def make(idx):
        if transform is None:
            xs = dataset.images[idx]
        else:
            xs = np.stack([transform(dataset.images[i], sample_rng(seed, epoch, int(i))) for i in idx])
        return xs, dataset.labels[idx], idx

    if workers <= 1:
        for idx in chunks:
            yield make(idx)
        return

    q: queue.Queue = queue.Queue(maxsize=prefetch)
    done = object()

    def producer():
        with ThreadPoolExecutor(workers) as pool:
            for idx in chunks:
                xs = list(pool.map(lambda i: transform(dataset.images[i], sample_rng(seed, epoch, int(i)))
                                   if transform else dataset.images[i], idx))
                q.put((np.stack(xs), dataset.labels[idx], idx))
        q.put(done)

    t = threading.Thread(target=producer, daemon=True)
    t.start()
    while True:
        item = q.get()
        if item is done:
            break
        yield item
    t.join()
