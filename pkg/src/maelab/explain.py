"""Grad-CAM heatmaps, heatmap-to-box extraction and MAE anomaly difference maps."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .data import resize_bilinear
from .mae import MaskedAutoencoder, MaskPlan, complementary_plans, make_mask_plan
from .metrics import Box, average_precision, iou
from .vit import patchify, unpatchify


@dataclass
class Heatmap:
    values: np.ndarray  # [H, W], non-negative
    source: str = "gradcam"


@dataclass
class AnomalyMap:
    values: np.ndarray  # [H, W] = channel-mean |reconstruction - original|
    source: str = "anomaly"


def grad_cam(model, image: np.ndarray, class_index: int, target_layer: str | None = None) -> Heatmap:
    """Grad-CAM for a token model exposing ``forward_with_activation``.

    The activation at ``target_layer`` is read as [tokens, channels]; leading
    non-patch tokens (class token) are dropped before reshaping to the grid.
    """
    image = np.asarray(image)
    batch = image[None] if image.ndim == 3 else image
    logits, act, n_prefix = model.forward_with_activation(batch, target_layer)
    n_classes = logits.shape[-1]
    if not 0 <= class_index < n_classes:
        raise IndexError(f"class_index {class_index} out of range for {n_classes} classes")
    score = logits[0, class_index]
    if score.requires_grad:
        score.backward()
    a = act.data[0, n_prefix:].astype(np.float64)
    g = act.grad[0, n_prefix:].astype(np.float64) if act.grad is not None else np.zeros_like(a)
    weights = g.mean(axis=0)
    cam = np.maximum(a @ weights, 0.0)
    h, w = batch.shape[-2:]
    rows = int(round(np.sqrt(cam.size * h / w)))
    cam = cam.reshape(rows, cam.size // rows)
    up = resize_bilinear(cam[None], h, w)[0]
    for t in model_parameters(model):
        t.grad = None
    return Heatmap(np.maximum(up, 0.0), "gradcam")


def model_parameters(model):
    params = getattr(model, "params", None)
    return params.values() if isinstance(params, dict) else ()


_EIGHT = np.ones((3, 3), dtype=int)


def heatmap_to_box(h, rel_threshold: float = 0.5) -> Box | None:
    """Tight box around the largest 8-connected region of ``h >= rel_threshold * max(h)``.

    Returns None for an all-zero heatmap.
    """
    if not 0 < rel_threshold < 1:
        raise ValueError(f"rel_threshold must lie in (0, 1), got {rel_threshold}")
    values = h.values if isinstance(h, (Heatmap, AnomalyMap)) else np.asarray(h)
    peak = float(values.max()) if values.size else 0.0
    if peak <= 0:
        return None
    mask = values >= rel_threshold * peak
    labels, n = ndimage.label(mask, structure=_EIGHT)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    best = int(np.argmax(sizes)) + 1
    ys, xs = np.nonzero(labels == best)
    return Box(int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1))


def localization_ious(heatmaps, gt_boxes, rel_threshold: float = 0.5) -> list[float]:
    """IoU between each heatmap's extracted box and its ground-truth box (0 if no box)."""
    out = []
    for hm, gt in zip(heatmaps, gt_boxes):
        pred = heatmap_to_box(hm, rel_threshold)
        out.append(0.0 if pred is None else iou(pred, gt))
    return out


def ap_table(ious_by_class: dict[str, list[float]]) -> list[tuple[str, int, float, float]]:
    """Rows (name, n_cases, AP25 %, AP50 %) plus an 'All' row over every case."""
    rows = []
    everything: list[float] = []
    for name, ious in ious_by_class.items():
        everything.extend(ious)
        rows.append((name, len(ious), 100 * average_precision(ious, 0.25), 100 * average_precision(ious, 0.5)))
    rows.append(("All", len(everything), 100 * average_precision(everything, 0.25),
                 100 * average_precision(everything, 0.5)))
    return rows


# -- anomaly maps ------------------------------------------------------------------------------

def difference_map(reconstruction: np.ndarray, original: np.ndarray) -> AnomalyMap:
    return AnomalyMap(np.abs(np.asarray(reconstruction, np.float64) - np.asarray(original, np.float64)).mean(axis=0))


def ensemble_reconstruction(mae: MaskedAutoencoder, image: np.ndarray, plans: list[MaskPlan]) -> np.ndarray:
    """Average each patch's prediction over the plans that mask it."""
    x = np.asarray(image, dtype=mae.dtype)[None]
    p = mae.cfg.patch_size
    patches = patchify(x, p)
    total = np.zeros_like(patches, dtype=np.float64)
    count = np.zeros(patches.shape[:2])
    for plan in plans:
        with ad.no_grad():
            pred, _ = mae.forward(x, plan)
        pred = pred.data.astype(np.float64)
        if mae.normalize_targets:
            mean = patches.mean(axis=-1, keepdims=True)
            std = np.sqrt(patches.var(axis=-1, keepdims=True) + 1e-6)
            pred = pred * std + mean
        idx = plan.mask_indices[0]
        total[0, idx] += pred[0, idx]
        count[0, idx] += 1
    covered = count > 0
    avg = patches.astype(np.float64).copy()
    avg[covered] = total[covered] / count[covered][:, None]
    return unpatchify(avg, p, (x.shape[2] // p, x.shape[3] // p), x.shape[1])[0]


def anomaly_map(mae: MaskedAutoencoder, image: np.ndarray, strategy: str = "ensemble", k: int = 10,
                mask_ratio: float = 0.9, rng: np.random.Generator | None = None) -> AnomalyMap:
    """|reconstruction - image| averaged over channels.

    ``single`` reconstructs once under a random plan (visible patches are copied,
    so they contribute zero); ``ensemble`` uses ``k`` plans whose visible sets
    partition the patches, so every patch is predicted k-1 times.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    n = mae.cfg.num_patches
    if strategy == "single":
        plan = make_mask_plan(n, mask_ratio, 1, rng)
        recon = mae.reconstruct(np.asarray(image)[None], plan)[0]
    elif strategy == "ensemble":
        recon = ensemble_reconstruction(mae, image, complementary_plans(n, k, rng))
    else:
        raise ValueError(f"unknown anomaly strategy {strategy!r}")
    return difference_map(recon, image)


# -- export ----------------------------------------------------------------------------------

GRID_MAGIC = b"HMAP"
_DTYPE_F32 = 1


def write_grid(path, values: np.ndarray) -> None:
    """16-byte header (magic, dtype code, H, W as little-endian u32) + f32 payload."""
    arr = np.ascontiguousarray(values, dtype="<f4")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC + struct.pack("<III", _DTYPE_F32, h, w))
        fh.write(arr.tobytes())


def read_grid(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if head[:4] != GRID_MAGIC:
            raise ValueError(f"{path}: not a heatmap grid")
        code, h, w = struct.unpack("<III", head[4:])
        if code != _DTYPE_F32:
            raise ValueError(f"{path}: unsupported dtype code {code}")
        return np.frombuffer(fh.read(4 * h * w), dtype="<f4").reshape(h, w).copy()


def save_heatmap_png(path, values: np.ndarray) -> None:
    from PIL import Image

    v = np.asarray(values, np.float64)
    span = v.max() - v.min()
    scaled = (v - v.min()) / span if span > 0 else np.zeros_like(v)
    Image.fromarray(np.round(scaled * 255).astype(np.uint8)).save(path)
