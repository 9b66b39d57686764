import numpy as np
import pytest
from scipy import ndimage

from maelab.data import SyntheticSpec, generate_synthetic, normalize, to_three_channels
from maelab.explain import (
    AnomalyMap,
    Heatmap,
    anomaly_map,
    ap_table,
    difference_map,
    ensemble_reconstruction,
    grad_cam,
    heatmap_to_box,
    localization_ious,
    read_grid,
    save_heatmap_png,
    write_grid,
)
from maelab.mae import DecoderConfig, MaskedAutoencoder
from maelab.metrics import Box
from maelab.vit import VisionTransformer, patchify, preset

from _models import ConstantModel, PatchReadout


def test_gradcam_peaks_in_the_read_patch():
    rng = np.random.default_rng(0)
    hits = 0
    for trial in range(100):
        target = int(rng.integers(16))
        image = rng.standard_normal((3, 32, 32))
        hm = grad_cam(PatchReadout(target, seed=trial), image, 0)
        assert hm.values.shape == (32, 32) and hm.values.min() >= 0
        y, x = np.unravel_index(np.argmax(hm.values), hm.values.shape)
        hits += (y // 8) * 4 + (x // 8) == target
    assert hits >= 95


def test_gradcam_constant_logit_gives_zero():
    hm = grad_cam(ConstantModel(3), np.ones((3, 32, 32)), 1)
    np.testing.assert_array_equal(hm.values, 0.0)


def test_gradcam_on_vit():
    for pooling in ("avg", "cls"):
        vit = VisionTransformer(preset("vit_tiny_test", num_classes=3, pooling=pooling), seed=0)
        vit.params["head.w"].data[:] = np.random.default_rng(1).standard_normal(vit.params["head.w"].shape)
        img = np.random.default_rng(2).standard_normal((3, 32, 32)).astype(np.float32)
        hm = grad_cam(vit, img, 2)
        assert hm.values.shape == (32, 32)
        assert hm.values.min() >= 0 and np.all(np.isfinite(hm.values))
        assert all(p.grad is None for p in vit.params.values())
        with pytest.raises(IndexError):
            grad_cam(vit, img, 3)


def test_box_of_single_rectangle():
    h = np.zeros((20, 30))
    h[3:9, 4:15] = 2.0
    assert heatmap_to_box(Heatmap(h)) == Box(4, 3, 11, 6)


def test_box_prefers_larger_component():
    h = np.zeros((30, 30))
    h[2:7, 2:12] = 1.0  # 50 px
    h[20:22, 20:25] = 1.0  # 10 px
    assert heatmap_to_box(h) == Box(2, 2, 10, 5)


def test_box_diagonal_pixels_connect():
    h = np.zeros((6, 6))
    for i in range(4):
        h[i, i] = 1.0
    h[5, 0] = h[5, 1] = 1.0
    assert heatmap_to_box(h) == Box(0, 0, 4, 4)


def test_box_none_and_validation():
    assert heatmap_to_box(np.zeros((4, 4))) is None
    for bad in (0.0, 1.0):
        with pytest.raises(ValueError):
            heatmap_to_box(np.ones((4, 4)), bad)


def _flood(mask, seed):
    """Plain BFS over the 8-neighbourhood."""
    seen = np.zeros_like(mask)
    stack = [seed]
    seen[seed] = True
    while stack:
        y, x = stack.pop()
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                ny, nx = y + dy, x + dx
                if 0 <= ny < mask.shape[0] and 0 <= nx < mask.shape[1] and mask[ny, nx] and not seen[ny, nx]:
                    seen[ny, nx] = True
                    stack.append((ny, nx))
    return seen


def test_box_matches_flood_fill_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        h = ndimage.gaussian_filter(rng.random((24, 24)), 1.5)
        box = heatmap_to_box(h, 0.6)
        mask = h >= 0.6 * h.max()
        best = None
        todo = mask.copy()
        while todo.any():
            comp = _flood(mask, tuple(np.argwhere(todo)[0]))
            todo &= ~comp
            if best is None or comp.sum() > best.sum():
                best = comp
        ys, xs = np.nonzero(best)
        assert box == Box(xs.min(), ys.min(), xs.max() - xs.min() + 1, ys.max() - ys.min() + 1)


def test_box_scale_invariant():
    h = np.random.default_rng(3).random((16, 16))
    assert heatmap_to_box(h) == heatmap_to_box(h * 37.5) == heatmap_to_box(Heatmap(h * 1e-4))


def test_localization_and_ap_table():
    h = np.zeros((10, 10))
    h[0:5, 0:5] = 1
    ious = localization_ious([h, np.zeros((10, 10))], [Box(0, 0, 5, 5), Box(0, 0, 2, 2)])
    assert ious == [1.0, 0.0]
    rows = ap_table({"a": [1.0, 0.3], "b": [0.1]})
    assert rows[0] == ("a", 2, 100.0, 50.0)
    assert rows[-1][:2] == ("All", 3)
    assert rows[-1][2] == pytest.approx(200 / 3)


def test_difference_map_definition():
    rng = np.random.default_rng(0)
    a, b = rng.random((3, 8, 8)), rng.random((3, 8, 8))
    m = difference_map(a, b)
    assert isinstance(m, AnomalyMap)
    np.testing.assert_allclose(m.values, np.abs(a - b).mean(axis=0))
    np.testing.assert_array_equal(difference_map(a, a).values, 0.0)


def _mae_and_image():
    mae = MaskedAutoencoder(preset("vit_desk"), DecoderConfig(1, 32, 4), seed=0)
    img = normalize(to_three_channels(generate_synthetic(SyntheticSpec(), 0)[0])).astype(np.float32)
    return mae, img


def test_ensemble_predicts_every_patch_and_is_deterministic():
    mae, img = _mae_and_image()
    a = anomaly_map(mae, img, "ensemble", k=10, rng=np.random.default_rng(4))
    b = anomaly_map(mae, img, "ensemble", k=10, rng=np.random.default_rng(4))
    assert a.values.tobytes() == b.values.tobytes()
    assert a.values.min() >= 0
    # an untrained decoder never reproduces a patch exactly, so every patch shows error
    per_patch = patchify(a.values[None, None], 4)[0].max(axis=-1)
    assert np.all(per_patch > 0)


def test_single_pass_copies_visible_patches():
    mae, img = _mae_and_image()
    m = anomaly_map(mae, img, "single", mask_ratio=0.75, rng=np.random.default_rng(0))
    zero_patches = (patchify(m.values[None, None], 4)[0].max(axis=-1) == 0).sum()
    assert zero_patches == 16
    with pytest.raises(ValueError):
        anomaly_map(mae, img, "median")


def test_ensemble_reconstruction_with_no_plans_is_input():
    mae, img = _mae_and_image()
    np.testing.assert_array_equal(ensemble_reconstruction(mae, img, []), img)


def test_grid_roundtrip(tmp_path):
    v = np.random.default_rng(0).random((7, 5)).astype(np.float32)
    write_grid(tmp_path / "g.hmap", v)
    raw = (tmp_path / "g.hmap").read_bytes()
    assert raw[:4] == b"HMAP" and len(raw) == 16 + 4 * 35
    np.testing.assert_array_equal(read_grid(tmp_path / "g.hmap"), v)
    (tmp_path / "bad").write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(ValueError):
        read_grid(tmp_path / "bad")
    save_heatmap_png(tmp_path / "h.png", v)
    assert (tmp_path / "h.png").stat().st_size > 0
