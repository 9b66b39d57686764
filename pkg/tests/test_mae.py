import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maelab import autodiff as ad
from maelab.data import SyntheticSpec, generate_synthetic, normalize, to_three_channels
from maelab.mae import (
    DecoderConfig,
    MaskedAutoencoder,
    MaskPlan,
    complementary_plans,
    keep_count,
    make_mask_plan,
    masked_psnr,
    patch_targets,
    reconstruct_image,
)
from maelab.optim import OptimizerConfig, make_optimizer
from maelab.vit import patchify, preset, unpatchify

DESK = preset("vit_desk", num_classes=4)
SMALL_DEC = DecoderConfig(1, 32, 4)


def _image(index=0, seed=0):
    img, _, _ = generate_synthetic(SyntheticSpec(seed=seed), index)
    return normalize(to_three_channels(img)).astype(np.float32)


@pytest.mark.parametrize("n, ratio, keep", [(256, 0.9, 26), (196, 0.75, 49), (196, 0.9, 20), (64, 0.9, 6)])
def test_keep_counts(n, ratio, keep):
    assert keep_count(n, ratio) == keep
    plan = make_mask_plan(n, ratio, 4, np.random.default_rng(0))
    assert plan.keep_indices.shape == (4, keep)
    assert plan.mask_indices.shape == (4, n - keep)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 300), st.floats(0.05, 0.95), st.integers(1, 4), st.integers(0, 2**31))
def test_plan_partitions_tokens(n, ratio, batch, seed):
    if keep_count(n, ratio) < 1:
        return
    plan = make_mask_plan(n, ratio, batch, np.random.default_rng(seed))
    for keep, masked in zip(plan.keep_indices, plan.mask_indices):
        assert not set(keep) & set(masked)
        assert sorted(set(keep) | set(masked)) == list(range(n))


def test_plan_rejects_degenerate_ratios():
    rng = np.random.default_rng(0)
    for bad in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            make_mask_plan(16, bad, 1, rng)
    with pytest.raises(ValueError, match="keeps no tokens"):
        make_mask_plan(4, 0.95, 1, rng)


def test_keep_frequency_is_uniform():
    plan = make_mask_plan(100, 0.9, 10_000, np.random.default_rng(0))
    freq = np.bincount(plan.keep_indices.ravel(), minlength=100) / 10_000
    assert np.all(np.abs(freq - 0.10) <= 0.01)


def test_samples_are_masked_independently():
    plan = make_mask_plan(64, 0.9, 8, np.random.default_rng(0))
    assert len({row.tobytes() for row in plan.keep_indices}) == 8


def test_complementary_plans_partition_visible_sets():
    plans = complementary_plans(64, 10, np.random.default_rng(0))
    visible = np.concatenate([p.keep_indices[0] for p in plans])
    assert sorted(visible) == list(range(64))
    masked_count = sum(p.mask_matrix()[0] for p in plans)
    np.testing.assert_array_equal(masked_count, 9)


def test_encoder_sees_only_visible_tokens():
    mae = MaskedAutoencoder(preset("vit_desk", image_size=64), SMALL_DEC)
    assert mae.cfg.num_patches == 256
    plan = make_mask_plan(256, 0.9, 2, np.random.default_rng(0))
    latent = mae.encode(np.zeros((2, 3, 64, 64), np.float32), plan)
    assert latent.shape == (2, 26, DESK.width)


def test_loss_ignores_visible_patch_pixels():
    mae = MaskedAutoencoder(DESK, SMALL_DEC, seed=0)
    x = np.stack([_image(0), _image(1)])
    plan = make_mask_plan(64, 0.9, 2, np.random.default_rng(1))
    pred, loss = mae.forward(x, plan)
    perturbed = patchify(x, 4).copy()
    rows = np.arange(2)[:, None]
    perturbed[rows, plan.keep_indices] += np.random.default_rng(2).standard_normal(perturbed[rows, plan.keep_indices].shape)
    y = unpatchify(perturbed, 4, (8, 8), 3)
    assert not np.array_equal(x, y)
    assert mae.loss(pred, y, plan).data.tobytes() == loss.data.tobytes()


def test_loss_zero_when_prediction_matches_target():
    mae = MaskedAutoencoder(DESK, SMALL_DEC)
    x = _image()[None]
    plan = make_mask_plan(64, 0.75, 1, np.random.default_rng(0))
    target = patch_targets(x, 4, normalize=False)
    assert mae.loss(ad.Tensor(target), x, plan).item() == 0.0


def test_loss_invariant_to_masked_index_order():
    rng = np.random.default_rng(0)
    pred = ad.Tensor(rng.standard_normal((2, 16, 5)))
    target = rng.standard_normal((2, 16, 5))
    idx = np.stack([rng.permutation(16)[:12] for _ in range(2)])
    shuffled = np.stack([row[rng.permutation(12)] for row in idx])
    a = ad.masked_mse(pred, target, idx).item()
    b = ad.masked_mse(pred, target, shuffled).item()
    assert a == pytest.approx(b, rel=1e-12)


def test_encoder_flops_scale_with_kept_tokens():
    mae = MaskedAutoencoder(DESK, SMALL_DEC)
    x = np.zeros((1, 3, 32, 32), np.float32)
    with ad.count_flops() as masked:
        mae.encode(x, make_mask_plan(64, 0.9, 1, np.random.default_rng(0)))
    with ad.count_flops() as full:
        mae.encode(x, MaskPlan.all_visible(64, 1))
    assert masked[0] < full[0] / 8


def test_all_visible_plan_reconstructs_input():
    mae = MaskedAutoencoder(DESK, SMALL_DEC)
    x = _image()
    out = reconstruct_image(mae, x, MaskPlan.all_visible(64, 1))
    assert out.shape == x.shape
    np.testing.assert_array_equal(out, x)
    _, loss = mae.forward(x[None], MaskPlan.all_visible(64, 1))
    assert loss.item() == 0.0


def test_reconstruction_keeps_visible_patches():
    mae = MaskedAutoencoder(DESK, SMALL_DEC)
    x = _image()[None]
    plan = make_mask_plan(64, 0.75, 1, np.random.default_rng(0))
    out = mae.reconstruct(x, plan)
    assert out.shape == x.shape
    np.testing.assert_array_equal(patchify(out, 4)[0, plan.keep_indices[0]], patchify(x, 4)[0, plan.keep_indices[0]])


def test_mask_token_and_encoder_receive_gradients():
    mae = MaskedAutoencoder(DESK, SMALL_DEC)
    x = np.stack([_image(0), _image(1)])
    _, loss = mae.forward(x, make_mask_plan(64, 0.9, 2, np.random.default_rng(0)))
    loss.backward()
    params = mae.named_parameters()
    assert np.abs(params["mask_token"].grad).sum() > 0
    assert np.abs(params["encoder.blocks.0.attn.qkv.w"].grad).sum() > 0
    assert not any(k.startswith("encoder.head") for k in params)


def test_plan_shape_mismatch_errors():
    mae = MaskedAutoencoder(DESK, SMALL_DEC)
    with pytest.raises(ValueError, match="batch"):
        mae.forward(np.zeros((2, 3, 32, 32)), make_mask_plan(64, 0.9, 1, np.random.default_rng(0)))
    with pytest.raises(ValueError, match="tokens"):
        mae.forward(np.zeros((1, 3, 32, 32)), make_mask_plan(16, 0.5, 1, np.random.default_rng(0)))


def test_overfitting_one_image_gains_psnr():
    mae = MaskedAutoencoder(DESK, DecoderConfig(1, 64, 4), seed=0)
    x = _image(3)[None]
    eval_plan = make_mask_plan(64, 0.75, 1, np.random.default_rng(99))
    before = masked_psnr(mae.reconstruct(x, eval_plan), x, eval_plan, 4, float(x.max() - x.min()))
    opt = make_optimizer(mae.named_parameters(), OptimizerConfig("adamw", 1e-3, weight_decay=0.0))
    rng = np.random.default_rng(0)
    for _ in range(500):
        _, loss = mae.forward(x, make_mask_plan(64, 0.75, 1, rng))
        loss.backward()
        opt.step(1e-3)
        opt.zero_grad()
    after = masked_psnr(mae.reconstruct(x, eval_plan), x, eval_plan, 4, float(x.max() - x.min()))
    assert after - before >= 10.0
