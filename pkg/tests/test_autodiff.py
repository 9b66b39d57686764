import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from maelab import autodiff as ad
from maelab.autodiff import Tensor
from maelab.vit import VisionTransformer, preset

from _gradcases import build, gamma_beta_case


@pytest.mark.parametrize("name", sorted(ad.PRIMITIVES))
def test_primitive_gradients_f64(name):
    worst = 0.0
    for seed in range(100):
        f, x = build(name, np.random.default_rng(seed), np.float64)
        worst = max(worst, ad.grad_check(f, x))
    assert worst < 1e-6


@pytest.mark.parametrize("name", sorted(ad.PRIMITIVES))
def test_primitive_gradients_f32(name):
    worst = 0.0
    for seed in range(100):
        f, x = build(name, np.random.default_rng(seed), np.float32)
        worst = max(worst, ad.grad_check(f, x))
    assert worst < 1e-3


def test_layer_norm_scale_gradient():
    f, g = gamma_beta_case(np.random.default_rng(3))
    assert ad.grad_check(f, g) < 1e-6


def test_grad_check_closed_form():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    ad.tsum(x * x).backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])
    assert ad.grad_check(lambda t: ad.tsum(t * t), np.array([1.0, 2.0, 3.0])) < 1e-6


def test_grad_check_constant_function_is_zero():
    assert ad.grad_check(lambda t: Tensor(np.array(4.0)), np.ones(3)) == 0.0


def test_grad_check_rejects_nonscalar():
    with pytest.raises(ValueError, match="scalar"):
        ad.grad_check(lambda t: t, np.ones(3))


def test_gelu_values():
    exact = 0.5 * (1 + math.erf(1 / math.sqrt(2)))  # oracle via the stdlib erf
    y = ad.gelu(Tensor(np.array([0.0, 1.0, 10.0]))).data
    assert y[0] == 0.0
    assert abs(y[1] - exact) < 1e-12
    assert abs(y[1] - 0.841345) < 1e-6
    assert abs(y[2] - 10.0) < 1e-6


def test_identities():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(ad.add(Tensor(x), 0.0).data, x)
    np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(3)), Tensor(x)).data, x)
    assert np.isclose(ad.tsum(ad.reshape(Tensor(x), (2, 6))).data, x.sum())


def test_layer_norm_constant_row_and_moments():
    gamma, beta = Tensor(np.ones(6)), Tensor(np.zeros(6))
    const = ad.layer_norm(Tensor(np.full((2, 6), 3.0)), gamma, beta).data
    np.testing.assert_array_equal(const, 0.0)
    y = ad.layer_norm(Tensor(np.random.default_rng(1).standard_normal((5, 6)) * 4 + 2), gamma, beta).data
    assert np.all(np.abs(y.mean(axis=-1)) < 1e-6)
    assert np.all(np.abs(y.var(axis=-1) - 1) < 1e-4)


def test_layer_norm_rejects_bad_eps():
    with pytest.raises(ValueError, match="eps"):
        ad.layer_norm(Tensor(np.ones((1, 3))), Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=0.0)


def test_shape_errors_name_op_and_shapes():
    with pytest.raises(ValueError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ValueError, match="add"):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_intermediate_grads_populated():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    h = ad.mul(x, 3.0)
    y = ad.tsum(ad.mul(h, h))
    y.backward()
    np.testing.assert_allclose(h.grad, 2 * h.data)
    np.testing.assert_allclose(x.grad, 18 * x.data)
    assert x.grad.shape == x.shape


def test_backward_visits_shared_nodes_once():
    x = Tensor(np.array(2.0), requires_grad=True)
    a = ad.mul(x, x)
    y = ad.add(a, a)  # a reached along two paths
    y.backward()
    assert x.grad == pytest.approx(8.0)


def test_gradient_linearity():
    rng = np.random.default_rng(5)
    data = rng.standard_normal((3, 4))
    w1, w2 = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))

    def grads(*losses):
        x = Tensor(data.copy(), requires_grad=True)
        outs = [loss(x) for loss in losses]
        total = outs[0]
        for o in outs[1:]:
            total = ad.add(total, o)
        total.backward()
        return x.grad

    l1 = lambda x: ad.tsum(ad.gelu(x @ Tensor(w1)))  # noqa: E731
    l2 = lambda x: ad.tmean(ad.softmax(x @ Tensor(w2)) * Tensor(np.arange(2.0)))  # noqa: E731
    np.testing.assert_allclose(grads(l1, l2), grads(l1) + grads(l2), atol=1e-6)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.tsum(ad.mul(x, x))
    assert not y.requires_grad


def test_count_flops_counts_multiply_accumulates():
    with ad.count_flops() as c:
        ad.matmul(Tensor(np.ones((2, 3, 4))), Tensor(np.ones((4, 5))))
    assert c[0] == 2 * 3 * 5 * 4


def test_determinism_bitwise():
    cfg = preset("vit_tiny_test", num_classes=3)
    img = np.random.default_rng(0).standard_normal((2, 3, 32, 32)).astype(np.float32)
    runs = []
    for _ in range(2):
        vit = VisionTransformer(cfg, seed=4)
        loss = ad.tsum(vit(img))
        loss.backward()
        runs.append((loss.data.copy(), vit.params["blocks.0.attn.qkv.w"].grad.copy()))
    assert runs[0][0].tobytes() == runs[1][0].tobytes()
    assert runs[0][1].tobytes() == runs[1][1].tobytes()


def _tiny_model(dtype):
    cfg = preset("vit_tiny_test", num_classes=2)
    vit = VisionTransformer(cfg, seed=1)
    rng = np.random.default_rng(2)
    vit.params["head.w"].data = rng.standard_normal(vit.params["head.w"].shape).astype(np.float32)
    params = {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in vit.params.items()}
    return VisionTransformer(cfg, dtype=dtype, params=params)


def _token_loss(t):
    model = _tiny_model(t.data.dtype)
    logits = model.head(model.pool(model.forward_tokens(t)))
    return ad.bce_with_logits(logits, np.array([[1.0, 0.0]]))


def test_tiny_vit_gradcheck_tokens_f32():
    tokens = np.random.default_rng(3).standard_normal((1, 8, 32)).astype(np.float32)
    assert ad.grad_check(_token_loss, tokens, h=1e-4) < 1e-3


def test_tiny_vit_gradcheck_weight_f32():
    tokens = np.random.default_rng(4).standard_normal((2, 8, 32))
    w0 = _tiny_model(np.float32).params["blocks.1.mlp.fc1.w"].data

    def f(w):
        model = _tiny_model(w.data.dtype)
        model.params["blocks.1.mlp.fc1.w"] = w
        logits = model.head(model.pool(model.forward_tokens(Tensor(tokens.astype(w.data.dtype)))))
        return ad.bce_with_logits(logits, np.array([[1.0, 0.0], [0.0, 1.0]]))

    coords = np.random.default_rng(5).choice(w0.size, size=60, replace=False)
    assert ad.grad_check(f, w0, h=1e-4, coords=coords) < 1e-3


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=4),
                  elements=st.floats(-3, 3)))
def test_softmax_rows_sum_to_one(x):
    y = ad.softmax(Tensor(x), axis=-1).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=4),
                  elements=st.floats(-3, 3)))
def test_reshape_preserves_sum(x):
    assert np.isclose(ad.tsum(ad.reshape(Tensor(x), (-1,))).data, x.sum())
