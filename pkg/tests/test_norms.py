import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from conftest import grad_check
from normforge import tensor as T
from normforge.norms import (NormSpec, apply_norm, cosine_logits, fix_norm_rows, init_norm_params,
                             layer_norm, norm_op_count, norm_param_count, rms_norm, scale_norm)
from normforge.tensor import ShapeError, Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


finite = st.floats(-50, 50, allow_nan=False, width=64)


def test_normspec_validation():
    with pytest.raises(ValueError):
        NormSpec("BatchNorm")
    with pytest.raises(ValueError):
        NormSpec("ScaleNorm", eps=0.0)
    with pytest.raises(ValueError):
        NormSpec("ScaleNorm", g_mode="frozen")


def test_layer_norm_examples():
    out = layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
    np.testing.assert_allclose(out.data, [1.0, -1.0])
    bias = np.array([0.3, -0.2, 0.1])
    out = layer_norm(Tensor(np.full(3, 7.0)), Tensor(np.ones(3) * 2), Tensor(bias))
    np.testing.assert_allclose(out.data, bias)


def test_layer_norm_matches_oracle(rng):
    x, gn, b = rng.normal(size=6), rng.normal(size=6), rng.normal(size=6)
    ref = oracles.layer_norm_1d(x.tolist(), gn.tolist(), b.tolist(), 1e-5)
    np.testing.assert_allclose(layer_norm(Tensor(x), Tensor(gn), Tensor(b)).data, ref, rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 8, elements=finite), st.floats(0.1, 10), st.floats(-5, 5))
def test_layer_norm_affine_invariance(x, a, b):
    assume(np.std(x) > 1e-2)
    gn, bias = Tensor(np.ones(8)), Tensor(np.zeros(8))
    np.testing.assert_allclose(layer_norm(Tensor(a * x + b), gn, bias, 1e-12).data,
                               layer_norm(Tensor(x), gn, bias, 1e-12).data, atol=1e-6)


def test_layer_norm_shape_errors():
    with pytest.raises(ShapeError):
        layer_norm(Tensor(np.ones(3)), Tensor(np.ones(2)), Tensor(np.zeros(3)))


def test_scale_norm_examples():
    np.testing.assert_allclose(scale_norm(Tensor([3.0, 4.0]), 10.0).data, [6.0, 8.0])
    assert not scale_norm(Tensor(np.zeros(4)), 5.0).data.any()


def test_scale_norm_matches_oracle(rng):
    x = rng.normal(size=7)
    np.testing.assert_allclose(scale_norm(Tensor(x), 2.5).data, oracles.scale_norm_1d(x.tolist(), 2.5, 1e-5),
                               rtol=1e-12)


def test_scale_norm_clamps_tiny_vectors():
    x = np.array([1e-7, 0.0])
    np.testing.assert_allclose(scale_norm(Tensor(x), 1.0).data, x / 1e-5)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 32), elements=finite), st.floats(-20, 20), st.floats(1e-3, 1e3))
def test_scale_norm_properties(x, g, a):
    assume(np.linalg.norm(x) > 1e-3 and np.linalg.norm(a * x) > 1e-3)
    y = scale_norm(Tensor(x), g).data
    assert abs(np.linalg.norm(y) - abs(g)) <= 1e-9 * max(1.0, abs(g))
    np.testing.assert_allclose(scale_norm(Tensor(a * x), g).data, y, rtol=1e-12, atol=1e-12)


def test_rms_norm_examples():
    np.testing.assert_allclose(rms_norm(Tensor([3.0, 4.0]), Tensor(np.ones(2))).data,
                               [3 / math.sqrt(12.5), 4 / math.sqrt(12.5)])
    assert not rms_norm(Tensor(np.zeros(3)), Tensor(np.ones(3))).data.any()
    with pytest.raises(ShapeError):
        rms_norm(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_rms_norm_matches_oracle(rng):
    x, gn = rng.normal(size=5), rng.normal(size=5)
    np.testing.assert_allclose(rms_norm(Tensor(x), Tensor(gn)).data,
                               oracles.rms_norm_1d(x.tolist(), gn.tolist(), 1e-5), rtol=1e-12)


@pytest.mark.parametrize("d", range(1, 65))
def test_rms_norm_with_tied_gain_is_scale_norm(d):
    r = np.random.default_rng(d)
    x, g = r.normal(size=(4, d)) * 3, r.uniform(-5, 5)
    ref = scale_norm(Tensor(x), g).data
    np.testing.assert_allclose(rms_norm(Tensor(x), Tensor(np.full(d, g / math.sqrt(d)))).data, ref,
                               rtol=0, atol=1e-12 * max(1.0, abs(g)))


def test_fix_norm_rows(rng):
    np.testing.assert_allclose(fix_norm_rows(Tensor([[3.0, 4.0]])).data, [[0.6, 0.8]])
    W = fix_norm_rows(Tensor(rng.normal(size=(20, 6)))).data
    np.testing.assert_allclose(np.linalg.norm(W, axis=1), 1.0, rtol=1e-12)
    np.testing.assert_allclose(fix_norm_rows(Tensor(W)).data, W, rtol=1e-12)


def test_cosine_logits_examples():
    W = np.array([[2.0, 0.0], [0.0, 3.0]])
    out = cosine_logits(Tensor([5.0, 0.0]), Tensor(W), 4.0).data
    np.testing.assert_allclose(out, [4.0, 0.0], atol=1e-15)


def test_cosine_logits_identity(rng):
    for _ in range(20):
        x, W, g = rng.normal(size=(3, 8)), rng.normal(size=(11, 8)), rng.uniform(-10, 10)
        lhs = cosine_logits(Tensor(x), Tensor(W), g).data
        rhs = scale_norm(Tensor(x), g).data @ fix_norm_rows(Tensor(W)).data.T
        np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)
        assert np.all(np.abs(lhs) <= abs(g) + 1e-12)


def test_op_counts():
    assert norm_op_count("LayerNorm", 512) == 3584
    assert norm_op_count("ScaleNorm", 512) == 1536
    assert norm_op_count("RMSNorm", 512) == 2048
    for d in (1, 7, 100):
        assert norm_op_count("LayerNorm", d) * 3 == norm_op_count("ScaleNorm", d) * 7
    with pytest.raises(ValueError):
        norm_op_count("GroupNorm", 4)


def test_param_counts():
    for variant, n in (("LayerNorm", 1024), ("ScaleNorm", 1), ("RMSNorm", 512), ("None", 0)):
        params = init_norm_params(NormSpec(variant), 512)
        assert sum(p.size for p in params.values()) == n == norm_param_count(variant, 512)


def test_init_norm_params_modes():
    p = init_norm_params(NormSpec("ScaleNorm", g_mode="fixed"), 64)
    assert float(p["g"].data) == 8.0 and not p["g"].requires_grad
    p = init_norm_params(NormSpec("RMSNorm"), 64)
    np.testing.assert_allclose(p["gain"].data, 1.0)
    p = init_norm_params(NormSpec("LayerNorm"), 4)
    assert p["gain"].data.tolist() == [1.0] * 4 and p["bias"].data.tolist() == [0.0] * 4


def test_apply_norm_none_is_identity():
    x = Tensor([1.0, 2.0])
    assert apply_norm(NormSpec("None"), {}, x) is x


def _norm_cases(r):
    d = 6
    x = r.normal(size=(3, d)) * 2
    proj = Tensor(r.normal(size=(3, d)))
    proj_v = Tensor(r.normal(size=(3, 9)))
    return {
        "layer_norm": ({"x": x, "gain": r.normal(size=d), "bias": r.normal(size=d)},
                       lambda p: T.sum_(layer_norm(p["x"], p["gain"], p["bias"]) * proj)),
        "scale_norm": ({"x": x, "g": np.array(r.uniform(1, 5))},
                       lambda p: T.sum_(scale_norm(p["x"], p["g"]) * proj)),
        "rms_norm": ({"x": x, "gain": r.normal(size=d)},
                     lambda p: T.sum_(rms_norm(p["x"], p["gain"]) * proj)),
        "fix_norm_rows": ({"W": x}, lambda p: T.sum_(fix_norm_rows(p["W"]) * proj)),
        "cosine_logits": ({"x": x, "W": r.normal(size=(9, d)), "g": np.array(3.0)},
                          lambda p: T.sum_(cosine_logits(p["x"], p["W"], p["g"]) * proj_v)),
    }


@pytest.mark.parametrize("name", sorted(_norm_cases(np.random.default_rng(0))))
def test_norm_gradients(name):
    for trial in range(10):
        arrays_, f = _norm_cases(np.random.default_rng(100 + trial))[name]
        params = {k: leaf(v) for k, v in arrays_.items()}
        assert grad_check(f, params) <= 1e-6
