import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tpam.errors import ArgumentError, UnsupportedVariantError
from tpam.interpret import (
    ImportanceTensor,
    InterpretationMap,
    channel_sum,
    explanation_variance,
    importance_batch,
    importance_tensor,
    importance_vector_spam,
    interpretation_map,
    normalized,
)
from tpam.model import ModelConfig, PatchSpec, TpamModel, forward, random_model


def brute_force_importance(model, x, c):
    """Scalar loop over every (k, r, element); shares no code with the library."""
    cfg = model.config
    U = model.factor_tensors()
    lam = model.params["lam"]
    flat = x.ravel()
    out = np.zeros(flat.size)
    for k in range(1, cfg.K + 1):
        xk = np.array([np.sign(v) * abs(v) ** (1.0 / k) for v in flat]) if cfg.rescale else flat
        for r in range(cfg.R):
            u = U[k - 1, r].ravel()
            s = sum(u[i] * xk[i] for i in range(flat.size))
            for i in range(flat.size):
                out[i] += lam[c, k - 1, r] * u[i] * xk[i] * s ** (k - 1)
    return out.reshape(x.shape)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(["T", "V"]), st.integers(1, 4), st.integers(1, 3), st.booleans(), st.integers(0, 2**31))
def test_completeness(variant, K, R, rescale, seed):
    r = np.random.default_rng(seed)
    cfg = ModelConfig(variant, K, R, (3, 2), 3, rescale=rescale)
    m = random_model(cfg, r)
    x = r.normal(size=(3, 2))
    z = forward(m, x)
    for c in range(3):
        total = importance_tensor(m, x, c).values.sum()
        target = z[c] - m.params["b"][c]
        assert abs(total - target) <= 1e-8 * (1 + abs(target))


def test_linear_case_exact(rng):
    cfg = ModelConfig("T", 1, 3, (2, 3), 2, rescale=False)
    m = random_model(cfg, rng)
    x = rng.normal(size=(2, 3))
    expected = sum(m.params["lam"][1, 0, r] * m.params["U"][0, r] * x for r in range(3))
    np.testing.assert_allclose(importance_tensor(m, x, 1).values, expected, rtol=1e-14, atol=1e-15)


@pytest.mark.parametrize("variant", ["T", "V"])
def test_matches_brute_force(variant, rng):
    cfg = ModelConfig(variant, 3, 2, (2, 3), 2, rescale=True)
    m = random_model(cfg, rng)
    x = rng.normal(size=(2, 3))
    for c in range(2):
        np.testing.assert_allclose(importance_tensor(m, x, c).values, brute_force_importance(m, x, c),
                                   rtol=1e-11, atol=1e-13)


def test_batch_matches_single(rng):
    m = random_model(ModelConfig("V", 2, 3, (4, 4), 3), rng)
    X = rng.normal(size=(5, 4, 4))
    cls = [0, 2, 1, 1, 0]
    batch = importance_batch(m, X, cls)
    for i in range(5):
        np.testing.assert_allclose(batch[i], importance_tensor(m, X[i], cls[i]).values, rtol=1e-13)


def test_float32_model_is_probed_in_double(rng):
    m = random_model(ModelConfig("T", 2, 4, (6, 6), 2), rng).astype(np.float32)
    x = rng.uniform(size=(6, 6))
    z = forward(m.astype(np.float64), x)
    total = importance_tensor(m, x, 1).values.sum()
    assert abs(total - (z[1] - m.params["b"][1])) <= 1e-10


def test_patch_variants_unsupported(rng):
    cfg = ModelConfig("PT", 1, 1, (4, 4), 2, patch_specs=(PatchSpec.make((2, 2), 2),))
    with pytest.raises(UnsupportedVariantError):
        importance_tensor(random_model(cfg, rng), rng.normal(size=(4, 4)), 0)


def test_class_out_of_range(rng):
    m = random_model(ModelConfig("T", 1, 1, (2,), 2), rng)
    with pytest.raises(ArgumentError):
        importance_tensor(m, np.ones(2), 2)


# ---------------------------------------------------------------- vector input


def test_spam_equals_tensor_importance(rng):
    for variant in ("T", "V"):
        m = random_model(ModelConfig(variant, 3, 2, (6,), 2), rng)
        x = rng.normal(size=6)
        a = importance_vector_spam(m, x, 1).values
        np.testing.assert_allclose(a, importance_tensor(m, x, 1).values, rtol=1e-12, atol=1e-14)
        z = forward(m, x)
        assert abs(a.sum() - (z[1] - m.params["b"][1])) <= 1e-8 * (1 + abs(z[1]))


def test_spam_flattens_and_zero_input(rng):
    m = random_model(ModelConfig("V", 2, 2, (6,), 2), rng)
    x = rng.normal(size=(2, 3))
    np.testing.assert_allclose(importance_vector_spam(m, x, 0).values,
                               importance_tensor(m, x.ravel(), 0).values, rtol=1e-12)
    assert np.all(importance_vector_spam(m, np.zeros(6), 0).values == 0)
    im = importance_vector_spam(m, x, 0)
    assert interpretation_map(im, (2, 3)).values.shape == (2, 3)
    with pytest.raises(ArgumentError):
        interpretation_map(im)


# ---------------------------------------------------------------- maps


def test_channel_sum_examples(rng):
    m = rng.normal(size=(4, 5))
    np.testing.assert_array_equal(channel_sum(m[None]), m)
    np.testing.assert_array_equal(channel_sum(np.stack([m, -m])), np.zeros((4, 5)))
    c3 = rng.normal(size=(3, 4, 5))
    np.testing.assert_allclose(channel_sum(c3), c3[0] + c3[1] + c3[2], rtol=1e-15)


def test_interpretation_map_and_normalize(rng):
    im = ImportanceTensor(rng.normal(size=(2, 3, 3)), 0)
    m = interpretation_map(im)
    assert m.values.shape == (3, 3)
    n = normalized(m, "max-abs")
    assert n.normalization == "max-abs" and np.max(np.abs(n.values)) == pytest.approx(1.0)


def test_explanation_variance_examples():
    assert explanation_variance([np.full((4, 4), 3.0), np.zeros((2, 2))]) == 0.0
    half = np.zeros((4, 4))
    half[:2] = 1.0
    assert explanation_variance([half]) == pytest.approx(0.25, abs=1e-10)
    assert explanation_variance([InterpretationMap(half * 7 - 2)]) == pytest.approx(0.25, abs=1e-10)
    with pytest.raises(ArgumentError):
        explanation_variance([])


@settings(max_examples=30)
@given(st.integers(0, 2**31))
def test_explanation_variance_range(seed):
    maps = [np.random.default_rng(seed + i).normal(size=(5, 5)) for i in range(3)]
    v = explanation_variance(maps)
    assert 0.0 <= v <= 0.25 + 1e-12


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(["T", "V"]), st.integers(1, 4), st.integers(0, 2**31))
def test_linear_in_class_weights(variant, K, seed):
    r = np.random.default_rng(seed)
    m = random_model(ModelConfig(variant, K, 2, (3, 3), 2), r)
    x = r.normal(size=(3, 3))
    doubled = m.copy()
    doubled.params["lam"] = 2 * m.params["lam"]
    np.testing.assert_allclose(importance_tensor(doubled, x, 0).values, 2 * importance_tensor(m, x, 0).values,
                               rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("variant", ["T", "V"])
def test_zero_input_zero_importance(variant, rng):
    m = random_model(ModelConfig(variant, 4, 2, (2, 3), 2, rescale=False), rng)
    assert np.all(importance_tensor(m, np.zeros((2, 3)), 1).values == 0)
