import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clusterfl import nn
from clusterfl.errors import NumericError, StructuralError

from conftest import central_differences, random_instance, relative_errors


def per_sample_loss_oracle(params, cfg, x, y):
    """Slices the flat vector by hand and evaluates one sample at a time."""
    d, (h1, h2), c = cfg.input_dim, cfg.hidden_dims, cfg.num_classes
    sizes = [d * h1, h1, h1 * h2, h2, h2 * c, c]
    parts = np.split(params, np.cumsum(sizes)[:-1])
    w1, b1 = parts[0].reshape(d, h1), parts[1]
    w2, b2 = parts[2].reshape(h1, h2), parts[3]
    w3, b3 = parts[4].reshape(h2, c), parts[5]
    total = 0.0
    for xi, yi in zip(x, y):
        hidden1 = [max(0.0, sum(xi[i] * w1[i, j] for i in range(d)) + b1[j]) for j in range(h1)]
        hidden2 = [max(0.0, sum(hidden1[i] * w2[i, j] for i in range(h1)) + b2[j]) for j in range(h2)]
        logits = [sum(hidden2[i] * w3[i, j] for i in range(h2)) + b3[j] for j in range(c)]
        m = max(logits)
        total += -(logits[yi] - m - math.log(sum(math.exp(v - m) for v in logits)))
    return total


def test_param_count():
    cfg = nn.MlpConfig(3, (4, 5), 2)
    assert cfg.num_params == 3 * 4 + 4 + 4 * 5 + 5 + 5 * 2 + 2


def test_config_rejects_bad_dims():
    with pytest.raises(StructuralError, match="input_dim"):
        nn.MlpConfig(0, (4, 4), 2)
    with pytest.raises(StructuralError, match="hidden_dims"):
        nn.MlpConfig(3, (4, 4, 4), 2)


def test_zero_params_give_uniform_rows():
    cfg = nn.MlpConfig(3, (4, 4), 5)
    x = np.random.default_rng(0).standard_normal((7, 3))
    probs = nn.forward(np.zeros(cfg.num_params), cfg, nn.Batch(x, np.zeros(7, dtype=int)))
    np.testing.assert_allclose(probs, np.full((7, 5), 0.2))


def test_single_sample_shape():
    cfg, params, _ = random_instance(0, num_classes=3)
    probs = nn.forward(params, cfg, nn.Batch(np.ones((1, 3)), [2]))
    assert probs.shape == (1, 3)


@pytest.mark.parametrize("seed", range(5))
def test_rows_are_distributions(seed):
    cfg, params, batch = random_instance(seed, num_classes=4, batch=9)
    probs = nn.forward(params, cfg, batch)
    assert np.all((probs > 0) & (probs < 1))
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 30.0))
def test_rows_sum_to_one_for_large_logits(seed, scale):
    cfg, params, batch = random_instance(seed, num_classes=4, batch=9, scale=scale)
    np.testing.assert_allclose(nn.forward(params, cfg, batch).sum(axis=1), 1.0, atol=1e-6)


def test_dimension_mismatch_names_dimension():
    cfg, params, _ = random_instance(0)
    with pytest.raises(StructuralError, match="input_dim=3"):
        nn.forward(params, cfg, nn.Batch(np.ones((2, 4)), [0, 1]))
    with pytest.raises(StructuralError, match="num_params"):
        nn.forward(params[:-1], cfg, nn.Batch(np.ones((2, 3)), [0, 1]))


def test_zero_params_loss_is_b_log_c():
    cfg = nn.MlpConfig(3, (4, 4), 7)
    x = np.random.default_rng(0).standard_normal((6, 3))
    loss = nn.batch_loss(np.zeros(cfg.num_params), cfg, nn.Batch(x, [0, 1, 2, 3, 4, 5]))
    assert loss == pytest.approx(6 * math.log(7), rel=1e-12)


def test_duplicated_batch_doubles_loss():
    cfg, params, batch = random_instance(3)
    doubled = nn.Batch(np.vstack([batch.features] * 2), np.concatenate([batch.labels] * 2))
    assert nn.batch_loss(params, cfg, doubled) == pytest.approx(2 * nn.batch_loss(params, cfg, batch), rel=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_loss_matches_per_sample_oracle(seed):
    cfg, params, batch = random_instance(seed, num_classes=3, batch=6)
    expected = per_sample_loss_oracle(params, cfg, batch.features, batch.labels)
    assert nn.batch_loss(params, cfg, batch) == pytest.approx(expected, rel=1e-12)


def test_loss_overflow_is_numeric_error():
    cfg, params, batch = random_instance(0)
    with pytest.raises(NumericError):
        nn.batch_loss(params * 1e200, cfg, batch)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_loss_invariant_under_sample_permutation(seed):
    cfg, params, batch = random_instance(seed, batch=8)
    perm = np.random.default_rng(seed).permutation(8)
    shuffled = nn.Batch(batch.features[perm], batch.labels[perm])
    assert nn.batch_loss(params, cfg, shuffled) == pytest.approx(nn.batch_loss(params, cfg, batch), rel=1e-12)


def test_gradient_zero_at_critical_point():
    # all-zero weights: ReLU units are off, logits uniform, balanced labels cancel the bias gradient
    cfg = nn.MlpConfig(2, (1, 1), 2)
    batch = nn.Batch(np.array([[1.0, 2.0], [-1.0, 0.5]]), [0, 1])
    grad = nn.batch_gradient(np.zeros(cfg.num_params), cfg, batch)
    np.testing.assert_array_equal(grad, np.zeros(cfg.num_params))


@pytest.mark.parametrize("seed", range(20))
def test_gradient_matches_finite_differences(seed):
    cfg, params, batch = random_instance(seed)
    analytic = nn.batch_gradient(params, cfg, batch)
    numeric = central_differences(lambda p: nn.batch_loss(p, cfg, batch), params, step=1e-5)
    assert analytic.shape == params.shape
    assert relative_errors(analytic, numeric).max() <= 1e-4


def test_gradient_of_concatenation_is_sum():
    cfg, params, a = random_instance(1)
    _, _, b = random_instance(2)
    both = nn.Batch(np.vstack([a.features, b.features]), np.concatenate([a.labels, b.labels]))
    np.testing.assert_allclose(nn.batch_gradient(params, cfg, both),
                               nn.batch_gradient(params, cfg, a) + nn.batch_gradient(params, cfg, b),
                               rtol=1e-12, atol=1e-12)


def test_stacked_matches_individual_models():
    cfg, params, batch = random_instance(4, num_classes=3)
    other = params[::-1].copy()
    losses, grads = nn.stacked_loss_and_gradient(np.stack([params, other]), cfg, batch)
    for k, p in enumerate([params, other]):
        loss, grad = nn.loss_and_gradient(p, cfg, batch)
        assert losses[k] == pytest.approx(loss, rel=1e-13)
        np.testing.assert_allclose(grads[k], grad, rtol=1e-12, atol=1e-14)


def test_multi_batch_slices_do_not_interact():
    cfg, params, a = random_instance(5, batch=4)
    _, _, b = random_instance(6, batch=4)
    models = np.stack([params, params * 0.5])
    losses, grads = nn.multi_loss_and_gradient(models, cfg, np.stack([a.features, b.features]),
                                               np.stack([a.labels, b.labels]))
    alone_l, alone_g = nn.multi_loss_and_gradient(models, cfg, b.features[None], b.labels[None])
    np.testing.assert_array_equal(losses[1], alone_l[0])
    np.testing.assert_array_equal(grads[1], alone_g[0])


def test_sgd_step_examples():
    np.testing.assert_allclose(nn.sgd_step(np.array([1.0, 2.0]), np.array([0.5, -1.0]), 0.1), [0.95, 2.1])
    p = np.array([3.0, -1.0])
    np.testing.assert_array_equal(nn.sgd_step(p, np.zeros(2), 0.3), p)


def test_sgd_step_errors():
    with pytest.raises(StructuralError):
        nn.sgd_step(np.ones(2), np.ones(3), 0.1)
    with pytest.raises(StructuralError):
        nn.sgd_step(np.ones(2), np.ones(2), 0.0)
    with pytest.raises(StructuralError):
        nn.sgd_step(np.ones(2), np.ones(2), float("nan"))


def test_two_steps_equal_one_step_with_summed_gradient():
    p = np.array([0.5, -0.25, 2.0])
    g1, g2 = np.array([1.0, 0.5, -0.5]), np.array([0.25, -1.0, 0.75])
    np.testing.assert_allclose(nn.sgd_step(nn.sgd_step(p, g1, 0.125), g2, 0.125),
                               nn.sgd_step(p, g1 + g2, 0.125), rtol=0, atol=1e-15)


# dyadic values keep every product exact, which is what bitwise equality needs
dyadic = st.integers(-64, 64).map(lambda v: v / 16)


@settings(max_examples=50, deadline=None)
@given(st.lists(dyadic, min_size=3, max_size=3), st.lists(dyadic, min_size=3, max_size=3),
       st.sampled_from([0.5, 1.0, 2.0, 4.0, 0.25]), st.sampled_from([0.5, 0.125, 1.0, 0.0625]))
def test_sgd_step_linear_in_grad_and_lr(p, g, a, b):
    p, g = np.array(p), np.array(g)
    np.testing.assert_array_equal(nn.sgd_step(p, g, a * b), nn.sgd_step(p, a * g, b))


def test_deterministic_bitwise():
    cfg, params, batch = random_instance(7, num_classes=3)
    l1, g1 = nn.loss_and_gradient(params, cfg, batch)
    l2, g2 = nn.loss_and_gradient(params.copy(), cfg, nn.Batch(batch.features.copy(), batch.labels.copy()))
    assert l1 == l2
    np.testing.assert_array_equal(g1, g2)


def test_init_params_bounds():
    cfg = nn.MlpConfig(9, (16, 4), 3)
    params = nn.init_params(cfg, np.random.default_rng(0))
    for (w, b), (fan_in, _) in zip(nn.unpack(params, cfg), cfg.layer_dims):
        bound = 1 / math.sqrt(fan_in)
        assert np.abs(w).max() <= bound and np.abs(b).max() <= bound


def test_pack_unpack_roundtrip():
    cfg, params, _ = random_instance(0)
    np.testing.assert_array_equal(nn.pack(nn.unpack(params, cfg)), params)
