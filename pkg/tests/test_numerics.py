import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phraseground import autodiff as ad
from phraseground import nn


def identity_layer(n, activation="identity"):
    return nn.DenseLayer(ad.parameter(np.eye(n)), ad.parameter(np.zeros(n)), activation)


# ---------------------------------------------------------------------------
# forward

def test_forward_identity_weights_relu_clamps():
    layer = identity_layer(2, "relu")
    assert np.allclose(nn.forward(layer, np.array([1.0, -1.0])).value, [1.0, 0.0])


def test_forward_zero_weights_returns_bias():
    layer = nn.DenseLayer(ad.parameter(np.zeros((1, 1))), ad.parameter(np.array([3.0])))
    assert np.allclose(nn.forward(layer, np.array([123.0])).value, [3.0])


def test_forward_hand_matrix_multiply():
    layer = nn.DenseLayer(ad.parameter(np.array([[1.0, 2.0], [3.0, 4.0]])),
                          ad.parameter(np.zeros(2)))
    assert np.allclose(nn.forward(layer, np.array([1.0, 1.0])).value, [3.0, 7.0])


def test_forward_dimension_mismatch_raises():
    with pytest.raises(ValueError):
        nn.forward(identity_layer(2), np.zeros(3))


def test_forward_batched_matches_per_row():
    rng = np.random.default_rng(0)
    layer = nn.dense(rng, 3, 4, activation="relu")
    x = rng.standard_normal((5, 4))
    batched = nn.forward(layer, x).value
    rows = np.stack([nn.forward(layer, xi).value for xi in x])
    assert np.allclose(batched, rows)


@given(st.floats(-3, 3), st.floats(-3, 3),
       st.lists(st.floats(-5, 5), min_size=3, max_size=3),
       st.lists(st.floats(-5, 5), min_size=3, max_size=3))
@settings(max_examples=100)
def test_forward_identity_activation_is_affine(a, b, xs, ys):
    rng = np.random.default_rng(7)
    layer = nn.dense(rng, 2, 3)
    layer.bias.value[:] = [0.5, -1.0]
    x, y = np.array(xs), np.array(ys)
    lhs = nn.forward(layer, a * x + b * y).value
    rhs = (a * nn.forward(layer, x).value + b * nn.forward(layer, y).value
           - (a + b - 1) * layer.bias.value)
    assert np.allclose(lhs, rhs, atol=1e-9)


def test_dense_layer_rejects_bad_activation_and_shapes():
    with pytest.raises(ValueError):
        nn.DenseLayer(ad.parameter(np.eye(2)), ad.parameter(np.zeros(2)), "softsign")
    with pytest.raises(ValueError):
        nn.DenseLayer(ad.parameter(np.eye(2)), ad.parameter(np.zeros(3)))


# ---------------------------------------------------------------------------
# smooth_l1

def test_smooth_l1_closed_forms():
    assert nn.smooth_l1(0.0) == 0.0
    assert nn.smooth_l1(0.5) == pytest.approx(0.125)
    assert nn.smooth_l1(2.0) == pytest.approx(1.5)


def test_smooth_l1_continuous_at_kink():
    below = nn.smooth_l1(1.0 - 1e-6)
    above = nn.smooth_l1(1.0 + 1e-6)
    assert abs(above - below) < 1e-5
    # first derivative is continuous too: slope approaches 1 from both sides
    d_below = (nn.smooth_l1(1.0 - 1e-6) - nn.smooth_l1(1.0 - 3e-6)) / 2e-6
    d_above = (nn.smooth_l1(1.0 + 3e-6) - nn.smooth_l1(1.0 + 1e-6)) / 2e-6
    assert abs(d_above - d_below) < 1e-4


def test_smooth_l1_rejects_non_finite():
    with pytest.raises(ValueError):
        nn.smooth_l1(float("nan"))
    with pytest.raises(ValueError):
        nn.smooth_l1(np.array([1.0, np.inf]))


@given(st.floats(-50, 50))
@settings(max_examples=100)
def test_smooth_l1_nonnegative_and_even(x):
    y = nn.smooth_l1(x)
    assert y >= 0.0
    assert y == pytest.approx(nn.smooth_l1(-x))


# ---------------------------------------------------------------------------
# schedule

def test_lr_schedule_paper_defaults():
    s = nn.TrainSchedule()
    assert nn.lr_at(s, 0) == pytest.approx(1e-3)
    assert nn.lr_at(s, 10) == pytest.approx(1e-4)
    assert nn.lr_at(s, 25) == pytest.approx(1e-5)


def test_lr_out_of_range():
    s = nn.TrainSchedule()
    with pytest.raises(ValueError):
        nn.lr_at(s, -1)
    with pytest.raises(ValueError):
        nn.lr_at(s, 30)


def test_lr_non_increasing():
    s = nn.TrainSchedule(epochs=40, decay_every=7, decay_factor=3.0)
    lrs = [nn.lr_at(s, e) for e in range(s.epochs)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_schedule_validation():
    with pytest.raises(ValueError):
        nn.TrainSchedule(base_lr=0.0)
    with pytest.raises(ValueError):
        nn.TrainSchedule(decay_factor=0.5)
    with pytest.raises(ValueError):
        nn.TrainSchedule(dropout_p=1.0)


# ---------------------------------------------------------------------------
# sgd

def test_sgd_step_arithmetic():
    p = nn.ParameterBundle([("w", ad.parameter(1.0))])
    nn.sgd_step(p, {"w": np.array(0.0)}, 1e-3)
    assert float(p["w"].value) == 1.0
    nn.sgd_step(p, {"w": np.array(1.0)}, 0.1)
    assert float(p["w"].value) == pytest.approx(0.9)


def test_sgd_step_elementwise():
    p = nn.ParameterBundle([("w", ad.parameter(np.array([2.0, -2.0])))])
    nn.sgd_step(p, {"w": np.array([1.0, -1.0])}, 0.5)
    assert np.allclose(p["w"].value, [1.5, -1.5])


def test_sgd_step_shape_mismatch():
    p = nn.ParameterBundle([("w", ad.parameter(np.zeros(2)))])
    with pytest.raises(ValueError):
        nn.sgd_step(p, {"w": np.zeros(3)}, 0.1)


# ---------------------------------------------------------------------------
# grad_check

def test_grad_check_quadratic():
    w = ad.parameter(3.0)
    params = nn.ParameterBundle([("w", w)])
    err = nn.grad_check(lambda: w * w, params)
    assert err < 1e-8


def test_grad_check_constant_loss_is_zero_error():
    w = ad.parameter(2.0)
    params = nn.ParameterBundle([("w", w)])
    err = nn.grad_check(lambda: w * 0.0 + 5.0, params)
    assert err < 1e-12


def test_grad_check_detects_wrong_gradient():
    w = ad.parameter(1.5)
    params = nn.ParameterBundle([("w", w)])

    def bad_loss():
        # value of w^2 but gradient wired as if it were w^3
        t = ad.Tensor(w.value ** 2, parents=(w,),
                      vjp=lambda g: ad._accum(w, g * 3 * w.value ** 2))
        return t
    assert nn.grad_check(bad_loss, params) > 1e-2


def test_grad_check_rejects_non_finite_loss():
    w = ad.parameter(-1.0)
    params = nn.ParameterBundle([("w", w)])
    with pytest.raises(ValueError):
        nn.grad_check(lambda: ad.log(w), params)


# ---------------------------------------------------------------------------
# l2_normalize

def test_l2_normalize_examples():
    assert np.allclose(nn.l2_normalize([3.0, 4.0]), [0.6, 0.8])
    assert np.allclose(nn.l2_normalize([0.0, 0.0]), [0.0, 0.0])
    u = np.array([1.0, 0.0, 0.0])
    assert np.allclose(nn.l2_normalize(u), u)


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8))
@settings(max_examples=150)
def test_l2_normalize_norm_is_one_or_exact_zero(xs):
    out = nn.l2_normalize(np.array(xs))
    n = np.linalg.norm(out)
    assert n == 0.0 or abs(n - 1.0) < 1e-12


# ---------------------------------------------------------------------------
# LSTM

def test_lstm_zero_weights_single_token_gives_zeros():
    enc = nn.LstmEncoder(3, 4, np.random.default_rng(0))
    enc.w_fwd.value[:] = 0.0
    out = enc.encode([np.ones(3)])
    assert np.allclose(out.value, 0.0)


def test_lstm_output_dims():
    rng = np.random.default_rng(1)
    uni = nn.LstmEncoder(3, 5, rng)
    bi = nn.LstmEncoder(3, 5, rng, bidirectional=True)
    xs = [np.ones(3), np.zeros(3)]
    assert uni.encode(xs).value.shape == (5,)
    assert bi.encode(xs).value.shape == (10,)


def test_lstm_empty_sequence_raises():
    enc = nn.LstmEncoder(3, 4, np.random.default_rng(0))
    with pytest.raises(ValueError):
        enc.encode([])


def test_lstm_matches_hand_unrolled_recurrence():
    # 1 input unit, 1 hidden unit; gates ordered [i, f, o, g]
    enc = nn.LstmEncoder(1, 1, np.random.default_rng(0))
    W = np.array([[0.5, 0.25], [0.3, -0.2], [0.1, 0.4], [0.7, -0.5]])
    b = np.array([0.01, 0.02, 0.03, 0.04])
    enc.w_fwd.value[:] = W
    enc.b_fwd.value[:] = b

    def sig(z):
        return 1.0 / (1.0 + np.exp(-z))

    h = c = 0.0
    for x in (0.9, -0.6):
        i = sig(W[0, 0] * x + W[0, 1] * h + b[0])
        f = sig(W[1, 0] * x + W[1, 1] * h + b[1])
        o = sig(W[2, 0] * x + W[2, 1] * h + b[2])
        g = np.tanh(W[3, 0] * x + W[3, 1] * h + b[3])
        c = f * c + i * g
        h = o * np.tanh(c)

    out = enc.encode([np.array([0.9]), np.array([-0.6])])
    assert out.value[0] == pytest.approx(h, abs=1e-12)


def test_lstm_gradients_pass_grad_check():
    rng = np.random.default_rng(5)
    enc = nn.LstmEncoder(2, 3, rng, bidirectional=True)
    params = nn.ParameterBundle(enc.params())
    xs = [rng.standard_normal(2) for _ in range(3)]
    target = rng.standard_normal(6)

    def loss():
        d = enc.encode(xs) - target
        return ad.tsum(d * d)
    assert nn.grad_check(loss, params) < 1e-4


# ---------------------------------------------------------------------------
# init determinism / bundles

def test_init_bit_reproducible():
    a = nn.init_matrix(np.random.default_rng(42), 8, 4, "msra")
    b = nn.init_matrix(np.random.default_rng(42), 8, 4, "msra")
    assert np.array_equal(a, b)
    c = nn.init_matrix(np.random.default_rng(42), 8, 4, "xavier")
    d = nn.init_matrix(np.random.default_rng(42), 8, 4, "xavier")
    assert np.array_equal(c, d)


def test_init_scales():
    rng = np.random.default_rng(0)
    m = nn.init_matrix(rng, 2000, 50, "msra")
    assert m.std() == pytest.approx(np.sqrt(2.0 / 50), rel=0.05)
    x = nn.init_matrix(rng, 2000, 50, "xavier")
    bound = np.sqrt(6.0 / (50 + 2000))
    assert np.abs(x).max() <= bound
    assert np.abs(x).max() > 0.9 * bound


def test_init_scheme_validation():
    with pytest.raises(ValueError):
        nn.InitScheme(kind="orthogonal")


def test_parameter_bundle_json_round_trip():
    rng = np.random.default_rng(9)
    b = nn.ParameterBundle([("layer.w", ad.parameter(rng.standard_normal((3, 2)))),
                            ("layer.b", ad.parameter(rng.standard_normal(3)))])
    s = b.to_json()
    b2 = nn.ParameterBundle.from_json(s)
    assert b2.names() == b.names()
    for n in b.names():
        assert np.array_equal(b[n].value, b2[n].value)
    bad = json.loads(s)
    bad["schema_version"] = 99
    with pytest.raises(ValueError):
        nn.ParameterBundle.from_json_dict(bad)


# ---------------------------------------------------------------------------
# standardize / dropout

def test_standardize_centers_and_scales():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((64, 5)) * 4.0 + 2.0
    out = nn.standardize(x).value
    assert np.allclose(out.mean(axis=0), 0.0, atol=1e-9)
    assert np.allclose(out.std(axis=0), 1.0, atol=1e-2)


def test_standardize_constant_batch_stays_finite():
    x = np.ones((4, 3))
    out = nn.standardize(x).value
    assert np.all(np.isfinite(out))
    assert np.allclose(out, 0.0)


def test_dropout_mask_properties():
    rng = np.random.default_rng(0)
    assert np.array_equal(nn.dropout_mask(rng, (4,), 0.0), np.ones(4))
    m = nn.dropout_mask(np.random.default_rng(1), (10000,), 0.5)
    assert set(np.unique(m)) <= {0.0, 2.0}
    assert m.mean() == pytest.approx(1.0, abs=0.05)
