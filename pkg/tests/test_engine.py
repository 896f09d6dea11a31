import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from targetforge.engine import (
    Activation,
    BatchNorm,
    Conv2D,
    Dense,
    Dropout,
    MaxPool2x2,
    ShapeMismatchError,
    build_layer,
    build_network,
    cross_entropy,
    cross_entropy_dlogits,
    softmax_probs,
)

from gradcheck import check_network, net_loss, rel_err


def rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------


def test_softmax_uniform_on_zero_logits():
    p = softmax_probs(np.zeros((1, 10), dtype=np.float32))
    assert np.allclose(p, 0.1, atol=1e-7)


def test_softmax_confident_row():
    # closed form: e^10 / (e^10 + 2)
    expected = math.exp(10) / (math.exp(10) + 2)
    p = softmax_probs(np.array([[10.0, 0.0, 0.0]], dtype=np.float32))
    assert p[0, 0] > 0.9999
    assert abs(p[0, 0] - expected) < 1e-6


def test_softmax_large_logits_no_overflow():
    p = softmax_probs(np.array([[1000.0, 0.0]], dtype=np.float32))
    assert np.isfinite(p).all()
    assert p[0, 0] > 0.999999
    assert p[0, 1] < 1e-6


@settings(max_examples=50, deadline=None)
@given(
    hnp.arrays(
        np.float32,
        st.tuples(st.integers(1, 6), st.integers(2, 12)),
        elements=st.floats(-50, 50, width=32),
    )
)
def test_softmax_rows_sum_to_one_and_preserve_argmax(logits):
    p = softmax_probs(logits)
    assert np.all(p >= 0)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-6)
    # order preservation, stated tie-robustly: the max logit attains the max prob
    rows = np.arange(len(p))
    assert np.all(p[rows, logits.argmax(axis=1)] == p.max(axis=1))


# ---------------------------------------------------------------------------
# cross-entropy
# ---------------------------------------------------------------------------


def test_loss_uniform_probs_is_log_k():
    logits = np.zeros((4, 10), dtype=np.float32)
    assert abs(cross_entropy(logits, [3, 1, 0, 9]) - math.log(10)) < 1e-6


def test_loss_zero_at_certain_prediction():
    logits = np.full((2, 5), -60.0, dtype=np.float32)
    logits[0, 2] = 60.0
    logits[1, 4] = 60.0
    assert cross_entropy(logits, [2, 4]) < 1e-6


def test_loss_matches_direct_formula():
    r = rng(7)
    logits = r.normal(size=(6, 4)).astype(np.float32)
    labels = r.integers(0, 4, size=6)
    # independent float64 evaluation of -mean log softmax[y]
    z = logits.astype(np.float64)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    expected = -np.log(p[np.arange(6), labels]).mean()
    assert rel_err(cross_entropy(logits, labels), expected) < 1e-6


def test_loss_rejects_out_of_range_label():
    with pytest.raises(ValueError, match="out of range"):
        cross_entropy(np.zeros((2, 3), dtype=np.float32), [0, 3])
    with pytest.raises(ValueError, match="out of range"):
        cross_entropy_dlogits(np.zeros((1, 3), dtype=np.float32), [-1])


# ---------------------------------------------------------------------------
# layer forwards
# ---------------------------------------------------------------------------


def test_identity_conv_preserves_image():
    c = 3
    layer = build_layer(Conv2D(1, 1, c), (5, 5, c), rng(0))
    layer.kernel = np.eye(c, dtype=np.float32).reshape(1, 1, c, c)
    layer.bias[:] = 0
    x = rng(1).random((2, 5, 5, c)).astype(np.float32)
    y, _ = layer.forward(x, "eval", None)
    assert np.allclose(y, x, atol=1e-7)


def test_maxpool_constant_input():
    layer = build_layer(MaxPool2x2(), (6, 6, 2), rng(0))
    x = np.full((3, 6, 6, 2), 0.7, dtype=np.float32)
    y, _ = layer.forward(x, "eval", None)
    assert y.shape == (3, 3, 3, 2)
    assert np.all(y == np.float32(0.7))


def test_dense_matches_triple_loop_matmul():
    layer = build_layer(Dense(3), (1, 1, 5), rng(2))
    x = rng(3).random((1, 1, 1, 5)).astype(np.float32)
    y, _ = layer.forward(x, "eval", None)
    expected = np.zeros((1, 3))
    for o in range(3):
        for i in range(5):
            expected[0, o] += float(x.flat[i]) * float(layer.weight[i, o])
        expected[0, o] += float(layer.bias[o])
    assert np.allclose(y, expected, atol=1e-6)


def test_conv_shape_mismatch_names_layer():
    net = build_network([Conv2D(3, 3, 4), Dense(2)], (6, 6, 1), rng(0))
    with pytest.raises(ShapeMismatchError, match="layer -1"):
        net.forward(np.zeros((1, 5, 5, 1), dtype=np.float32))


def test_maxpool_rejects_odd_dims():
    with pytest.raises(ValueError, match="even spatial"):
        build_layer(MaxPool2x2(), (5, 6, 1), rng(0))


def test_dropout_eval_is_identity_and_train_scales():
    layer = build_layer(Dropout(0.5), (4, 4, 1), rng(0))
    x = rng(1).random((2, 4, 4, 1)).astype(np.float32)
    y_eval, _ = layer.forward(x, "eval", None)
    assert y_eval is x  # untouched in eval mode
    y_train, cache = layer.forward(x, "train", rng(5))
    kept = cache["mask"] > 0
    assert np.allclose(y_train[kept], (x * cache["mask"])[kept])
    assert np.all(y_train[~kept] == 0)


def test_batchnorm_running_stats_update_only_in_train():
    layer = build_layer(BatchNorm(), (4, 4, 2), rng(0))
    x = (rng(1).random((8, 4, 4, 2)) * 3 + 1).astype(np.float32)
    before = layer.running_mean.copy()
    layer.forward(x, "eval", None)
    assert np.array_equal(layer.running_mean, before)
    layer.forward(x, "train", None)
    assert not np.array_equal(layer.running_mean, before)
    assert np.all(layer.running_var >= 0)


def test_eval_forward_is_pure():
    net = build_network(
        [Conv2D(3, 3, 4), Activation("relu"), BatchNorm(), MaxPool2x2(),
         Dropout(0.3), Dense(5)],
        (8, 8, 2), rng(11),
    )
    x = rng(12).random((3, 8, 8, 2)).astype(np.float32)
    a = net.forward(x, "eval").logits
    b = net.forward(x, "eval").logits
    assert np.array_equal(a, b)
    assert np.isfinite(a).all()


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def test_two_layer_net_gradients_match_finite_differences():
    net = build_network([Conv2D(3, 3, 3), Dense(4)], (6, 6, 1), rng(20))
    x = rng(21).random((3, 6, 6, 1)).astype(np.float32)
    labels = np.array([0, 2, 3])
    check_network(net, x, labels, "eval", pass_seed=0, n_coords=120, rng=rng(22),
                  rtol=1e-4)


@pytest.mark.parametrize(
    "kinds, mode",
    [
        ([Conv2D(3, 3, 3), Dense(4)], "eval"),
        ([Conv2D(2, 2, 2), Activation("relu"), Dense(3)], "eval"),
        ([Conv2D(3, 3, 2), Activation("elu"), Dense(3)], "eval"),
        ([Conv2D(3, 3, 2), BatchNorm(), Dense(3)], "train"),
        ([Conv2D(3, 3, 2), BatchNorm(), Dense(3)], "eval"),
        ([Conv2D(3, 3, 2), MaxPool2x2(), Dense(3)], "eval"),
        ([Conv2D(3, 3, 2), Dropout(0.4), Dense(3)], "train"),
    ],
    ids=["conv-dense", "relu", "elu", "bn-train", "bn-eval", "maxpool", "dropout"],
)
def test_every_layer_kind_passes_gradcheck(kinds, mode):
    # h below the default keeps kinked activations (relu/elu/maxpool) from
    # flipping inside the probe window
    net = build_network(kinds, (8, 8, 4), rng(30))
    x = rng(31).random((4, 8, 8, 4)).astype(np.float32)
    labels = rng(32).integers(0, 3, size=4)
    check_network(net, x, labels, mode, pass_seed=3, n_coords=100, rng=rng(33), h=2e-4)


def test_input_gradient_linear_softmax_closed_form():
    # single dense layer: d loss / dx = (softmax(logits) - onehot) @ W^T / N
    net = build_network([Dense(4)], (1, 1, 6), rng(40))
    x = rng(41).random((3, 1, 1, 6)).astype(np.float32)
    labels = np.array([1, 0, 3])
    _, record = net.loss_pass(x, labels, mode="eval")
    _, dx = net.loss_grads(record, labels)
    p = softmax_probs(record.logits).astype(np.float64)
    p[np.arange(3), labels] -= 1
    expected = (p / 3) @ net.layers[0].weight.astype(np.float64).T
    assert np.allclose(dx.reshape(3, 6), expected, atol=1e-6)


def test_gradients_vanish_at_perfect_prediction():
    # bias forces probability ~1 on the true class; no conv, so no regularizer
    net = build_network([Dense(3)], (1, 1, 2), rng(50))
    net.layers[0].weight[:] = 0
    net.layers[0].bias[:] = np.array([80.0, 0.0, 0.0], dtype=np.float32)
    x = rng(51).random((2, 1, 1, 2)).astype(np.float32)
    loss, record = net.loss_pass(x, [0, 0], mode="eval")
    grads, dx = net.loss_grads(record, [0, 0])
    assert loss < 1e-6
    assert np.all(np.abs(dx) < 1e-6)
    assert np.all(np.abs(grads[0]["weight"]) < 1e-6)
    assert np.all(np.abs(grads[0]["bias"]) < 1e-6)


def test_conv_gradient_includes_l2_regularizer():
    reg = build_network([Conv2D(3, 3, 2, l2=0.01), Dense(3)], (4, 4, 1), rng(60))
    plain = build_network([Conv2D(3, 3, 2, l2=0.0), Dense(3)], (4, 4, 1), rng(60))
    x = rng(61).random((2, 4, 4, 1)).astype(np.float32)
    labels = [0, 1]
    g_reg, _ = reg.loss_grads(reg.forward(x, "eval"), labels)
    g_plain, _ = plain.loss_grads(plain.forward(x, "eval"), labels)
    kernel = reg.layers[0].kernel
    assert np.allclose(g_reg[0]["kernel"] - g_plain[0]["kernel"], 2 * 0.01 * kernel,
                       atol=1e-7)
    assert reg.reg_loss() == pytest.approx(0.01 * float((kernel.astype(np.float64) ** 2).sum()))
    assert plain.reg_loss() == 0.0


def test_maxpool_backward_routes_all_gradient():
    layer = build_layer(MaxPool2x2(), (6, 6, 3), rng(70))
    x = rng(71).random((4, 6, 6, 3)).astype(np.float32)
    y, cache = layer.forward(x, "eval", None)
    dy = rng(72).random(y.shape).astype(np.float32)
    dx, _ = layer.backward(dy, cache)
    assert dx.sum() == pytest.approx(dy.sum(), rel=1e-5)
    # gradient lands only on argmax positions: nonzero count <= one per window
    nz = (dx.reshape(4, 3, 2, 3, 2, 3) != 0).sum(axis=(2, 4))
    assert nz.max() <= 1


def test_backward_rejects_mismatched_record():
    net = build_network([Dense(3)], (1, 1, 2), rng(80))
    other = build_network([Conv2D(1, 1, 1), Dense(3)], (1, 1, 2), rng(81))
    record = net.forward(np.zeros((1, 1, 1, 2), dtype=np.float32))
    with pytest.raises(ValueError, match="does not match"):
        other.backward(record, np.zeros((1, 3), dtype=np.float32))


def test_dropout_backward_matches_forward_mask():
    # same pass seed gives the same mask, so FD through train mode is exact
    net = build_network([Dropout(0.5), Dense(3)], (2, 2, 1), rng(90))
    x = rng(91).random((2, 2, 2, 1)).astype(np.float32)
    l0 = net_loss(net, x, [0, 1], "train", pass_seed=4)
    l1 = net_loss(net, x, [0, 1], "train", pass_seed=4)
    assert l0 == l1
