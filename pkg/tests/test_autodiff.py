import math

import numpy as np
import pytest

from smil import autodiff as ad
from smil.autodiff import GraphError, ShapeMismatch, Tensor


def rng(seed=0):
    return np.random.default_rng(seed)


def spread(x, margin=1e-3):
    """Push values away from 0 and from each other so ReLU/max-pool are
    locally linear under finite-difference probing."""
    flat = x.reshape(-1)
    flat += np.linspace(0.0, 0.7, flat.size)
    flat[np.abs(flat) < margin] += 3 * margin
    return flat.reshape(x.shape)


# ---------------------------------------------------------------- forward ops


def test_softplus_at_zero_is_ln2():
    out = ad.softplus(Tensor(0.0))
    assert out.item() == pytest.approx(math.log(2.0), abs=1e-12)


def test_matmul_identity_returns_operand():
    a = rng(1).normal(size=(3, 3))
    out = ad.matmul(Tensor(a), Tensor(np.eye(3)))
    np.testing.assert_array_equal(out.data, a)


def test_conv2d_valid_padding_shape():
    x = Tensor(rng(2).normal(size=(1, 1, 28, 28)))
    w = Tensor(rng(3).normal(size=(1, 1, 5, 5)))
    assert ad.conv2d(x, w).shape == (1, 1, 24, 24)


def test_conv2d_matches_naive_loops():
    # independent oracle: direct quadruple loop
    r = rng(4)
    x = r.normal(size=(2, 3, 8, 7))
    w = r.normal(size=(4, 3, 3, 3))
    got = ad.conv2d(Tensor(x), Tensor(w)).data
    want = np.zeros((2, 4, 6, 5))
    for n in range(2):
        for f in range(4):
            for i in range(6):
                for j in range(5):
                    want[n, f, i, j] = np.sum(x[n, :, i : i + 3, j : j + 3] * w[f])
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_maxpool_ties_break_to_lowest_flat_index():
    x = np.zeros((1, 1, 2, 2))  # all equal: a 4-way tie
    t = Tensor(x, requires_grad=True)
    out = ad.maxpool2(t)
    ad.mean_all(out).backward()
    want = np.zeros((1, 1, 2, 2))
    want[0, 0, 0, 0] = 1.0
    np.testing.assert_array_equal(t.grad, want)


def test_forward_is_deterministic():
    x = rng(5).normal(size=(4, 4))
    a = ad.softplus(ad.matmul(Tensor(x), Tensor(x))).data
    b = ad.softplus(ad.matmul(Tensor(x), Tensor(x))).data
    assert np.array_equal(a, b)


def test_concat_then_split_roundtrip():
    r = rng(6)
    parts = [r.normal(size=(3, k)) for k in (2, 5, 1)]
    joined = ad.concat([Tensor(p) for p in parts], axis=1)
    back = ad.split(joined, [2, 5, 1], axis=1)
    for p, b in zip(parts, back):
        np.testing.assert_array_equal(p, b.data)


# ---------------------------------------------------------------- backward


def test_backward_square_at_3():
    x = Tensor(3.0, requires_grad=True)
    ad.mul(x, x).backward()
    assert x.grad == pytest.approx(6.0, abs=1e-12)


def test_backward_softplus_at_0():
    x = Tensor(0.0, requires_grad=True)
    ad.softplus(x).backward()
    assert x.grad == pytest.approx(0.5, abs=1e-12)


def test_softmax_cross_entropy_grad_matches_finite_differences():
    logits = rng(7).normal(size=(4, 10))
    labels = rng(8).integers(0, 10, size=4)

    def f(t):
        return ad.mean_all(ad.softmax_cross_entropy(t, labels))

    assert ad.grad_check(f, Tensor(logits), step=1e-5) < 1e-4


def test_backward_requires_scalar_loss():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError, match="scalar"):
        ad.mul(x, x).backward()


def test_backward_twice_on_same_graph_fails():
    x = Tensor(2.0, requires_grad=True)
    loss = ad.mul(x, x)
    loss.backward()
    with pytest.raises(GraphError, match="consumed"):
        loss.backward()


def test_shape_mismatch_names_kind_and_dims():
    with pytest.raises(ShapeMismatch, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeMismatch, match="add"):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_gradients_accumulate_across_uses():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = ad.add(ad.sum_all(ad.mul(x, x)), ad.sum_all(x))
    y.backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1, rtol=1e-12)


# ---------------------------------------------------------------- grad_check


def test_grad_check_constant_gradient():
    pt = Tensor(rng(9).normal(size=(5,)) * 2)
    assert ad.grad_check(ad.sum_all, pt, step=1e-2) < 1e-10


def test_grad_check_relu_away_from_zero():
    pt = Tensor(spread(rng(10).normal(size=(6,))))

    def f(t):
        return ad.sum_all(ad.relu(t))

    assert ad.grad_check(f, pt, step=1e-4) < 1e-6


def test_grad_check_rejects_nonscalar():
    with pytest.raises(GraphError, match="scalar"):
        ad.grad_check(lambda t: ad.relu(t), Tensor(np.ones(2)))


def test_grad_check_rejects_bad_step():
    with pytest.raises(ValueError, match="step"):
        ad.grad_check(ad.sum_all, Tensor(np.ones(2)), step=0.5)


def _op_cases():
    """One tensor-to-scalar probe per registered op kind."""
    r = rng(11)
    w_mat = r.normal(size=(3, 2))
    w_conv = r.normal(size=(2, 2, 3, 3))
    bias = r.normal(size=(4,))
    labels = np.array([0, 2, 1])
    bits = (r.uniform(size=(3, 4)) > 0.5).astype(float)
    other = r.normal(size=(2, 4))
    conv_in = r.normal(size=(2, 2, 6, 6))

    return {
        "add": ((2, 4), lambda t: ad.sum_all(ad.mul(ad.add(t, Tensor(other)), ad.add(t, Tensor(other))))),
        "sub": ((2, 4), lambda t: ad.sum_all(ad.mul(ad.sub(t, Tensor(other)), ad.sub(t, Tensor(other))))),
        "mul": ((2, 4), lambda t: ad.sum_all(ad.mul(t, ad.mul(t, Tensor(other))))),
        "scalar-broadcast": ((2, 4), lambda t: ad.sum_all(ad.mul(ad.add(t, 1.5), 0.25))),
        "matmul": ((4, 3), lambda t: ad.sum_all(ad.mul(ad.matmul(t, Tensor(w_mat)), ad.matmul(t, Tensor(w_mat))))),
        "bias_add": ((3, 4), lambda t: ad.sum_all(ad.mul(ad.bias_add(t, Tensor(bias)), ad.bias_add(t, Tensor(bias))))),
        "conv2d": ((2, 2, 6, 6), lambda t: ad.sum_all(ad.mul(ad.conv2d(t, Tensor(w_conv)), 0.5))),
        "conv2d-weights": ((2, 2, 3, 3), lambda t: ad.sum_all(ad.conv2d(Tensor(conv_in), t))),
        "conv_bias_add": ((2, 4, 3, 3), lambda t: ad.sum_all(ad.mul(ad.conv_bias_add(t, Tensor(bias)), 0.3))),
        "maxpool2": ((1, 2, 4, 4), lambda t: ad.sum_all(ad.maxpool2(t))),
        "relu": ((3, 4), lambda t: ad.sum_all(ad.mul(ad.relu(t), ad.relu(t)))),
        "softplus": ((3, 4), lambda t: ad.sum_all(ad.softplus(t))),
        "sigmoid": ((3, 4), lambda t: ad.sum_all(ad.sigmoid(t))),
        "log": ((3, 4), lambda t: ad.sum_all(ad.log(ad.add(ad.mul(t, t), 0.5)))),
        "reshape": ((3, 4), lambda t: ad.sum_all(ad.mul(ad.reshape(t, (2, 6)), ad.reshape(t, (2, 6))))),
        "concat": ((3, 4), lambda t: ad.sum_all(ad.mul(ad.concat([t, t], axis=1), ad.concat([t, t], axis=1)))),
        "split": ((3, 4), lambda t: ad.sum_all(ad.mul(*ad.split(t, [2, 2], axis=1)))),
        "softmax_cross_entropy": ((3, 5), lambda t: ad.mean_all(ad.softmax_cross_entropy(t, labels))),
        "sigmoid_bce": ((3, 4), lambda t: ad.mean_all(ad.sigmoid_bce(t, bits, pos_weight=2.0))),
        "mean": ((3, 4), lambda t: ad.mean_all(ad.mul(t, t))),
        "sum": ((3, 4), lambda t: ad.sum_all(ad.mul(t, t))),
    }


@pytest.mark.parametrize("kind", sorted(_op_cases()))
def test_every_backward_rule_against_finite_differences(kind):
    shape, f = _op_cases()[kind]
    r = rng(hash(kind) % 2**32)
    for trial in range(10):
        x = r.normal(size=shape)
        if kind in ("relu", "maxpool2"):
            x = spread(x)
        assert ad.grad_check(f, Tensor(x), step=1e-5) < 1e-4, f"{kind} trial {trial}"
