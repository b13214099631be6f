import numpy as np
import pytest

from layertrim import tensor as tt
from layertrim.tensor import TensorNode

from helpers import max_grad_error


class TestMatmul:
    def test_identity(self):
        a = tt.matmul(TensorNode(np.eye(2)), TensorNode([[1.0, 2.0], [3.0, 4.0]]))
        assert np.array_equal(a.values, [[1.0, 2.0], [3.0, 4.0]])

    def test_dot_product(self):
        out = tt.matmul(TensorNode([[1.0, 2.0]]), TensorNode([[3.0], [4.0]]))
        assert np.array_equal(out.values, [[11.0]])

    def test_zeros_annihilate(self):
        rng = np.random.default_rng(0)
        out = tt.matmul(TensorNode(np.zeros((2, 3))), TensorNode(rng.standard_normal((3, 4))))
        assert np.array_equal(out.values, np.zeros((2, 4)))

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 4\)"):
            tt.matmul(TensorNode(np.zeros((2, 3))), TensorNode(np.zeros((2, 4))))

    def test_batch_mismatch_rejected(self):
        with pytest.raises(ValueError, match="batch"):
            tt.matmul(TensorNode(np.zeros((2, 3, 4))), TensorNode(np.zeros((5, 4, 3))))


class TestSoftmax:
    def test_uniform(self):
        out = tt.softmax(TensorNode([0.0, 0.0, 0.0]), axis=-1)
        assert np.allclose(out.values, [1 / 3] * 3, atol=1e-12)

    def test_large_inputs_stable(self):
        out = tt.softmax(TensorNode([1000.0, 1000.0]), axis=-1)
        assert np.allclose(out.values, [0.5, 0.5], atol=1e-12)

    def test_closed_form(self):
        out = tt.softmax(TensorNode([0.0, np.log(3.0)]), axis=-1)
        assert np.allclose(out.values, [0.25, 0.75], atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            shape = tuple(rng.integers(1, 6, size=rng.integers(1, 4)))
            x = rng.standard_normal(shape) * rng.choice([1.0, 50.0, 500.0])
            axis = int(rng.integers(0, len(shape)))
            p = tt.softmax(TensorNode(x), axis=axis).values
            assert np.abs(p.sum(axis=axis) - 1.0).max() < 1e-9
            assert (p >= 0).all()

    def test_nonfinite_rejected(self):
        with pytest.raises(FloatingPointError):
            tt.softmax(TensorNode([0.0, np.nan]), axis=-1)
        with pytest.raises(FloatingPointError):
            tt.softmax(TensorNode([0.0, np.inf]), axis=-1)


class TestLayerNorm:
    def test_constant_vector_maps_to_zero(self):
        out = tt.layer_norm(TensorNode([3.0, 3.0, 3.0]), TensorNode(np.ones(3)), TensorNode(np.zeros(3)))
        assert np.allclose(out.values, 0.0, atol=1e-12)

    def test_two_point_analytic(self):
        out = tt.layer_norm(TensorNode([1.0, -1.0]), TensorNode(np.ones(2)), TensorNode(np.zeros(2)))
        assert np.allclose(out.values, [1.0, -1.0], atol=1e-4)

    def test_zero_gain_broadcasts_bias(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 5))
        bias = rng.standard_normal(5)
        out = tt.layer_norm(TensorNode(x), TensorNode(np.zeros(5)), TensorNode(bias))
        assert np.array_equal(out.values, np.broadcast_to(bias, (4, 5)))

    def test_bad_gain_shape(self):
        with pytest.raises(ValueError, match="gain/bias"):
            tt.layer_norm(TensorNode(np.zeros((2, 4))), TensorNode(np.ones(3)), TensorNode(np.zeros(4)))


class TestCrossEntropy:
    def test_confident_correct_is_near_zero(self):
        logits = np.zeros((3, 5))
        targets = np.array([1, 2, 0])
        logits[np.arange(3), targets] = 50.0
        out = tt.cross_entropy(TensorNode(logits), targets, np.ones(3, dtype=bool))
        assert float(out.values) < 1e-6

    def test_uniform_logits(self):
        out = tt.cross_entropy(TensorNode(np.zeros((2, 4))), np.array([0, 3]), np.ones(2, dtype=bool))
        assert np.isclose(float(out.values), np.log(4.0), atol=1e-12)

    def test_masking_selects_submask(self):
        rng = np.random.default_rng(11)
        logits = rng.standard_normal((6, 8))
        targets = rng.integers(0, 8, size=6)
        mask = np.array([True, False, True, False, False, True])
        out = tt.cross_entropy(TensorNode(logits), targets, mask)
        manual = tt.cross_entropy(TensorNode(logits[mask]), targets[mask], np.ones(3, dtype=bool))
        assert np.isclose(float(out.values), float(manual.values), atol=1e-12)

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError, match="no positions"):
            tt.cross_entropy(TensorNode(np.zeros((2, 3))), np.zeros(2, dtype=int), np.zeros(2, dtype=bool))

    def test_target_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            tt.cross_entropy(TensorNode(np.zeros((2, 3))), np.array([0, 3]), np.ones(2, dtype=bool))


class TestBackward:
    def test_sum_gives_ones(self):
        p = TensorNode(np.arange(6.0).reshape(2, 3), requires_grad=True)
        tt.reduce_sum(p).backward()
        assert np.array_equal(p.grad, np.ones((2, 3)))

    def test_quadratic(self):
        p = TensorNode([1.0, 2.0], requires_grad=True)
        tt.reduce_sum(tt.mul(p, p)).backward()
        assert np.allclose(p.grad, [2.0, 4.0], atol=1e-12)

    def test_random_graph_matches_finite_differences(self):
        # 10-parameter graph mixing matmul, gelu, layer_norm and softmax.
        rng = np.random.default_rng(17)
        x = rng.standard_normal((2, 5))
        w = rng.standard_normal((5, 2))
        proj = rng.standard_normal((2, 2))

        def make_loss(xn, wn):
            h = tt.gelu(tt.matmul(xn, wn))
            h = tt.layer_norm(h, TensorNode(np.ones(2)), TensorNode(np.zeros(2)))
            p = tt.softmax(h, axis=-1)
            return tt.reduce_sum(tt.mul(p, proj))

        assert max_grad_error(make_loss, [x, w]) < 1e-5

    def test_non_scalar_root_rejected(self):
        p = TensorNode(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            tt.mul(p, 2.0).backward()

    def test_repeated_backward_accumulates(self):
        p = TensorNode([1.0, 2.0], requires_grad=True)
        loss = tt.reduce_sum(tt.mul(p, p))
        loss.backward()
        loss.backward()
        assert np.allclose(p.grad, [4.0, 8.0], atol=1e-12)

    def test_no_grad_inputs_build_no_graph(self):
        out = tt.matmul(TensorNode(np.eye(2)), TensorNode(np.eye(2)))
        assert not out.requires_grad and out._parents == ()


# Each entry builds a scalar loss from randomly shaped inputs; together with
# the seeds below this sweeps >100 random cases across every differentiable op.
def _loss_add(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((1, 4))
    w = rng.standard_normal((3, 4))
    return lambda an, bn: tt.reduce_sum(tt.mul(tt.add(an, bn), w)), [a, b]


def _loss_mul(rng):
    a = rng.standard_normal((2, 3, 2))
    b = rng.standard_normal((3, 1))
    w = rng.standard_normal((2, 3, 2))
    return lambda an, bn: tt.reduce_sum(tt.mul(tt.mul(an, bn), w)), [a, b]


def _loss_matmul(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    w = rng.standard_normal((3, 2))
    return lambda an, bn: tt.reduce_sum(tt.mul(tt.matmul(an, bn), w)), [a, b]


def _loss_matmul_batched(rng):
    a = rng.standard_normal((2, 2, 3))
    b = rng.standard_normal((2, 3, 2))
    w = rng.standard_normal((2, 2, 2))
    return lambda an, bn: tt.reduce_sum(tt.mul(tt.matmul(an, bn), w)), [a, b]


def _loss_softmax(rng):
    x = rng.standard_normal((3, 5)) * 3.0
    w = rng.standard_normal((3, 5))
    return lambda xn: tt.reduce_sum(tt.mul(tt.softmax(xn, axis=-1), w)), [x]


def _loss_layer_norm(rng):
    x = rng.standard_normal((4, 6))
    g = rng.standard_normal(6)
    b = rng.standard_normal(6)
    w = rng.standard_normal((4, 6))
    return lambda xn, gn, bn: tt.reduce_sum(tt.mul(tt.layer_norm(xn, gn, bn), w)), [x, g, b]


def _loss_gelu(rng):
    x = rng.standard_normal((3, 4)) * 2.0
    w = rng.standard_normal((3, 4))
    return lambda xn: tt.reduce_sum(tt.mul(tt.gelu(xn), w)), [x]


def _loss_take_rows(rng):
    x = rng.standard_normal((5, 3))
    idx = rng.integers(0, 5, size=(2, 4))
    w = rng.standard_normal((2, 4, 3))
    return lambda xn: tt.reduce_sum(tt.mul(tt.take_rows(xn, idx), w)), [x]


def _loss_reshape_transpose(rng):
    x = rng.standard_normal((2, 3, 4))
    w = rng.standard_normal((4, 6))
    return (
        lambda xn: tt.reduce_sum(tt.mul(tt.reshape(tt.transpose(xn, (2, 0, 1)), (4, 6)), w)),
        [x],
    )


def _loss_cross_entropy(rng):
    x = rng.standard_normal((5, 6)) * 2.0
    targets = rng.integers(0, 6, size=5)
    mask = rng.random(5) < 0.7
    if not mask.any():
        mask[0] = True
    return lambda xn: tt.cross_entropy(xn, targets, mask), [x]


def _loss_skew_kl(rng):
    x = rng.standard_normal((3, 5)) * 2.0
    p_logits = rng.standard_normal((3, 5)) * 2.0
    e = np.exp(p_logits - p_logits.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    lam = float(rng.uniform(0.05, 0.9))
    return lambda xn: tt.skew_kl(p, tt.softmax(xn, axis=-1), lam), [x]


def _loss_linear(rng):
    x = rng.standard_normal((2, 3, 4))
    w = rng.standard_normal((4, 3))
    out_w = rng.standard_normal((2, 3, 3))
    return lambda xn, wn: tt.reduce_sum(tt.mul(tt.linear(xn, wn), out_w)), [x, w]


_OP_LOSSES = [
    _loss_add, _loss_mul, _loss_matmul, _loss_matmul_batched, _loss_softmax,
    _loss_layer_norm, _loss_gelu, _loss_take_rows, _loss_reshape_transpose,
    _loss_cross_entropy, _loss_skew_kl, _loss_linear,
]


@pytest.mark.parametrize("seed", range(9))
@pytest.mark.parametrize("factory", _OP_LOSSES, ids=lambda f: f.__name__)
def test_op_gradients_match_finite_differences(factory, seed):
    rng = np.random.default_rng(1000 + seed)
    make_loss, arrays = factory(rng)
    assert max_grad_error(make_loss, arrays) < 1e-4


class TestSkewKL:
    def test_identical_distributions_exactly_zero(self):
        p = np.array([0.3, 0.5, 0.2])
        assert tt.skew_kl(p, p.copy(), 0.1) == 0.0

    def test_lambda_one_is_zero_for_any_pair(self):
        assert tt.skew_kl(np.array([0.9, 0.1]), np.array([0.2, 0.8]), 1.0) == 0.0

    def test_worked_example(self):
        value = tt.skew_kl(np.array([0.9, 0.1]), np.array([0.5, 0.5]), 0.1)
        expected = 0.9 * np.log(0.9 / 0.54) + 0.1 * np.log(0.1 / 0.46)
        assert abs(value - expected) < 1e-12
        assert abs(value - 0.3073) < 1e-4

    def test_nonnegative_and_finite_with_zero_q_entries(self):
        rng = np.random.default_rng(23)
        for _ in range(50):
            n = int(rng.integers(2, 8))
            p = rng.random(n)
            p /= p.sum()
            q = rng.random(n)
            q[rng.integers(0, n)] = 0.0
            q /= q.sum()
            v = tt.skew_kl(p, q, float(rng.uniform(0.01, 1.0)))
            assert np.isfinite(v) and v >= 0.0

    def test_invalid_distribution_rejected(self):
        with pytest.raises(FloatingPointError):
            tt.skew_kl(np.array([0.9, 0.3]), np.array([0.5, 0.5]), 0.1)
        with pytest.raises(FloatingPointError):
            tt.skew_kl(np.array([1.2, -0.2]), np.array([0.5, 0.5]), 0.1)

    def test_bad_lambda_rejected(self):
        with pytest.raises(ValueError):
            tt.skew_kl(np.array([0.5, 0.5]), np.array([0.5, 0.5]), 0.0)


def test_ops_are_deterministic():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((8, 16))
    w = rng.standard_normal((16, 8))
    a = tt.softmax(tt.matmul(TensorNode(x), TensorNode(w)), axis=-1).values
    b = tt.softmax(tt.matmul(TensorNode(x.copy()), TensorNode(w.copy())), axis=-1).values
    assert np.array_equal(a, b)
