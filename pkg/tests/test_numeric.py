import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dictshot import numeric as nx
from dictshot.errors import NumericError, RankError, ShapeError

from gradcheck import numeric_grad, rel_error


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def naive_conv(x, w, b, stride, padding):
    n, c, h, wd = x.shape
    m, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, m, ho, wo))
    for s in range(n):
        for o in range(m):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[s, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[s, o, i, j] = np.sum(patch * w[o]) + b[o]
    return out


class TestMatmul:
    def test_identity(self):
        m = np.arange(9.0).reshape(3, 3)
        np.testing.assert_array_equal(nx.matmul(np.eye(3), m), m)

    def test_hand_computed(self):
        assert nx.matmul([[1.0, 2.0]], [[3.0], [4.0]]).tolist() == [[11.0]]

    def test_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
        assert np.max(np.abs(nx.matmul(a, b) - naive_matmul(a, b))) < 1e-12

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 64), st.integers(1, 64), st.integers(1, 64), st.integers(0, 2**32 - 1))
    def test_random_shapes_match_oracle(self, m, k, n, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
        assert np.max(np.abs(nx.matmul(a, b) - naive_matmul(a, b))) < 1e-12

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match="2x3.*2x3"):
            nx.matmul(np.ones((2, 3)), np.ones((2, 3)))


class TestQrAppend:
    def test_orthogonal_vector(self):
        step = nx.qr_append(np.array([[1.0], [0.0], [0.0]]), [0.0, 1.0, 0.0])
        np.testing.assert_array_equal(step.q, [0.0, 1.0, 0.0])
        np.testing.assert_array_equal(step.coeffs, [0.0])

    def test_dependent_vector_rejected(self):
        assert nx.qr_append(np.array([[1.0], [0.0], [0.0]]), [2.0, 0.0, 0.0]).q is None

    def test_gram_schmidt_by_hand(self):
        v = np.array([1.0, 1.0, 0.0]) / math.sqrt(2)
        step = nx.qr_append(np.array([[1.0], [0.0], [0.0]]), v)
        np.testing.assert_allclose(step.q, [0.0, 1.0, 0.0], atol=1e-15)
        np.testing.assert_allclose(step.coeffs, [1 / math.sqrt(2)], atol=1e-15)

    def test_reconstructs_input(self):
        rng = np.random.default_rng(1)
        basis, _ = np.linalg.qr(rng.normal(size=(7, 3)))
        v = rng.normal(size=7)
        step = nx.qr_append(basis, v)
        np.testing.assert_allclose(basis @ step.coeffs + step.residual_norm * step.q, v, atol=1e-13)
        assert np.max(np.abs(basis.T @ step.q)) < 1e-14
        assert abs(np.linalg.norm(step.q) - 1) < 1e-14

    def test_non_finite_rejected(self):
        with pytest.raises(NumericError):
            nx.qr_append(None, [1.0, np.nan])


class TestLeastSquares:
    def test_identity_dictionary(self):
        w = np.random.default_rng(2).normal(size=(4, 6))
        np.testing.assert_allclose(nx.least_squares(np.eye(4), w), w, atol=1e-14)

    def test_rank_one(self):
        w = np.outer([1.0, -2.0, 3.0], [2.0, 0.5, -1.0, 4.0])
        c = nx.least_squares(w[:, :1], w)
        assert nx.frobenius_norm(w - w[:, :1] @ c) < 1e-10

    def test_normal_equations_oracle(self):
        rng = np.random.default_rng(3)
        d, w = rng.normal(size=(6, 3)), rng.normal(size=(6, 5))
        oracle = np.linalg.inv(d.T @ d) @ d.T @ w
        assert np.max(np.abs(nx.least_squares(d, w) - oracle)) < 1e-8

    def test_residual_orthogonal_to_dictionary(self):
        rng = np.random.default_rng(4)
        d, w = rng.normal(size=(20, 7)), rng.normal(size=(20, 11))
        resid = w - d @ nx.least_squares(d, w)
        assert np.max(np.abs(d.T @ resid)) <= 1e-9 * nx.frobenius_norm(w)

    def test_rank_deficient_names_column(self):
        d = np.array([[1.0, 2.0, 0.0], [1.0, 2.0, 1.0], [0.0, 0.0, 1.0]])
        with pytest.raises(RankError) as info:
            nx.least_squares(d, np.eye(3))
        assert info.value.column == 1


def test_frobenius_norm():
    assert nx.frobenius_norm(np.zeros((3, 2))) == 0.0
    assert nx.frobenius_norm(np.eye(2)) == math.sqrt(2)
    assert nx.frobenius_norm([[3.0, 4.0]]) == 5.0


class TestConvolution:
    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (1, 2)])
    def test_forward_matches_direct_loops(self, stride, padding):
        rng = np.random.default_rng(5)
        x, w, b = rng.normal(size=(2, 3, 7, 6)), rng.normal(size=(4, 3, 3, 2)), rng.normal(size=4)
        out, _ = nx.conv2d_forward(x, w, b, stride, padding)
        np.testing.assert_allclose(out, naive_conv(x, w, b, stride, padding), atol=1e-12)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1)])
    def test_backward_finite_differences(self, stride, padding):
        rng = np.random.default_rng(6)
        x, w, b = rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        r = rng.normal(size=nx.conv2d_forward(x, w, b, stride, padding)[0].shape)

        def f():
            return float(np.sum(r * nx.conv2d_forward(x, w, b, stride, padding)[0]))

        _, cache = nx.conv2d_forward(x, w, b, stride, padding)
        gx, gw, gb = nx.conv2d_backward(r, cache)
        assert rel_error(gx, numeric_grad(f, x)) < 1e-5
        assert rel_error(gw, numeric_grad(f, w)) < 1e-5
        assert rel_error(gb, numeric_grad(f, b)) < 1e-5

    def test_maxpool_forward_and_backward(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        out, cache = nx.maxpool2d_forward(x, 2)
        np.testing.assert_array_equal(out[0, 0], [[5.0, 7.0], [13.0, 15.0]])
        dx = nx.maxpool2d_backward(np.ones_like(out), cache)
        assert dx.sum() == 4 and dx[0, 0, 1, 1] == 1 and dx[0, 0, 0, 0] == 0


class TestActivationsAndLoss:
    @pytest.mark.parametrize(
        "fn,grad",
        [
            (nx.relu, nx.relu_grad),
            (nx.leaky_relu, nx.leaky_relu_grad),
        ],
    )
    def test_activation_gradients(self, fn, grad):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(4, 5))
        x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
        r = rng.normal(size=x.shape)
        assert rel_error(grad(x, r), numeric_grad(lambda: float(np.sum(r * fn(x))), x)) <= 1e-5

    def test_softmax_gradient(self):
        rng = np.random.default_rng(8)
        z, r = rng.normal(size=(3, 6)), rng.normal(size=(3, 6))
        s = nx.softmax(z)
        analytic = s * (r - np.sum(r * s, axis=1, keepdims=True))
        assert rel_error(analytic, numeric_grad(lambda: float(np.sum(r * nx.softmax(z))), z)) <= 1e-5

    def test_cross_entropy_gradient(self):
        rng = np.random.default_rng(9)
        z, y = rng.normal(size=(5, 4)), rng.integers(0, 4, 5)
        g = nx.cross_entropy_grad(z, y)
        assert rel_error(g, numeric_grad(lambda: nx.cross_entropy(z, y), z)) <= 1e-5

    @pytest.mark.parametrize("k", [2, 3, 9, 10, 64])
    def test_uniform_logits_give_log_k(self, k):
        assert nx.cross_entropy(np.zeros((1, k)), np.array([0])) == math.log(k)
        assert nx.cross_entropy(np.full((4, k), 3.5), np.array([0, 1, 0, 1]) % k) == math.log(k)

    def test_batchnorm_gradients(self):
        rng = np.random.default_rng(10)
        x, gamma, beta = rng.normal(size=(4, 3, 2, 2)), rng.normal(size=3), rng.normal(size=3)
        r = rng.normal(size=x.shape)

        def f():
            return float(np.sum(r * nx.batchnorm_forward(x, gamma, beta)[0]))

        _, cache = nx.batchnorm_forward(x, gamma, beta)
        gx, gg, gb = nx.batchnorm_backward(r, cache)
        assert rel_error(gx, numeric_grad(f, x)) <= 1e-5
        assert rel_error(gg, numeric_grad(f, gamma)) <= 1e-5
        assert rel_error(gb, numeric_grad(f, beta)) <= 1e-5

    def test_dropout_mask_seeded(self):
        a = nx.dropout_mask((50, 4), 0.5, nx.make_rng(3))
        b = nx.dropout_mask((50, 4), 0.5, nx.make_rng(3))
        np.testing.assert_array_equal(a, b)
        assert set(np.unique(a)) <= {0.0, 2.0}


def test_matricize_round_trip_is_exact():
    t = np.random.default_rng(11).normal(size=(3, 4, 5, 2))
    back = nx.tensorize(nx.matricize(t), t.shape)
    assert back.tobytes() == t.tobytes()


def test_rng_is_pcg64_and_reproducible():
    a = nx.make_rng(123).random(5)
    b = np.random.Generator(np.random.PCG64(123)).random(5)
    np.testing.assert_array_equal(a, b)
