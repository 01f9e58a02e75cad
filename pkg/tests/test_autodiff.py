"""Gradient engine checks against central finite differences."""

import numpy as np
import pytest
from scipy.linalg import lu_factor

from birlwalk import autodiff as ad
from birlwalk.autodiff import NonFiniteError, value_and_grad


def central_difference(f, theta, h=1e-6):
    theta = np.asarray(theta, dtype=float)
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        up, down = theta.copy(), theta.copy()
        up[i] += h
        down[i] -= h
        grad[i] = (f(up) - f(down)) / (2 * h)
    return grad


def check_gradient(expr, theta, h=1e-6, rtol=1e-6):
    value, grad = value_and_grad(expr, theta)
    fd = central_difference(lambda t: value_and_grad(expr, t)[0], theta, h=h)
    scale = np.maximum(np.abs(fd), 1e-8)
    assert np.max(np.abs(grad - fd) / scale) < rtol, (grad, fd)
    return value, grad


class TestBasicExamples:
    def test_dot_with_itself(self):
        value, grad = value_and_grad(lambda x: ad.dot(x, x),
                                     np.array([1.0, 2.0]))
        assert value == 5.0
        np.testing.assert_allclose(grad, [2.0, 4.0])

    def test_logsumexp_symmetry(self):
        value, grad = value_and_grad(lambda x: ad.logsumexp(x),
                                     np.array([0.0, 0.0]))
        assert value == pytest.approx(np.log(2.0))
        np.testing.assert_allclose(grad, [0.5, 0.5])

    def test_gradient_length_matches_theta(self):
        theta = np.arange(7, dtype=float)
        _, grad = value_and_grad(lambda x: ad.vsum(ad.mul(x, x)), theta)
        assert grad.shape == theta.shape


class TestPrimitiveGradients:
    """Every primitive against central differences on random inputs."""

    rng = np.random.default_rng(20240817)

    def random_theta(self, n=6):
        # inputs in [-2, 2], kept away from elu/max kinks by construction
        theta = self.rng.uniform(-2.0, 2.0, size=n)
        theta[np.abs(theta) < 1e-3] = 0.5
        return theta

    def test_add_sub_mul_div(self):
        c = self.rng.uniform(0.5, 1.5, size=6)

        def expr(x):
            y = ad.add(x, c)
            y = ad.sub(y, 0.3)
            y = ad.mul(y, x)
            y = ad.div(y, ad.add(ad.mul(x, x), 1.0))
            return ad.vsum(y)

        check_gradient(expr, self.random_theta())

    def test_broadcasting_add_mul(self):
        def expr(x):
            m = ad.reshape(x, (2, 3))
            col = ad.reshape(ad.gather(x, np.array([0, 3])), (2, 1))
            return ad.vsum(ad.mul(m, col) + ad.mul(0.5, m))

        check_gradient(expr, self.random_theta())

    def test_matvec_and_matmul(self):
        a = self.rng.standard_normal((4, 6))
        b = self.rng.standard_normal((3, 2))

        def expr(x):
            v = ad.matvec(a, x)
            m = ad.matmul(b, ad.reshape(ad.gather(x, np.arange(4)), (2, 2)))
            return ad.vsum(v) + ad.vsum(m) + ad.dot(v, v)

        check_gradient(expr, self.random_theta())

    def test_matvec_gradient_wrt_matrix(self):
        v = self.rng.standard_normal(3)

        def expr(x):
            m = ad.reshape(x, (2, 3))
            return ad.vsum(ad.matvec(m, v))

        check_gradient(expr, self.random_theta())

    def test_reductions_and_nonlinear(self):
        def expr(x):
            m = ad.reshape(x, (2, 3))
            pieces = [ad.vsum(ad.exp(ad.mul(0.3, x))),
                      ad.vsum(ad.log(ad.add(ad.mul(x, x), 1.5))),
                      ad.vsum(ad.tanh(x)),
                      ad.vsum(ad.elu(x)),
                      ad.vsum(ad.logsumexp(m, axis=-1)),
                      ad.vsum(ad.vmax(m, axis=-1))]
            total = pieces[0]
            for p in pieces[1:]:
                total = total + p
            return total

        check_gradient(expr, self.random_theta())

    def test_gather_accumulates_duplicates(self):
        idx = np.array([0, 2, 2, 1])

        def expr(x):
            return ad.vsum(ad.mul(ad.gather(x, idx),
                                  np.array([1.0, 2.0, 3.0, 4.0])))

        _, grad = value_and_grad(expr, np.array([1.0, 1.0, 1.0]))
        np.testing.assert_allclose(grad, [1.0, 4.0, 5.0])

    def test_logdet_shrink(self):
        def expr(x):
            p = ad.reshape(ad.exp(ad.mul(0.2, x)), (2, 2))
            row_sums = ad.reshape(ad.vsum(p, axis=1), (2, 1))
            return ad.logdet_shrink(ad.div(p, row_sums), 0.9)

        check_gradient(expr, self.random_theta(4), rtol=1e-5)

    def test_solve_fixed(self):
        a = np.array([[2.0, 0.3], [0.1, 1.5]])
        lu = lu_factor(a)

        def expr(x):
            sol = ad.solve_fixed(lu, x)
            return ad.dot(sol, sol)

        check_gradient(expr, np.array([0.7, -1.2]))


class TestStopGradient:
    def test_one_factor_detached(self):
        value, grad = value_and_grad(
            lambda x: ad.vsum(ad.mul(ad.stop_gradient(x), x)),
            np.array([3.0]))
        assert value == 9.0
        np.testing.assert_allclose(grad, [3.0])

    def test_detached_constant_gives_zero(self):
        value, grad = value_and_grad(
            lambda x: ad.vsum(ad.stop_gradient(ad.mul(x, x))),
            np.array([2.0, -1.0]))
        assert value == 5.0
        np.testing.assert_allclose(grad, [0.0, 0.0])

    def test_forward_value_unchanged(self):
        theta = np.array([1.5, -0.5])
        v1, _ = value_and_grad(lambda x: ad.vsum(ad.mul(x, x)), theta)
        v2, _ = value_and_grad(
            lambda x: ad.vsum(ad.stop_gradient(ad.mul(x, x))), theta)
        assert v1 == v2


class TestErrors:
    def test_nonfinite_forward_raises_with_op(self):
        with pytest.raises(NonFiniteError) as err:
            value_and_grad(lambda x: ad.vsum(ad.log(x)), np.array([-1.0, 2.0]))
        assert err.value.op == "log"

    def test_nonfinite_leaf_rejected(self):
        with pytest.raises(NonFiniteError):
            ad.Tape().leaf(np.array([np.nan]))

    def test_mixed_tapes_rejected(self):
        x = ad.Tape().leaf(np.ones(2))
        y = ad.Tape().leaf(np.ones(2))
        with pytest.raises(ValueError):
            ad.add(x, y)

    def test_nonscalar_root_rejected(self):
        tape = ad.Tape()
        x = tape.leaf(np.ones(3))
        y = ad.mul(x, 2.0)
        with pytest.raises(ValueError):
            tape.gradient(y, x)


class TestTapeReuse:
    def test_two_tape_builds_differ_only_by_detached_term(self):
        """Detaching a term changes the gradient but not the structure."""
        theta = np.array([0.4, -0.8, 1.1])

        def with_det(x):
            extra = ad.vsum(ad.tanh(x))
            return ad.dot(x, x) + extra

        def detached(x):
            extra = ad.stop_gradient(ad.vsum(ad.tanh(x)))
            return ad.dot(x, x) + extra

        v1, g1 = value_and_grad(with_det, theta)
        v2, g2 = value_and_grad(detached, theta)
        assert v1 == pytest.approx(v2)
        base = 2 * theta
        np.testing.assert_allclose(g2, base)
        assert np.max(np.abs(g1 - base)) > 1e-3
