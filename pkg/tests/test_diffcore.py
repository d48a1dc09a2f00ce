import threading

import numpy as np
import pytest

from riga import diffcore as dc
from riga.diffcore import Parameter, Tensor
from riga.errors import DomainError, InvalidInputError, ShapeError


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        o = flat[k]
        flat[k] = o + h
        fp = f()
        flat[k] = o - h
        fm = f()
        flat[k] = o
        gf[k] = (fp - fm) / (2 * h)
    return g


def check(build, *shapes, seed=0, rtol=1e-5, positive=False):
    """Compare backward() against central differences for ``sum(w * build(*params))``."""
    rng = np.random.default_rng(seed)
    params = [Parameter(rng.uniform(0.5, 2.0, s) if positive else rng.normal(size=s), f"p{i}")
              for i, s in enumerate(shapes)]
    out0 = build(*params)
    w = Tensor(rng.normal(size=out0.shape))

    def loss():
        return dc.sum(dc.mul(build(*params), w))

    dc.backward(loss())
    for p in params:
        num = numeric_grad(lambda: loss().item(), p.data)
        np.testing.assert_allclose(p.grad, num, rtol=rtol, atol=1e-7)


class TestPrimitives:
    def test_relu(self):
        np.testing.assert_array_equal(dc.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_softmax_singleton(self):
        np.testing.assert_array_equal(dc.softmax_lastdim(Tensor([[3.7]])).data, [[1.0]])

    def test_matmul_identity(self):
        out = dc.matmul(Tensor(np.eye(2)), Tensor([[3.0, 4.0], [5.0, 6.0]]))
        np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])

    def test_softmax_normalised(self, rng):
        y = dc.softmax_lastdim(Tensor(50 * rng.normal(size=(7, 9)))).data
        assert np.all(y >= 0)
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            dc.add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))
        with pytest.raises(ShapeError):
            dc.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_log_domain(self):
        with pytest.raises(DomainError):
            dc.log(Tensor([1.0, 0.0]))

    def test_rejects_non_finite(self):
        with pytest.raises(InvalidInputError):
            Tensor([np.nan])

    def test_max_over_set_ties_route_to_first(self):
        p = Parameter(np.array([[[1.0], [1.0], [0.0]]]), "p")
        dc.backward(dc.sum(dc.max_over_set(p)))
        np.testing.assert_array_equal(p.grad.ravel(), [1.0, 0.0, 0.0])

    def test_max_over_set_mask(self):
        x = Tensor(np.array([[[5.0], [1.0]]]))
        assert dc.max_over_set(x, np.array([[False, True]])).data.item() == 1.0


class TestGradients:
    def test_elementwise(self):
        check(lambda a, b: dc.mul(dc.add(a, b), dc.sub(a, b)), (3, 4), (3, 4))
        check(lambda a: dc.exp(a), (5,))
        check(lambda a: dc.log(a), (5,), positive=True)
        check(lambda a: dc.softplus(dc.mul_scalar(a, 3.0)), (6,))
        check(lambda a: dc.neg(a) + 2.0, (2, 2))

    def test_relu_away_from_kink(self):
        check(lambda a: dc.relu(a), (20,), positive=True)

    def test_linear_algebra(self):
        check(lambda a, b: dc.matmul(a, b), (3, 4), (4, 2))
        check(lambda a, b: dc.matmul(a, b), (2, 3, 4), (2, 4, 5))
        check(lambda a, b: dc.add_bias(a, b), (4, 3), (3,))

    def test_shape_ops(self):
        check(lambda a: dc.reshape(a, (6, 2)), (3, 4))
        check(lambda a: dc.transpose(a, (2, 0, 1)), (2, 3, 4))
        check(lambda a, b: dc.concat_lastdim([a, b]), (3, 2), (3, 5))
        check(lambda a: dc.take(a, [0, 2, 2, 1], axis=1), (3, 4))
        check(lambda a: dc.gather(a, [0, 5, 5, 11]), (3, 4))

    def test_reductions(self):
        check(lambda a: dc.sum(a, axis=1), (3, 4))
        check(lambda a: dc.mean(a), (3, 4))
        check(lambda a: dc.softmax_lastdim(a), (3, 5))
        check(lambda a: dc.max_over_set(a), (2, 4, 3))
        mask = np.array([[True, False, True], [False, True, True]])
        check(lambda a: dc.masked_logsumexp(a, mask), (2, 3))

    def test_pairwise_distance(self):
        check(lambda a, b: dc.pairwise_distance(a, b), (4, 3), (5, 3))

    def test_log_sinkhorn(self):
        rng = np.random.default_rng(1)
        log_a = np.log(rng.uniform(0.5, 1.5, size=(2, 4)))
        log_b = np.log(rng.uniform(0.5, 1.5, size=(2, 5)))
        log_b += (np.log(np.exp(log_a).sum(1)) - np.log(np.exp(log_b).sum(1)))[:, None]
        check(lambda L: dc.log_sinkhorn(L, log_a, log_b, 20), (2, 4, 5))


class TestBackward:
    def test_sum_gives_ones(self):
        p = Parameter(np.zeros(4), "p")
        dc.backward(dc.sum(p))
        np.testing.assert_array_equal(p.grad, np.ones(4))

    def test_relu_gradient(self):
        p = Parameter(np.array([-1.0, 2.0]), "p")
        dc.backward(dc.sum(dc.relu(p)))
        np.testing.assert_array_equal(p.grad, [0.0, 1.0])

    def test_accumulates(self):
        p = Parameter(np.ones(3), "p")
        dc.backward(dc.sum(p))
        dc.backward(dc.sum(p))
        np.testing.assert_array_equal(p.grad, 2 * np.ones(3))

    def test_non_scalar(self):
        with pytest.raises(InvalidInputError):
            dc.backward(Parameter(np.ones(3), "p") * 2.0)

    def test_no_grad_records_nothing(self):
        p = Parameter(np.ones(3), "p")
        with dc.no_grad():
            y = dc.sum(p)
        assert not y.requires_grad

    def test_no_grad_is_thread_local(self):
        seen = []
        with dc.no_grad():
            t = threading.Thread(target=lambda: seen.append(dc.is_grad_enabled()))
            t.start()
            t.join()
        assert seen == [True]


class TestGradientCheck:
    def test_quadratic(self, rng):
        p = Parameter(rng.normal(size=(4, 3)), "p")
        err = dc.gradient_check(lambda: dc.mul_scalar(dc.sum(dc.mul(p, p)), 0.5), [p])
        assert err < 1e-9

    def test_relu_nudged_away_from_kinks(self, rng):
        data = rng.normal(size=20)
        data[np.abs(data) < 1e-2] = 0.1  # keep every entry well clear of zero
        p = Parameter(data, "p")
        assert dc.gradient_check(lambda: dc.sum(dc.mul(dc.relu(p), dc.relu(p))), [p]) < 1e-6

    def test_detects_wrong_gradient(self):
        p = Parameter(np.array([1.0, 2.0]), "p")

        def broken():
            out = dc.sum(p)
            out._backward = lambda g: (3 * np.ones(2),)
            return out

        # analytic 3 against numeric 1, scaled by max(1, |analytic|)
        assert dc.gradient_check(broken, [p]) == pytest.approx(2.0 / 3.0, abs=1e-9)
