import numpy as np
import pytest

from lexrec import autograd as ag
from lexrec.autograd import Tensor


def _fd_check(build, params, eps=1e-6, tol=1e-7):
    """Central finite differences over every coordinate of every param."""
    loss = build()
    loss.backward()
    for p in params:
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        gflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f1 = build().item()
            flat[i] = orig - eps
            f2 = build().item()
            flat[i] = orig
            numeric = (f1 - f2) / (2 * eps)
            denom = max(abs(numeric), abs(gflat[i]), 1e-10)
            assert abs(numeric - gflat[i]) / denom < tol, (i, numeric, gflat[i])


def _randt(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


class TestElementwise:
    def test_add_mul_broadcast(self):
        rng = np.random.default_rng(0)
        a = _randt(rng, 3, 4)
        b = _randt(rng, 4)
        c = _randt(rng, 3, 1)

        def build():
            for p in (a, b, c):
                p.zero_grad()
            return ag.sum_all((a + b) * c * 0.5)

        _fd_check(build, [a, b, c])

    def test_relu(self):
        rng = np.random.default_rng(1)
        a = _randt(rng, 5, 3)

        def build():
            a.zero_grad()
            return ag.sum_all(ag.relu(a) * Tensor(rng_const))

        rng_const = np.random.default_rng(2).standard_normal((5, 3))
        _fd_check(build, [a])

    def test_sub_and_neg(self):
        rng = np.random.default_rng(5)
        a = _randt(rng, 4)
        b = _randt(rng, 4)

        def build():
            a.zero_grad()
            b.zero_grad()
            return ag.sum_all((a - b) * (-a))

        _fd_check(build, [a, b])


class TestMatmulShapes:
    def test_2d(self):
        rng = np.random.default_rng(2)
        a = _randt(rng, 3, 4)
        b = _randt(rng, 4, 2)
        w = np.random.default_rng(3).standard_normal((3, 2))

        def build():
            a.zero_grad()
            b.zero_grad()
            return ag.sum_all(ag.matmul(a, b) * Tensor(w))

        _fd_check(build, [a, b])

    def test_batched_with_broadcast(self):
        rng = np.random.default_rng(4)
        a = _randt(rng, 2, 3, 5, 4)  # (B, H, T, dh)
        b = _randt(rng, 4, 6)
        w = np.random.default_rng(5).standard_normal((2, 3, 5, 6))

        def build():
            a.zero_grad()
            b.zero_grad()
            return ag.sum_all(ag.matmul(a, b) * Tensor(w))

        _fd_check(build, [a, b])

    def test_batched_both_sides(self):
        rng = np.random.default_rng(6)
        a = _randt(rng, 2, 4, 3)
        b = _randt(rng, 2, 3, 5)
        w = np.random.default_rng(7).standard_normal((2, 4, 5))

        def build():
            a.zero_grad()
            b.zero_grad()
            return ag.sum_all(ag.matmul(a, b) * Tensor(w))

        _fd_check(build, [a, b])


class TestSoftmaxFamily:
    def test_softmax(self):
        rng = np.random.default_rng(8)
        a = _randt(rng, 3, 6)
        w = np.random.default_rng(9).standard_normal((3, 6))

        def build():
            a.zero_grad()
            return ag.sum_all(ag.softmax(a, axis=-1) * Tensor(w))

        _fd_check(build, [a])

    def test_log_softmax(self):
        rng = np.random.default_rng(10)
        a = _randt(rng, 4, 5)
        w = np.random.default_rng(11).standard_normal((4, 5))

        def build():
            a.zero_grad()
            return ag.sum_all(ag.log_softmax(a, axis=-1) * Tensor(w))

        _fd_check(build, [a])

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(12)
        s = ag.softmax(Tensor(rng.standard_normal((7, 9)) * 10), axis=-1)
        np.testing.assert_allclose(s.data.sum(axis=-1), 1.0, atol=1e-9)


class TestStructuredOps:
    def test_layer_norm(self):
        rng = np.random.default_rng(13)
        x = _randt(rng, 3, 8)
        g = Tensor(np.abs(rng.standard_normal(8)) + 0.5, requires_grad=True)
        b = _randt(rng, 8)
        w = np.random.default_rng(14).standard_normal((3, 8))

        def build():
            for p in (x, g, b):
                p.zero_grad()
            return ag.sum_all(ag.layer_norm(x, g, b) * Tensor(w))

        _fd_check(build, [x, g, b], tol=1e-6)

    def test_embedding_scatter(self):
        rng = np.random.default_rng(15)
        table = _randt(rng, 6, 4)
        ids = np.array([[0, 2], [2, 5]])
        w = np.random.default_rng(16).standard_normal((2, 2, 4))

        def build():
            table.zero_grad()
            return ag.sum_all(ag.embedding(table, ids) * Tensor(w))

        _fd_check(build, [table])
        # unused rows keep exactly zero gradient
        loss = build()
        loss.backward()
        assert np.all(table.grad[1] == 0) and np.all(table.grad[3] == 0)
        assert np.any(table.grad[2] != 0)

    def test_take_rows(self):
        rng = np.random.default_rng(17)
        t = _randt(rng, 5, 7)
        cols = np.array([0, 6, 3, 3, 1])

        def build():
            t.zero_grad()
            return ag.sum_all(ag.take_rows(t, cols))

        _fd_check(build, [t])

    def test_concat(self):
        rng = np.random.default_rng(18)
        a = _randt(rng, 2, 3)
        b = _randt(rng, 4, 3)
        w = np.random.default_rng(19).standard_normal((6, 3))

        def build():
            a.zero_grad()
            b.zero_grad()
            return ag.sum_all(ag.concat([a, b], axis=0) * Tensor(w))

        _fd_check(build, [a, b])

    def test_reshape_transpose_chain(self):
        rng = np.random.default_rng(20)
        a = _randt(rng, 2, 3, 4)
        w = np.random.default_rng(21).standard_normal((3, 8))

        def build():
            a.zero_grad()
            out = ag.reshape(ag.transpose(a, (1, 0, 2)), (3, 8))
            return ag.sum_all(out * Tensor(w))

        _fd_check(build, [a])


class TestLinearSoftmaxTextbook:
    def test_linear_softmax_cross_entropy(self):
        """Single linear layer + softmax cross-entropy, the textbook case."""
        rng = np.random.default_rng(22)
        w = _randt(rng, 6, 4)
        b = _randt(rng, 4)
        x = np.random.default_rng(23).standard_normal((8, 6))
        y = np.array([0, 1, 2, 3, 0, 1, 2, 3])

        def build():
            w.zero_grad()
            b.zero_grad()
            logits = ag.matmul(Tensor(x), w) + b
            logp = ag.log_softmax(logits, axis=-1)
            return ag.sum_all(ag.take_rows(logp, y)) * (-1.0 / len(y))

        _fd_check(build, [w, b], eps=1e-6, tol=1e-7)


class TestGraphMechanics:
    def test_no_grad_builds_no_graph(self):
        a = Tensor(np.ones((2, 2)), requires_grad=True)
        with ag.no_grad():
            out = a + 1.0
        assert not out.requires_grad
        assert out._parents == ()

    def test_grad_accumulates_across_reuse(self):
        a = Tensor(np.array([2.0]), requires_grad=True)
        out = a * 3.0 + a * 4.0
        out.backward()
        assert a.grad[0] == pytest.approx(7.0)

    def test_backward_requires_grad(self):
        with pytest.raises(RuntimeError):
            Tensor(np.ones(2)).backward()
