"""Tape mechanics, per-op gradients, and the parameter store."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from structran import autodiff as ad
from structran import oracles


def fd_check(build, arrays, tol=1e-5, step=1e-6):
    """Compare tape gradients of build(nodes) against central differences."""
    nodes = [ad.parameter(a.copy()) for a in arrays]
    root = build(nodes)
    ad.backward(root)
    analytic = [n.grad if n.grad is not None else np.zeros_like(n.value)
                for n in nodes]
    fd_arrays = [a.copy() for a in arrays]

    def f():
        return float(build([ad.constant(a) for a in fd_arrays]).value)

    numeric = oracles.finite_difference_grad(f, fd_arrays, step)
    assert oracles.max_relative_error(analytic, numeric) <= tol


class TestForwardValues:
    def test_softmax_symmetry(self):
        out = ad.softmax(ad.constant(np.array([0.0, 0.0])), tau=1.0)
        np.testing.assert_allclose(out.value, [0.5, 0.5])

    def test_log_sum_exp_identity(self):
        x = ad.constant(np.log(np.array([0.25, 0.25])))
        assert ad.log_sum_exp(x).value == pytest.approx(math.log(0.5))

    def test_softmax_temperature_sharpens(self):
        logits = ad.constant(np.array([1.0, 0.0]))
        hot = ad.softmax(logits, tau=0.1).value
        warm = ad.softmax(logits, tau=2.0).value
        assert hot[0] > warm[0]
        np.testing.assert_allclose(hot.sum(), 1.0)

    def test_log_sum_exp_survives_extreme_inputs(self):
        x = ad.constant(np.array([-1e4, 1e4]))
        out = ad.log_sum_exp(x)
        assert np.isfinite(out.value)
        assert out.value == pytest.approx(1e4)

    def test_matmul_shapes(self):
        a = np.arange(6.0).reshape(2, 3)
        b = np.arange(12.0).reshape(3, 4)
        v = np.arange(3.0)
        np.testing.assert_allclose(ad.matmul(ad.constant(a), ad.constant(b)).value, a @ b)
        np.testing.assert_allclose(ad.matmul(ad.constant(a), ad.constant(v)).value, a @ v)
        np.testing.assert_allclose(ad.matmul(ad.constant(v), ad.constant(v)).value, v @ v)

    def test_lstm_cell_matches_direct_formula(self):
        rng = np.random.default_rng(3)
        h = 4
        z = rng.normal(size=4 * h)
        c_prev = rng.normal(size=h)
        packed = ad.lstm_cell(ad.constant(z), ad.constant(c_prev)).value

        def sig(x):
            return 1.0 / (1.0 + np.exp(-x))

        i, f, g, o = z[:h], z[h:2 * h], z[2 * h:3 * h], z[3 * h:]
        c = sig(f) * c_prev + sig(i) * np.tanh(g)
        np.testing.assert_allclose(packed[h:], c, atol=1e-12)
        np.testing.assert_allclose(packed[:h], sig(o) * np.tanh(c), atol=1e-12)


class TestBackward:
    def test_quadratic_gradient(self):
        x = ad.parameter(np.array([1.0, 2.0, 3.0]))
        ad.backward(ad.sum_(ad.mul(x, x)))
        np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])

    def test_constant_root_leaves_gradients_unset(self):
        w = ad.parameter(np.array(3.0))
        root = ad.constant(np.array(5.0))
        ad.backward(root)
        assert w.grad is None

    def test_product_gradient(self):
        w = ad.parameter(np.array(3.0))
        x = ad.constant(np.array(2.0))
        ad.backward(ad.mul(w, x))
        assert w.grad == pytest.approx(2.0)

    def test_backward_requires_scalar_root(self):
        x = ad.parameter(np.ones(3))
        with pytest.raises(ad.UsageError):
            ad.backward(ad.mul(x, x))

    def test_gradient_accumulates_across_reuse(self):
        # x appears twice; both paths must contribute
        x = ad.parameter(np.array(2.0))
        ad.backward(ad.add(ad.mul(x, x), x))
        assert x.grad == pytest.approx(5.0)

    def test_composite_mlp_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        w1 = rng.normal(size=(4, 3)) * 0.5
        b1 = rng.normal(size=4) * 0.1
        w2 = rng.normal(size=4) * 0.5
        x = rng.normal(size=3)

        def build(nodes):
            nw1, nb1, nw2, nx = nodes
            hidden = ad.tanh(ad.add(ad.matmul(nw1, nx), nb1))
            return ad.sum_(ad.mul(nw2, hidden))

        fd_check(build, [w1, b1, w2, x], tol=1e-5)

    def test_no_grad_suppresses_tape(self):
        x = ad.parameter(np.ones(2))
        with ad.no_grad():
            y = ad.sum_(ad.mul(x, x))
        assert not y.requires_grad

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_broadcast_add_gradient_shape(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4,))
        na, nb = ad.parameter(a), ad.parameter(b)
        ad.backward(ad.sum_(ad.add(na, nb)))
        assert na.grad.shape == a.shape
        assert nb.grad.shape == b.shape
        np.testing.assert_allclose(nb.grad, np.full(4, 3.0))


class TestPerOpGradients:
    """Each op against central differences on a scalarized output."""

    @pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
    def test_broadcast_arithmetic(self, op):
        rng = np.random.default_rng(hash(op) % 2 ** 32)
        a = rng.normal(size=(2, 3))
        b = rng.normal(size=(3,)) + 3.0  # keep divisors away from zero
        w = rng.normal(size=(2, 3))
        fn = getattr(ad, op)
        fd_check(lambda ns: ad.sum_(ad.mul(fn(ns[0], ns[1]), ad.constant(w))), [a, b])

    def test_slice_negative_step(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(5, 3))
        w = rng.normal(size=(5, 3))
        fd_check(lambda ns: ad.sum_(ad.mul(ad.slice_(ns[0], slice(None, None, -1)),
                                           ad.constant(w))), [a])

    def test_gather_repeated_indices_accumulate(self):
        a = ad.parameter(np.array([1.0, 2.0]))
        ad.backward(ad.sum_(ad.gather(a, np.array([0, 0, 1]))))
        np.testing.assert_allclose(a.grad, [2.0, 1.0])

    def test_gather_range_check(self):
        a = ad.constant(np.zeros(3))
        with pytest.raises(ad.DomainError, match="gather"):
            ad.gather(a, np.array([0, 3]))

    def test_log_domain_check(self):
        with pytest.raises(ad.DomainError, match="log"):
            ad.log(ad.constant(np.array([1.0, 0.0])))

    def test_softmax_temperature_check(self):
        with pytest.raises(ad.DomainError):
            ad.softmax(ad.constant(np.zeros(2)), tau=0.0)

    def test_concat_and_stack_gradients(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(2, 3))
        b = rng.normal(size=(2, 3))
        w = rng.normal(size=(4, 3))
        fd_check(lambda ns: ad.sum_(ad.mul(ad.concat(ns, axis=0), ad.constant(w))), [a, b])
        w2 = rng.normal(size=(2, 2, 3))
        fd_check(lambda ns: ad.sum_(ad.mul(ad.stack(ns, axis=0), ad.constant(w2))), [a, b])

    def test_shape_mismatch_detected(self):
        a = ad.constant(np.zeros((2, 3)))
        b = ad.constant(np.zeros((4, 2)))
        with pytest.raises(ad.ShapeError):
            ad.add(a, b)
        with pytest.raises(ad.ShapeError):
            ad.matmul(a, b)
        with pytest.raises(ad.ShapeError):
            ad.concat([a, b], axis=0)


class TestParameterStore:
    def _store(self):
        store = ad.ParameterStore()
        rng = np.random.default_rng(7)
        store.add("layer.w", rng.normal(size=(3, 2)))
        store.add("layer.b", rng.normal(size=3))
        return store

    def test_round_trip(self, tmp_path):
        store = self._store()
        path = tmp_path / "model.ckpt"
        store.save(path)
        before = store.state_arrays()
        for node in (store["layer.w"], store["layer.b"]):
            node.value[...] = 0.0
        store.restore(path)
        for name, arr in before.items():
            np.testing.assert_array_equal(store[name].value, arr)

    def test_duplicate_name_rejected(self):
        store = self._store()
        with pytest.raises(ad.UsageError, match="duplicate"):
            store.add("layer.w", np.zeros(1))

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ad.UsageError, match="magic"):
            self._store().restore(path)

    def test_name_mismatch_rejected(self, tmp_path):
        store = self._store()
        path = tmp_path / "model.ckpt"
        store.save(path)
        other = ad.ParameterStore()
        other.add("different", np.zeros(2))
        with pytest.raises(ad.UsageError):
            other.restore(path)

    def test_state_arrays_are_copies(self):
        store = self._store()
        snap = store.state_arrays()
        snap["layer.b"][...] = 99.0
        assert not np.any(store["layer.b"].value == 99.0)

    def test_global_grad_norm(self):
        store = self._store()
        store["layer.b"].grad = np.array([3.0, 4.0, 0.0])
        assert ad.global_grad_norm(store) == pytest.approx(5.0)
