import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from drelu_qrnn import tensor as T
from drelu_qrnn.errors import ContractError, DimensionError

from conftest import fd_grad, rel_err, tape_grad


def naive_matmul(a, b):
    m, k = len(a), len(a[0])
    p = len(b[0])
    out = [[0.0] * p for _ in range(m)]
    for i in range(m):
        for j in range(p):
            s = 0.0
            for t in range(k):
                s += a[i][t] * b[t][j]
            out[i][j] = s
    return out


class TestMatmul:
    def test_identity(self):
        out = T.matmul(T.Variable([[1, 0], [0, 1]]), T.Variable([[3], [4]]))
        np.testing.assert_array_equal(out.value, [[3], [4]])

    def test_scalar_case(self):
        assert T.matmul(T.Variable([[2]]), T.Variable([[5]])).value.tolist() == [[10]]

    def test_against_triple_loop(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        expected = naive_matmul(a.tolist(), b.tolist())
        np.testing.assert_allclose(T.matmul(T.Variable(a), T.Variable(b)).value, expected, rtol=1e-14)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(T.Variable(np.zeros((2, 3))), T.Variable(np.zeros((2, 3))))

    def test_backward_rule(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        w = rng.normal(size=(3, 2))
        ga, gb = tape_grad(lambda x, y: T.sum_(T.matmul(x, y) * w), a, b)
        np.testing.assert_allclose(ga, w @ b.T)
        np.testing.assert_allclose(gb, a.T @ w)


class TestElementwise:
    def test_annihilator(self):
        assert (T.Variable([1, 2]) * T.Variable([0, 0])).value.tolist() == [0, 0]

    def test_add(self):
        assert (T.Variable([1, 2]) + T.Variable([3, 4])).value.tolist() == [4, 6]

    def test_sub_and_scalar(self):
        assert (1.0 - T.Variable([0.25, 1.0])).value.tolist() == [0.75, 0.0]

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.Variable([1, 2]) + T.Variable([1, 2, 3])

    def test_product_rule_matches_finite_differences(self, rng):
        a, b = rng.normal(size=5), rng.normal(size=5)
        (ga,) = tape_grad(lambda x: T.sum_(x * T.Variable(b)), a)
        np.testing.assert_allclose(ga, b)
        assert rel_err(ga, fd_grad(lambda x: float(np.sum(x * b)), a)) <= 1e-6

    def test_scalar_broadcast_gradient(self):
        ga, gk = tape_grad(lambda x, k: T.sum_(x * k), [1.0, 2.0, 3.0], [2.0])
        np.testing.assert_allclose(ga, [2, 2, 2])
        np.testing.assert_allclose(gk, [6.0])


class TestBackward:
    def test_identity_loss(self):
        x = T.parameter(3.0)
        x.backward()
        assert x.grad == 1.0

    def test_quadratic(self):
        (g,) = tape_grad(lambda x: T.sum_(x * x), [1.0, 2.0, 3.0])
        np.testing.assert_array_equal(g, [2, 4, 6])

    def test_non_scalar_loss_rejected(self):
        x = T.parameter([1.0, 2.0])
        with T.Tape() as tape:
            y = x * x
        with pytest.raises(ContractError):
            tape.backward(y)

    def test_composite_expression(self, rng):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        bias = rng.normal(size=2)

        def build(x):
            y = T.add_bias(T.matmul(x, T.Variable(b)), T.Variable(bias))
            z = T.concat([y * y, T.scale(y, 3.0)], axis=1)
            return T.mean(T.reshape(z, (-1,)) * 0.5 - 0.25)

        def oracle(x):
            y = x @ b + bias
            return float(np.mean(np.concatenate([y * y, 3 * y], axis=1) * 0.5 - 0.25))

        (g,) = tape_grad(build, a)
        assert rel_err(g, fd_grad(oracle, a)) <= 1e-6

    def test_constant_inputs_receive_nothing(self):
        c = T.Variable([1.0, 2.0])
        x = T.parameter([3.0, 4.0])
        with T.Tape() as tape:
            loss = T.sum_(c * x)
        tape.backward(loss)
        assert c.grad is None and x.grad.tolist() == [1.0, 2.0]

    def test_accumulation_doubles(self, rng):
        a = rng.normal(size=4)
        x = T.parameter(a)
        with T.Tape() as tape:
            loss = T.sum_(T.unary(x, np.sin, lambda v, y: np.cos(v)))
        tape.backward(loss)
        once = x.grad.copy()
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, 2 * once)
        x.zero_grad()
        assert x.grad is None

    def test_replay_determinism(self):
        def run():
            r = np.random.default_rng(7)
            x = T.parameter(r.normal(size=(4, 3)))
            w = T.parameter(r.normal(size=(3, 5)))
            with T.Tape() as tape:
                loss = T.softmax_cross_entropy(T.matmul(x, w), r.integers(0, 5, 4))
            tape.backward(loss)
            return loss.value.tobytes(), x.grad.tobytes(), w.grad.tobytes()

        assert run() == run()

    def test_tape_topological_order(self, rng):
        x = T.parameter(rng.normal(size=3))
        with T.Tape() as tape:
            y = x * x
            z = T.sum_(y + x)
        seen = {x.node_id}
        for rec in tape.records:
            assert all(v.node_id in seen for v in rec.inputs)
            seen.add(rec.out.node_id)
        assert tape.records[-1].out is z

    def test_no_tape_records_nothing(self):
        x = T.parameter([1.0])
        y = x * x
        assert not y.requires_grad


class TestConcat:
    def test_simple(self):
        assert T.concat([T.Variable([[1]]), T.Variable([[2]])], axis=1).value.tolist() == [[1, 2]]

    def test_round_trip(self, rng):
        parts = [rng.normal(size=(2, k)) for k in (1, 3, 2)]
        cat = T.concat([T.Variable(p) for p in parts], axis=1)
        lo = 0
        for p in parts:
            np.testing.assert_array_equal(T.slice_axis(cat, 1, lo, lo + p.shape[1]).value, p)
            lo += p.shape[1]

    def test_gradient(self, rng):
        parts = [rng.normal(size=(2, 3)) for _ in range(3)]
        w = rng.normal(size=(6, 3))
        grads = tape_grad(lambda a, b, c: T.sum_(T.concat([a, b, c], axis=0) * w), *parts)
        for k, g in enumerate(grads):
            def f(x, k=k):
                ps = list(parts)
                ps[k] = x
                return float(np.sum(np.concatenate(ps, axis=0) * w))
            assert rel_err(g, fd_grad(f, parts[k])) <= 1e-6

    def test_axis_out_of_range(self):
        with pytest.raises(ContractError):
            T.concat([T.Variable([[1.0]])], axis=2)

    def test_shape_disagreement(self):
        with pytest.raises(DimensionError):
            T.concat([T.Variable(np.zeros((2, 1))), T.Variable(np.zeros((3, 1)))], axis=1)


def naive_xent(logits, targets):
    total = 0.0
    grad = []
    for row, t in zip(logits.tolist(), targets.tolist()):
        z = [math.exp(v) for v in row]
        s = sum(z)
        total += -math.log(z[t] / s)
        grad.append([zi / s - (1.0 if j == t else 0.0) for j, zi in enumerate(z)])
    n = len(targets)
    return total / n, np.array(grad) / n


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        loss = T.softmax_cross_entropy(T.Variable(np.zeros((3, 7))), [0, 3, 6])
        assert float(loss.value) == pytest.approx(math.log(7), abs=1e-15)

    def test_saturation(self):
        logits = np.zeros((2, 4))
        logits[0, 1] = logits[1, 3] = 1e6
        assert float(T.softmax_cross_entropy(T.Variable(logits), [1, 3]).value) == pytest.approx(0.0, abs=1e-12)

    def test_against_naive_oracle(self, rng):
        logits = rng.normal(size=(4, 7))
        targets = rng.integers(0, 7, 4)
        loss, grad = naive_xent(logits, targets)
        (g,) = tape_grad(lambda z: T.softmax_cross_entropy(z, targets), logits)
        with T.Tape():
            value = float(T.softmax_cross_entropy(T.Variable(logits), targets).value)
        assert value == pytest.approx(loss, rel=1e-13)
        np.testing.assert_allclose(g, grad, rtol=1e-12, atol=1e-15)

    def test_index_out_of_range(self):
        with pytest.raises(ContractError):
            T.softmax_cross_entropy(T.Variable(np.zeros((1, 3))), [3])


class TestSequenceOps:
    def test_causal_windows_match_single_window(self, rng):
        x = T.Variable(rng.normal(size=(2, 5, 3)))
        full = T.causal_windows(x, 3)
        for t in range(5):
            np.testing.assert_array_equal(full.value[:, t], T.causal_window(x, t, 3).value)

    def test_causal_windows_gradient(self, rng):
        x0 = rng.normal(size=(2, 4, 3))
        w = rng.normal(size=(2, 4, 9))
        (g,) = tape_grad(lambda x: T.sum_(T.causal_windows(x, 3) * w), x0)

        def oracle(x):
            pad = np.concatenate([np.zeros((2, 2, 3)), x], axis=1)
            win = np.concatenate([pad[:, k:k + 4] for k in range(3)], axis=2)
            return float(np.sum(win * w))

        assert rel_err(g, fd_grad(oracle, x0)) <= 1e-6

    def test_fo_pool_matches_loop(self, rng):
        f = rng.uniform(size=(2, 6, 3))
        z = rng.normal(size=(2, 6, 3))
        c0 = rng.normal(size=(2, 3))
        out = T.fo_pool(T.Variable(f), T.Variable(z), T.Variable(c0)).value
        c = c0
        for t in range(6):
            c = c * f[:, t] + z[:, t] * (1 - f[:, t])
            np.testing.assert_array_equal(out[:, t], c)

    def test_fo_pool_gradient(self, rng):
        f0 = rng.uniform(0.1, 0.9, size=(2, 5, 3))
        z0 = rng.normal(size=(2, 5, 3))
        c00 = rng.normal(size=(2, 3))
        w = rng.normal(size=(2, 5, 3))

        def oracle_fn(f, z, c0):
            c, total = c0, 0.0
            for t in range(5):
                c = c * f[:, t] + z[:, t] * (1 - f[:, t])
                total += float(np.sum(c * w[:, t]))
            return total

        grads = tape_grad(lambda f, z, c0: T.sum_(T.fo_pool(f, z, c0) * w), f0, z0, c00)
        assert rel_err(grads[0], fd_grad(lambda f: oracle_fn(f, z0, c00), f0)) <= 1e-6
        assert rel_err(grads[1], fd_grad(lambda z: oracle_fn(f0, z, c00), z0)) <= 1e-6
        assert rel_err(grads[2], fd_grad(lambda c: oracle_fn(f0, z0, c), c00)) <= 1e-6

    def test_embedding_gradient_accumulates_repeats(self):
        table = T.parameter(np.arange(6.0).reshape(3, 2))
        with T.Tape() as tape:
            loss = T.sum_(T.embedding(table, [[0, 2, 0]]))
        tape.backward(loss)
        np.testing.assert_array_equal(table.grad, [[2, 2], [0, 0], [1, 1]])

    def test_dropout_zero_is_identity(self, rng):
        x = T.Variable(rng.normal(size=(3, 3)))
        assert T.dropout(x, 0.0, rng) is x

    def test_dropout_keeps_expectation(self, rng):
        y = T.dropout(T.Variable(np.ones(200_000)), 0.3, rng).value
        assert set(np.unique(y)) <= {0.0, 1 / 0.7}
        assert abs(y.mean() - 1.0) < 0.01


finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, 4, elements=finite), arrays(np.float64, 4, elements=finite))
def test_elementwise_ops_gradients_property(a, b):
    for op, oracle in ((T.add, np.add), (T.sub, np.subtract), (T.mul, np.multiply)):
        w = np.array([0.3, -1.2, 0.7, 2.0])
        ga, gb = tape_grad(lambda x, y: T.sum_(op(x, y) * w), a, b)
        # ops are linear per argument, so the only FD error is roundoff of about ulp(|f|) / h
        np.testing.assert_allclose(ga, fd_grad(lambda x: float(np.sum(oracle(x, b) * w)), a), rtol=1e-6, atol=1e-7)
        np.testing.assert_allclose(gb, fd_grad(lambda y: float(np.sum(oracle(a, y) * w)), b), rtol=1e-6, atol=1e-7)
