import threading

import numpy as np
import pytest

from tcri import diff_core as dc
from tcri.diff_core import Tape, Tensor, backward

from conftest import check_grads, numeric_grad, rel_err

REPS = 20
TOL = 1e-5


def _weights(shape, seed):
    # fixed random contraction turns any output into a scalar
    return np.random.default_rng(seed).standard_normal(shape)


def _scalarize(t: Tensor, seed=99) -> Tensor:
    return dc.sum(dc.mul(t, Tensor(_weights(t.shape, seed))))


UNARY = {
    "neg": (dc.neg, lambda r: r.standard_normal((3, 4))),
    "scale": (lambda a: dc.scale(a, -1.7), lambda r: r.standard_normal((3, 4))),
    "transpose": (dc.transpose, lambda r: r.standard_normal((3, 4))),
    "reshape": (lambda a: dc.reshape(a, (4, 3)), lambda r: r.standard_normal((3, 4))),
    # keep away from the kink
    "relu": (dc.relu, lambda r: r.choice([-1, 1], (3, 4)) * r.uniform(0.1, 2.0, (3, 4))),
    "sigmoid": (dc.sigmoid, lambda r: 3 * r.standard_normal((3, 4))),
    "softplus": (dc.softplus, lambda r: 3 * r.standard_normal((3, 4))),
    "exp": (dc.exp, lambda r: r.standard_normal((3, 4))),
    "log": (dc.log, lambda r: r.uniform(0.2, 3.0, (3, 4))),
    "sqrt": (dc.sqrt, lambda r: r.uniform(0.2, 3.0, (3, 4))),
    "square": (dc.square, lambda r: r.standard_normal((3, 4))),
    "sum": (dc.sum, lambda r: r.standard_normal((3, 4))),
    "sum0": (lambda a: dc.sum(a, axis=0), lambda r: r.standard_normal((3, 4))),
    "sum1": (lambda a: dc.sum(a, axis=1), lambda r: r.standard_normal((3, 4))),
    "mean": (dc.mean, lambda r: r.standard_normal((3, 4))),
    "mean0": (lambda a: dc.mean(a, axis=0), lambda r: r.standard_normal((3, 4))),
    "take_rows": (lambda a: dc.take_rows(a, [2, 0, 2]), lambda r: r.standard_normal((3, 4))),
    "slice_cols": (lambda a: dc.slice_cols(a, 1, 3), lambda r: r.standard_normal((3, 4))),
    "getitem": (lambda a: a[1:, :2], lambda r: r.standard_normal((3, 4))),
    "l2norm": (dc.l2norm, lambda r: r.standard_normal(5)),
    "l2norm_sq": (lambda a: dc.l2norm(a, squared=True), lambda r: r.standard_normal(5)),
}

BINARY = {
    "add": (dc.add, (3, 4), (3, 4)),
    "add_bcast": (dc.add, (3, 4), (4,)),
    "sub": (dc.sub, (3, 4), (3, 4)),
    "sub_bcast": (dc.sub, (3, 4), (1, 4)),
    "mul": (dc.mul, (3, 4), (3, 4)),
    "mul_bcast": (dc.mul, (3, 4), (3, 1)),
    "div": (dc.div, (3, 4), (3, 4)),
    "matmul": (dc.matmul, (3, 4), (4, 2)),
    "matvec": (dc.matmul, (3, 4), (4,)),
    "concat0": (lambda a, b: dc.concat([a, b], axis=0), (2, 3), (4, 3)),
    "concat1": (lambda a, b: dc.concat([a, b], axis=1), (3, 2), (3, 5)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_primitive_gradients(name):
    op, gen = UNARY[name]
    for rep in range(REPS):
        r = np.random.default_rng(rep)
        x = gen(r)
        assert check_grads(lambda ts: _scalarize(op(ts[0]), rep), [x]) < TOL, (name, rep)


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_primitive_gradients(name):
    op, sa, sb = BINARY[name]
    for rep in range(REPS):
        r = np.random.default_rng(100 + rep)
        a = r.standard_normal(sa)
        b = r.standard_normal(sb)
        if op is dc.div:
            b = np.sign(b) * (0.5 + np.abs(b))
        assert check_grads(lambda ts: _scalarize(op(ts[0], ts[1]), rep), [a, b]) < TOL, (name, rep)


def test_operator_overloads_match_functions():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[0.5, -1.0], [2.0, 0.25]])
    np.testing.assert_array_equal((a + b).value, dc.add(a, b).value)
    np.testing.assert_array_equal((a - b).value, dc.sub(a, b).value)
    np.testing.assert_array_equal((a * b).value, dc.mul(a, b).value)
    np.testing.assert_array_equal((a / b).value, dc.div(a, b).value)
    np.testing.assert_array_equal((a @ b).value, dc.matmul(a, b).value)
    np.testing.assert_array_equal((2.0 - a).value, 2.0 - a.value)
    np.testing.assert_array_equal((-a).value, -a.value)
    np.testing.assert_array_equal(a.T.value, a.value.T)


def test_matmul_shape_mismatch_raises():
    with pytest.raises(dc.ShapeError):
        dc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_log_of_nonpositive_raises():
    with pytest.raises(ValueError):
        dc.log(Tensor([1.0, 0.0]))


def test_non_finite_input_rejected():
    with pytest.raises(ValueError):
        Tensor([1.0, np.nan])
    with pytest.raises(ValueError):
        Tensor([np.inf])


def test_backward_requires_scalar():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        out = w * 2.0
    with pytest.raises(dc.ShapeError):
        backward(out, tape)


def test_unused_parameter_gets_zero_gradient():
    w = Tensor([1.0, 2.0], requires_grad=True)
    v = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        loss = dc.sum(dc.square(w))
    g = backward(loss, tape, wrt=[w, v])
    np.testing.assert_array_equal(g[w], [2.0, 4.0])
    np.testing.assert_array_equal(g[v], [0.0])


def test_shared_subexpression_accumulates():
    x = Tensor(3.0, requires_grad=True)
    with Tape() as tape:
        y = x * x
        z = y + y
    assert backward(z, tape)[x] == pytest.approx(12.0)


def test_no_recording_outside_tape():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        pass
    _ = x * 3.0
    assert len(tape) == 0


def test_nested_tapes_record_innermost_only():
    x = Tensor(2.0, requires_grad=True)
    with Tape() as outer:
        with Tape() as inner:
            y = x * x
        assert len(inner) == 1
    assert len(outer) == 0
    assert backward(y, inner)[x] == pytest.approx(4.0)


def test_tapes_are_thread_local():
    counts = {}

    def work(k):
        x = Tensor(float(k), requires_grad=True)
        with Tape() as tape:
            y = x
            for _ in range(50 + k):
                y = y * 1.0
        counts[k] = len(tape)

    threads = [threading.Thread(target=work, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert counts == {k: 50 + k for k in range(4)}


def test_l2norm_subgradient_zero_at_origin():
    a = Tensor(np.zeros(3), requires_grad=True)
    with Tape() as tape:
        n = dc.l2norm(a)
    assert float(n.value) == 0.0
    np.testing.assert_array_equal(backward(n, tape)[a], np.zeros(3))


def test_custom_op_gradient():
    a = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        out = dc.custom_op(np.asarray(np.sum(a.value**3)), (a,), lambda g: (g * 3 * a.value**2,))
    np.testing.assert_allclose(backward(out, tape)[a], [3.0, 12.0])


def test_grad_of_grad_norm_matches_finite_differences():
    # ||d/dtheta mean((X w) theta - y)^2|| as a function of w
    for rep in range(REPS):
        r = np.random.default_rng(500 + rep)
        x = r.standard_normal((30, 3))
        y = r.standard_normal(30)
        w0 = r.standard_normal((3, 1))
        theta0 = r.standard_normal(1)

        def risk_for(w):
            def risk(theta):
                s = dc.reshape(dc.mul(dc.matmul(Tensor(x), w), theta), (-1,))
                return dc.mean(dc.square(dc.sub(s, y)))

            return risk

        for squared in (False, True):
            w = Tensor(w0, requires_grad=True)
            val, grads = dc.grad_of_grad_norm(risk_for(w), Tensor(theta0), [w], squared=squared)

            def norm_at(wv):
                th = Tensor(theta0, requires_grad=True)
                with Tape() as tape:
                    rsk = risk_for(Tensor(wv))(th)
                g = backward(rsk, tape)[th]
                n = float(np.sqrt(np.sum(g * g)))
                return n * n if squared else n

            assert val == pytest.approx(norm_at(w0), rel=1e-12)
            assert rel_err(grads[w], numeric_grad(norm_at, w0)) < 1e-4
