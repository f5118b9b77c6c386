import math

import numpy as np
import pytest

from tnmera import autodiff
from tnmera.autodiff import (
    SGD,
    Adam,
    Step,
    Tape,
    backward,
    batch_softmax_cross_entropy,
    evaluate,
    record_forward,
    sgd_step,
    softmax,
    softmax_cross_entropy,
    tree_reduce,
)
from tnmera.tensor import TensorError, rng_stream


def test_single_contract_tape():
    sched = [Step("contract", "y", ("A", "x"), pairs=((1, 0),))]
    x = np.array([1.0, 2.0, 3.0])
    tape, out = record_forward({"A": np.eye(3)}, {"x": x}, sched)
    assert len(tape) == 1
    np.testing.assert_array_equal(out, x)
    assert np.array_equal(tape.replay(), tape.replay())


def test_matrix_vector_vjp():
    rng = rng_stream(0, "mv")
    a, x, g = rng.standard_normal((3, 4)), rng.standard_normal(4), rng.standard_normal(3)
    tape = Tape()
    ia, ix = tape.param("A", a), tape.param("x", x)
    tape.contract(ia, ix, [(1, 0)])
    grads = backward(tape, g)
    np.testing.assert_allclose(grads["A"], np.outer(g, x), rtol=1e-14)
    np.testing.assert_allclose(grads["x"], a.T @ g, rtol=1e-14)


def test_sum_of_matvec():
    tape = Tape()
    iw = tape.param("W", np.arange(6.0).reshape(2, 3))
    tape.contract(iw, tape.input("x", np.ones(3)), [(1, 0)])
    grads = backward(tape, np.ones(2))
    np.testing.assert_array_equal(grads["W"], np.ones((2, 3)))
    assert "x" not in grads


def test_seed_shape_checked():
    tape = Tape()
    tape.contract(tape.param("A", np.eye(2)), tape.input("x", np.ones(2)), [(1, 0)])
    with pytest.raises(TensorError):
        backward(tape, np.ones(3))


def test_undeclared_schedule_name():
    with pytest.raises(TensorError):
        record_forward({}, {"x": np.ones(2)}, [Step("contract", "y", ("A", "x"), pairs=((0, 0),))])


def _random_graph_fd(tape, params, seed, h=1e-6):
    """Central differences of <seed, output> for every parameter entry."""
    out = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            q = p.copy()
            q[idx] += h
            fp = np.sum(seed * tape.replay({name: q}))
            q[idx] -= 2 * h
            fm = np.sum(seed * tape.replay({name: q}))
            g[idx] = (fp - fm) / (2 * h)
        tape.replay({name: p})
        out[name] = g
    return out


def test_vjp_with_batch_permute_and_reshape():
    rng = rng_stream(1, "graph")
    params = {"U": rng.standard_normal((3, 2, 4)), "V": rng.standard_normal((4, 5))}
    x = rng.standard_normal((6, 3))
    tape = Tape()
    iu, iv, ix = tape.param("U", params["U"]), tape.param("V", params["V"]), tape.input("x", x)
    t = tape.contract(ix, iu, [(1, 0)])            # (6, 2, 4)
    t = tape.contract(t, iv, [(2, 0)])             # (6, 2, 5)
    t = tape.permute(t, [0, 2, 1])                 # (6, 5, 2)
    t = tape.reshape(t, [6, 10])
    t2 = tape.contract(ix, iu, [(1, 0)])           # reuse U: weights shared
    tape.contract(t, tape.reshape(t2, [6, 8]), [], batch=[(0, 0)])
    seed = rng.standard_normal(tape.output.shape)
    grads = backward(tape, seed, include_inputs=True)
    fd = _random_graph_fd(tape, params, seed)
    for name in params:
        np.testing.assert_allclose(grads[name], fd[name], rtol=1e-6, atol=1e-8)
    assert grads["x"].shape == x.shape


def test_backward_linear_in_seed():
    rng = rng_stream(2, "lin")
    tape = Tape()
    ia = tape.param("A", rng.standard_normal((4, 3)))
    tape.contract(ia, tape.input("x", rng.standard_normal((5, 3))), [(1, 1)])
    g = rng.standard_normal((4, 5))
    g1 = backward(tape, g)["A"]
    g2 = backward(tape, 3.5 * g)["A"]
    np.testing.assert_allclose(g2, 3.5 * g1, rtol=1e-12)


def test_evaluate_matches_record_bitwise():
    rng = rng_stream(3, "eval")
    params = {"A": rng.standard_normal((3, 4)), "B": rng.standard_normal((4, 2))}
    sched = [Step("contract", "t", ("A", "B"), pairs=((1, 0),)), Step("permute", "o", ("t",), perm=(1, 0))]
    _, out = record_forward(params, {}, sched)
    assert np.array_equal(out, evaluate(params, {}, sched))


def test_softmax_cross_entropy_values():
    loss, g = softmax_cross_entropy(np.zeros(10), 3)
    assert loss == pytest.approx(math.log(10), abs=1e-12)
    want = np.full(10, 0.1)
    want[3] -= 1
    np.testing.assert_allclose(g, want, atol=1e-15)
    loss, g = softmax_cross_entropy(np.array([1000.0, 0.0]), 0)
    assert loss == pytest.approx(0.0, abs=1e-12) and np.all(np.isfinite(g))
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.zeros(3), 3)
    with pytest.raises(FloatingPointError):
        softmax_cross_entropy(np.array([np.nan, 0.0]), 0)


def test_softmax_cross_entropy_fd():
    rng = rng_stream(4, "ce")
    for trial in range(5):
        z = rng.standard_normal(6)
        label = int(rng.integers(6))
        _, g = softmax_cross_entropy(z, label)
        h = 1e-5
        for k in range(6):
            e = np.zeros(6)
            e[k] = h
            fd = (softmax_cross_entropy(z + e, label)[0] - softmax_cross_entropy(z - e, label)[0]) / (2 * h)
            assert abs(fd - g[k]) <= 1e-8
        assert abs(g.sum()) <= 1e-12
        assert abs(softmax(z).sum() - 1) <= 1e-12


def test_batch_loss_is_mean():
    rng = rng_stream(5, "batch-ce")
    z = rng.standard_normal((4, 3))
    labels = np.array([0, 2, 1, 1])
    loss, g = batch_softmax_cross_entropy(z, labels)
    per = [softmax_cross_entropy(z[i], labels[i]) for i in range(4)]
    assert loss == pytest.approx(np.mean([p[0] for p in per]), rel=1e-14)
    np.testing.assert_allclose(g, np.stack([p[1] for p in per]) / 4, rtol=1e-14)
    assert loss >= 0


def test_sgd_step_examples():
    p = {"t": np.array([1.0])}
    assert sgd_step(p, {"t": np.array([2.0])}, 0.5)["t"][0] == 0.0
    assert sgd_step(p, {"t": np.array([2.0])}, 0.0)["t"][0] == 1.0
    with pytest.raises(ValueError):
        sgd_step(p, {"t": np.ones(2)}, 0.1)


def test_sgd_skips_non_finite(caplog):
    p = {"t": np.array([1.0])}
    out = sgd_step(p, {"t": np.array([np.inf])}, 0.1)
    assert out["t"][0] == 1.0
    assert "non-finite" in caplog.text


def test_quadratic_bowl():
    theta = {"t": np.array([1.0])}
    opt = SGD(0.1)
    for _ in range(50):
        theta = opt.step(theta, {"t": 2 * theta["t"]})
    assert abs(theta["t"][0]) < 1e-4
    assert theta["t"][0] == pytest.approx(0.8 ** 50, rel=1e-12)


def test_adam_descends():
    theta = {"t": np.array([3.0, -2.0])}
    opt = Adam(0.1)
    for _ in range(300):
        theta = opt.step(theta, {"t": 2 * theta["t"]})
    assert np.all(np.abs(theta["t"]) < 0.05)


def test_tree_reduce_order_fixed():
    rng = rng_stream(6, "tree")
    sets = [{"a": rng.standard_normal(3)} for _ in range(7)]
    r1 = tree_reduce(sets)["a"]
    r2 = tree_reduce(list(sets))["a"]
    assert np.array_equal(r1, r2)
    np.testing.assert_allclose(r1, sum(s["a"] for s in sets), rtol=1e-14)


def test_vjp_override_hook():
    tape = Tape()
    tape.contract(tape.param("A", np.eye(2)), tape.input("x", np.ones(2)), [(1, 0)])
    autodiff.VJP_OVERRIDES["contract"] = lambda g, node, tape: (np.zeros((2, 2)), np.zeros(2))
    try:
        assert not backward(tape, np.ones(2))["A"].any()
    finally:
        autodiff.VJP_OVERRIDES.clear()
    assert backward(tape, np.ones(2))["A"].any()
