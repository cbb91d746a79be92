import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ptsr import diff as D
from ptsr import specfn
from ptsr.errors import DomainError, GraphError, VerificationError


def grad_of(fn, **values):
    tape = D.Tape()
    leaves = {k: tape.leaf(np.asarray(v, float), k) for k, v in values.items()}
    out = fn(**leaves)
    return out, D.backward(tape, out)


def test_square_derivative():
    _, g = grad_of(lambda x: x * x, x=3.0)
    assert g["x"] == pytest.approx(6.0)


def test_lgamma_gradient_is_digamma():
    _, g = grad_of(lambda x: D.lgamma(x), x=2.0)
    assert g["x"] == pytest.approx(specfn.digamma(2.0), abs=1e-15)


def test_softmax_sum_has_zero_gradient():
    _, g = grad_of(lambda v: D.sum(D.softmax(v)), v=[0.3, -1.0, 2.5, 0.0])
    assert np.all(np.abs(g["v"]) < 1e-12)


def test_identity_and_log_sigmoid_seeds():
    _, g = grad_of(lambda x: x, x=1.7)
    assert g["x"] == 1.0
    _, g = grad_of(lambda x: D.log_sigmoid(x), x=0.0)
    assert g["x"] == pytest.approx(0.5, abs=1e-15)


def test_backward_rejects_foreign_or_non_scalar_seed():
    tape, other = D.Tape(), D.Tape()
    x = tape.leaf(np.ones(3), "x")
    y = other.leaf(np.ones(1), "y")
    with pytest.raises(GraphError):
        D.backward(tape, D.sum(y))
    with pytest.raises(GraphError):
        D.backward(tape, x * 2.0)
    with pytest.raises(GraphError):
        D.backward(tape, D.constant(1.0))


def test_mixing_tapes_is_an_error():
    a = D.Tape().leaf(np.ones(2), "a")
    b = D.Tape().leaf(np.ones(2), "b")
    with pytest.raises(GraphError):
        a + b


def test_shape_mismatch_is_graph_error():
    tape = D.Tape()
    with pytest.raises(GraphError):
        tape.leaf(np.ones(3), "a") + tape.leaf(np.ones(4), "b")
    with pytest.raises(GraphError):
        tape.leaf(np.ones((2, 3)), "c") @ tape.leaf(np.ones((2, 3)), "d")


def test_domain_errors():
    tape = D.Tape()
    with pytest.raises(DomainError):
        D.log(tape.leaf(np.array([1.0, 0.0]), "x"))
    with pytest.raises(DomainError):
        tape.leaf(np.ones(2), "y") / np.array([1.0, 0.0])


def test_tape_is_reusable_and_deterministic():
    tape = D.Tape()
    x = tape.leaf(np.array([0.4, 1.3, 2.2]), "x")
    f = D.sum(D.lgamma(x) * D.exp(-x))
    g = D.sum(D.softplus(x))
    first = D.backward(tape, f)
    D.backward(tape, g)
    again = D.backward(tape, f)
    assert np.array_equal(first["x"], again["x"])


def _composite(P):
    # three layers over most primitives
    h = D.tanh(P["x"] @ P["w1"] + P["b1"])
    h = D.softmax(h, axis=-1) * D.sigmoid(h) + D.softplus(h)
    pos = D.maximum(D.softplus(h), 0.05)
    z = D.concat([D.lgamma(pos), D.digamma(pos + 1.0), D.log(pos) - D.sqrt(pos)], axis=-1)
    z = D.take(z, np.array([0, 2, 2, 1]), axis=0)
    z = D.swapaxes(D.reshape(z, (2, 2, -1)), 0, 1)
    return D.mean(D.log_sigmoid(D.sum(z, axis=-1) / 3.0)) - D.sum(D.exp(-pos)) / pos.value.size


def _random_params(seed):
    rng = np.random.default_rng(seed)
    return {"x": rng.normal(size=(3, 4)), "w1": rng.normal(size=(4, 5)), "b1": rng.normal(size=5)}


@pytest.mark.parametrize("seed", range(5))
def test_composite_matches_finite_differences(seed):
    assert D.finite_difference_check(_composite, _random_params(seed)) <= 1e-4


def test_finite_difference_check_quadratic():
    params = {"w": np.array([0.3, -1.2, 2.0])}
    err = D.finite_difference_check(lambda P: D.sum(P["w"] * P["w"] * 3.0 + P["w"]), params, step=1e-3)
    assert err <= 1e-6


def test_finite_difference_check_rejects_bad_step_and_drift():
    params = {"w": np.ones(2)}
    with pytest.raises(DomainError):
        D.finite_difference_check(lambda P: D.sum(P["w"]), params, step=0.0)
    calls = iter(range(1000))
    with pytest.raises(VerificationError):
        D.finite_difference_check(lambda P: D.sum(P["w"]) + float(next(calls)), params)


def test_gradient_linearity():
    rng = np.random.default_rng(3)
    params = _random_params(3)
    other = lambda P: D.sum(D.lgamma(D.softplus(P["x"]) + 0.1)) + D.sum(P["w1"] * P["w1"])
    a, b = rng.normal(), rng.normal()

    def grads(fn):
        tape = D.Tape()
        P = {k: tape.leaf(v, k) for k, v in params.items()}
        return D.backward(tape, fn(P))

    gf, gg = grads(_composite), grads(other)
    gc = grads(lambda P: _composite(P) * a + other(P) * b)
    for k in params:
        assert np.allclose(gc[k], a * gf[k] + b * gg[k], rtol=1e-10, atol=1e-10)


UNARY = {
    "log": (D.log, 0.05, 20.0),
    "exp": (D.exp, -5.0, 5.0),
    "sqrt": (D.sqrt, 0.05, 20.0),
    "tanh": (D.tanh, -4.0, 4.0),
    "softplus": (D.softplus, -10.0, 10.0),
    "sigmoid": (D.sigmoid, -10.0, 10.0),
    "log_sigmoid": (D.log_sigmoid, -10.0, 10.0),
    "lgamma": (D.lgamma, 0.05, 50.0),
    "digamma": (D.digamma, 0.05, 50.0),
    "neg": (D.neg, -5.0, 5.0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_primitive_adjoints(name):
    fn, lo, hi = UNARY[name]
    x = np.random.default_rng(len(name)).uniform(lo, hi, 100)
    err = D.finite_difference_check(lambda P: D.sum(fn(P["x"]) * np.linspace(0.5, 1.5, 100)), {"x": x})
    assert err <= 1e-5


BINARY = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / b,
    "matmul": lambda a, b: D.reshape(a, (10, 10)) @ D.reshape(b, (10, 10)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_adjoints(name):
    rng = np.random.default_rng(len(name))
    params = {"a": rng.uniform(0.5, 2, 100), "b": rng.uniform(0.5, 2, 100)}
    err = D.finite_difference_check(lambda P: D.sum(D.tanh(BINARY[name](P["a"], P["b"]))), params)
    assert err <= 1e-5


def test_broadcast_gradients_are_reduced():
    _, g = grad_of(lambda a, b: D.sum(a * b), a=np.ones((3, 4)), b=np.arange(4.0))
    assert g["b"].shape == (4,)
    assert np.allclose(g["b"], 3.0)


def test_masked_softmax_gradient_is_zero_on_masked_entries():
    mask = np.array([True, False, True, True])
    _, g = grad_of(lambda v: D.sum(D.softmax(v, mask=mask) * np.arange(4.0)), v=[0.1, 0.2, 0.3, 0.4])
    assert g["v"][1] == 0.0


def test_take_scatters_repeated_indices():
    idx = np.array([[0, 2], [2, 2]])
    _, g = grad_of(lambda t: D.sum(D.take(t, idx, axis=0)), t=np.ones((3, 2)))
    assert np.array_equal(g["t"], [[1, 1], [0, 0], [3, 3]])
    big = np.random.default_rng(0).integers(0, 5, size=300)
    _, g = grad_of(lambda t: D.sum(D.take(t, big, axis=0)), t=np.ones((5, 2)))
    assert np.array_equal(g["t"][:, 0], np.bincount(big, minlength=5))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=1, max_size=30))
def test_two_backward_passes_are_bit_identical(v):
    tape = D.Tape()
    x = tape.leaf(np.array(v), "x")
    loss = D.sum(D.softmax(x) * D.softplus(x))
    assert np.array_equal(D.backward(tape, loss)["x"], D.backward(tape, loss)["x"])
