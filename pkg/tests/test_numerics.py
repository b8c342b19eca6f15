"""Tape primitives against central finite differences, plus optimizer contracts."""

import math

import numpy as np
import pytest

from selfplay.core import seeded_stream
from selfplay.numerics import (
    NumericalFailure,
    OptimizerState,
    OracleInvalid,
    ParameterVector,
    Tape,
    UsageError,
    apply_update,
    finite_diff_check,
    init_optimizer,
    make_layout,
)


def vec_params(values, name="x"):
    values = np.asarray(values, dtype=np.float64)
    return ParameterVector(values, make_layout([(name, values.shape)]))


def numeric_grad(f, params, step=1e-6):
    g = np.zeros_like(params.values)
    for i in range(params.values.size):
        p = params.copy()
        p.values[i] += step
        hi = f(p)
        p.values[i] -= 2 * step
        lo = f(p)
        g[i] = (hi - lo) / (2 * step)
    return g


class TestForwardValues:
    def test_square(self):
        params = vec_params([3.0])
        tape = Tape(params)
        x = tape.param("x")
        y = tape.sum(tape.mul(x, x))
        assert y.value == 9.0

    def test_log_softmax_uniform_gather(self):
        params = vec_params(np.zeros(4))
        tape = Tape(params)
        row = tape.log_softmax(tape.param("x"))
        picked = float(row.value[2])
        assert picked == pytest.approx(-math.log(4.0), abs=1e-12)

    def test_deterministic_recompute(self):
        stream = seeded_stream(5, "fwd")
        params = vec_params(stream.normal(size=12))

        def value():
            tape = Tape(params)
            x = tape.param("x")
            h = tape.tanh(tape.scale(x, 0.5))
            return float(tape.sum(tape.mul(h, h)).value)

        assert value() == value()

    def test_nan_reported_with_node(self):
        params = vec_params([800.0])
        tape = Tape(params)
        x = tape.param("x")
        with pytest.raises(NumericalFailure, match="exp"):
            tape.exp(x)  # e^800 overflows to inf


class TestBackward:
    def test_square_gradient(self):
        params = vec_params([3.0])
        tape = Tape(params)
        x = tape.param("x")
        grad = tape.backward(tape.sum(tape.mul(x, x)))
        assert grad.values[0] == 6.0

    def test_log_softmax_gather_closed_form(self):
        # d(-log_softmax(x)[2])/dx = softmax(x) - one_hot(2)
        params = ParameterVector(np.zeros(4), make_layout([("x", (1, 4))]))
        tape = Tape(params)
        row = tape.gather(tape.log_softmax(tape.param("x")), np.array([2]))
        grad = tape.backward(tape.scale(tape.sum(row), -1.0))
        np.testing.assert_allclose(grad.values, [0.25, 0.25, -0.75, 0.25], atol=1e-12)

    def test_backward_requires_scalar_root(self):
        params = vec_params([1.0, 2.0])
        tape = Tape(params)
        x = tape.param("x")
        with pytest.raises(UsageError):
            tape.backward(x)

    def test_backward_twice_rejected(self):
        params = vec_params([1.0])
        tape = Tape(params)
        root = tape.sum(tape.param("x"))
        tape.backward(root)
        with pytest.raises(UsageError):
            tape.backward(root)

    def test_foreign_root_rejected(self):
        params = vec_params([1.0])
        other = Tape(params)
        root = other.sum(other.param("x"))
        tape = Tape(params)
        tape.sum(tape.param("x"))
        with pytest.raises(UsageError):
            tape.backward(root)

    def test_detached_branch_gets_zero_gradient(self):
        params = vec_params([0.7, -0.3])
        tape = Tape(params)
        x = tape.param("x")
        loss = tape.sum(tape.mul(tape.detach(x), tape.const([1.0, 1.0])))
        grad = tape.backward(loss)
        assert np.array_equal(grad.values, np.zeros(2))

    def test_bit_identical_gradients(self):
        stream = seeded_stream(9, "det")
        params = vec_params(stream.normal(size=30))

        def grad():
            tape = Tape(params)
            x = tape.param("x")
            h = tape.tanh(tape.scale(x, 0.3))
            e = tape.exp(tape.scale(h, 0.1))
            return tape.backward(tape.sum(tape.mul(h, e))).values

        assert np.array_equal(grad(), grad())


def _random_case(builder, stream):
    """Build (loss_fn, params) for one primitive.

    The readout is a fixed linear functional with weights bounded away from
    zero, so the checked gradients never vanish and the strict relative-error
    comparison stays meaningful.
    """
    n = int(stream.integers(3, 8))
    params = vec_params(stream.uniform(-1.5, 1.5, size=n))
    weights = stream.uniform(0.5, 1.5, size=n) * stream.choice([-1.0, 1.0], size=n)

    def readout(tape, node):
        if node.value.shape == ():
            return tape.scale(node, float(weights[0]))
        return tape.sum(tape.mul(node, tape.const(weights[: node.value.size])))

    def f(p):
        tape = Tape(p)
        node = builder(tape, tape.param("x"))
        return float(readout(tape, node).value)

    def g(p):
        tape = Tape(p)
        node = builder(tape, tape.param("x"))
        return tape.backward(readout(tape, node)).values

    return f, g, params


PRIMITIVES = {
    "tanh": lambda tape, x: tape.tanh(tape.scale(x, 0.8)),
    "exp": lambda tape, x: tape.exp(tape.scale(x, 0.3)),
    "scale": lambda tape, x: tape.scale(x, -1.7),
    "add": lambda tape, x: tape.add(x, tape.tanh(x)),
    "sub": lambda tape, x: tape.sub(x, tape.tanh(tape.scale(x, 0.3))),
    "mul": lambda tape, x: tape.mul(tape.exp(tape.scale(x, 0.2)), tape.exp(tape.scale(x, 0.1))),
    "sum": lambda tape, x: tape.sum(x),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_matches_finite_differences(name):
    # relative tolerance 1e-6 with an absolute floor at the central-difference
    # noise level, so coordinates with vanishing gradients stay checkable
    stream = seeded_stream(100, f"prim/{name}")
    for _ in range(100):
        f, g, params = _random_case(PRIMITIVES[name], stream)
        analytic = g(params)
        numeric = numeric_grad(f, params)
        gap = np.abs(analytic - numeric)
        assert np.all(gap <= 1e-6 * np.maximum(1.0, np.abs(numeric))), (
            f"{name}: gap {gap.max():.2e}"
        )


def test_affine_and_embed_match_finite_differences():
    stream = seeded_stream(101, "prim/affine")
    for _ in range(100):
        rows, e, h = 5, 3, 4
        total = rows * e + h * 2 * e + h
        layout = make_layout([("embed", (rows, e)), ("w", (h, 2 * e)), ("b", (h,))])
        params = ParameterVector(stream.uniform(-1.0, 1.0, size=total), layout)
        ids = stream.integers(0, rows, size=(6, 2))

        readout = np.array([0.9, -1.2, 0.7])

        def build(tape):
            x = tape.embed(tape.param("embed"), ids)
            out = tape.log_softmax(tape.affine(x, tape.param("w"), tape.param("b")))
            seg = tape.segment_sum(tape.gather(out, np.array([1, 3, 0, 2, 1, 0])),
                                   np.array([0, 0, 1, 1, 2, 2]), 3)
            return tape.sum(tape.mul(seg, tape.const(readout)))

        tape = Tape(params)
        analytic = tape.backward(build(tape)).values

        def f(p):
            t = Tape(p)
            return float(build(t).value)

        numeric = numeric_grad(f, params)
        gap = np.abs(analytic - numeric)
        assert np.all(gap <= 1e-6 * np.maximum(1.0, np.abs(numeric)))


class TestFiniteDiffCheck:
    def test_quadratic_is_nearly_exact(self):
        params = vec_params(seeded_stream(3, "quad").normal(size=10))

        def loss(p):
            tape = Tape(p)
            x = tape.param("x")
            node = tape.sum(tape.mul(x, x))
            return float(node.value), tape.backward(node)

        err = finite_diff_check(loss, params, step=1e-5, sample=range(10))
        assert err < 1e-8

    def test_nondeterministic_loss_rejected(self):
        params = vec_params([1.0])
        counter = {"calls": 0}

        def noisy(p):
            counter["calls"] += 1
            tape = Tape(p)
            node = tape.scale(tape.sum(tape.param("x")), 1.0 + counter["calls"] * 0.1)
            return float(node.value), tape.backward(node)

        with pytest.raises(OracleInvalid):
            finite_diff_check(noisy, params, step=1e-5, sample=[0])


class TestApplyUpdate:
    def test_sgd_zero_gradient_is_identity(self):
        params = vec_params([1.0, -2.0])
        state = init_optimizer("sgd", params.layout)
        tape = Tape(params)
        grad = tape.backward(tape.scale(tape.sum(tape.param("x")), 0.0))
        new, _ = apply_update(params, grad, state, eta=0.1)
        assert np.array_equal(new.values, params.values)

    def test_sgd_step(self):
        params = vec_params([1.0])
        state = init_optimizer("sgd", params.layout)
        tape = Tape(params)
        grad = tape.backward(tape.scale(tape.sum(tape.param("x")), 2.0))
        new, state = apply_update(params, grad, state, eta=0.1)
        assert new.values[0] == pytest.approx(0.8, abs=1e-15)
        assert state.step == 1

    def test_adam_first_step_magnitude(self):
        stream = seeded_stream(4, "adam")
        params = vec_params(stream.normal(size=20))
        g = stream.normal(size=20) * np.array([10.0**k for k in stream.integers(-3, 3, size=20)])
        state = init_optimizer("adam", params.layout)
        from selfplay.numerics import Gradient

        new, _ = apply_update(params, Gradient(g, params.layout), state, eta=1e-3)
        displacement = np.abs(new.values - params.values)
        # bias-corrected first step moves ~eta per coordinate with nonzero grad
        assert np.all(displacement[g != 0] < 1e-3 + 1e-12)
        assert np.all(displacement[g != 0] > 0.9e-3)

    def test_layout_mismatch(self):
        params = vec_params([1.0, 2.0])
        other = vec_params([1.0], name="y")
        from selfplay.numerics import Gradient

        with pytest.raises(UsageError):
            apply_update(params, Gradient(np.zeros(1), other.layout), init_optimizer("sgd", params.layout), 0.1)

    def test_nonfinite_update_rejected(self):
        params = vec_params([1.0])
        from selfplay.numerics import Gradient

        with pytest.raises(NumericalFailure):
            apply_update(
                params, Gradient(np.array([np.inf]), params.layout),
                init_optimizer("sgd", params.layout), 0.1,
            )
