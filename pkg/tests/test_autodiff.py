"""Tensor-engine tests: primitive semantics, taped backward, oracle agreement."""
from __future__ import annotations

import numpy as np
import pytest

from modasr import autodiff as ad
from modasr.errors import (
    NondeterministicFunctionError,
    NonFiniteError,
    ShapeError,
    TapeError,
    UnknownOpError,
)

from helpers import check_gradients, rand


class TestPrimitiveValues:
    def test_matmul_identity(self):
        rng = np.random.default_rng(0)
        x = ad.Tensor(rng.standard_normal((3, 5)))
        eye = ad.Tensor(np.eye(3))
        out = ad.matmul(eye, x)
        np.testing.assert_array_equal(out.data, x.data)

    def test_softmax_symmetry(self):
        out = ad.softmax(ad.Tensor([0.0, 0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [0.25, 0.25, 0.25, 0.25], atol=1e-7)

    def test_depthwise_delta_kernel(self):
        rng = np.random.default_rng(1)
        x = ad.Tensor(rng.standard_normal((6, 4)))
        w = ad.Tensor(np.tile(np.array([[0.0], [1.0], [0.0]]), (1, 4)))
        out = ad.depthwise_conv1d(x, w, left=1, right=1)
        np.testing.assert_allclose(out.data, x.data, atol=1e-7)

    def test_bias_add_and_rejected_broadcast(self):
        a = ad.Tensor(np.ones((2, 3)))
        b = ad.Tensor(np.arange(3.0))
        np.testing.assert_allclose(ad.add(a, b).data, 1.0 + np.arange(3.0) * np.ones((2, 3)))
        with pytest.raises(ShapeError):
            ad.add(a, ad.Tensor(np.ones((2, 1))))
        with pytest.raises(ShapeError):
            ad.mul(a, b)

    def test_glu_halves(self):
        x = ad.Tensor([[1.0, 2.0, 0.0, 0.0]])
        out = ad.glu(x)
        np.testing.assert_allclose(out.data, [[0.5, 1.0]], atol=1e-7)

    def test_logsigmoid_extremes_finite(self):
        out = ad.logsigmoid(ad.Tensor([-50.0, 0.0, 50.0]))
        assert np.isfinite(out.data).all()
        np.testing.assert_allclose(out.data[1], np.log(0.5), atol=1e-6)
        np.testing.assert_allclose(out.data[0], -50.0, atol=1e-6)


class TestBackwardBasics:
    def test_sum_of_twice_x(self):
        x = ad.Tensor(np.random.default_rng(2).standard_normal((3, 4)), requires_grad=True)
        with ad.Tape() as tape:
            loss = ad.reduce_sum(ad.scale(x, 2.0))
            tape.backward(loss)
        np.testing.assert_allclose(x.grad, np.full((3, 4), 2.0), atol=1e-7)

    def test_sum_of_softmax_is_flat(self):
        x = ad.Tensor(np.random.default_rng(3).standard_normal(7), requires_grad=True)
        with ad.Tape() as tape:
            loss = ad.reduce_sum(ad.softmax(x))
            tape.backward(loss)
        np.testing.assert_allclose(x.grad, np.zeros(7), atol=1e-6)

    def test_three_layer_composition_matches_fd(self):
        rng = np.random.default_rng(4)
        with ad.precision("float64"):
            w1, w2, w3 = rand(rng, 5, 6), rand(rng, 6, 4), rand(rng, 4, 2)
            x = ad.Tensor(rng.standard_normal((3, 5)))

            def build(w1, w2, w3):
                h = ad.swish(ad.matmul(x, w1))
                h = ad.tanh(ad.matmul(h, w2))
                return ad.reduce_sum(ad.matmul(h, w3))

            check_gradients(build, [w1, w2, w3])

    def test_loss_not_on_tape(self):
        x = ad.Tensor([1.0], requires_grad=True)
        with ad.Tape() as tape:
            pass
        with pytest.raises(TapeError):
            tape.backward(ad.reduce_sum(x))

    def test_non_scalar_loss_rejected(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        with ad.Tape() as tape:
            y = ad.scale(x, 2.0)
            with pytest.raises(TapeError):
                tape.backward(y)

    def test_tape_single_use(self):
        x = ad.Tensor([1.0], requires_grad=True)
        with ad.Tape() as tape:
            loss = ad.reduce_sum(x)
            tape.backward(loss)
        with pytest.raises(TapeError):
            tape.backward(loss)

    def test_grad_accumulates_across_tapes(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        for _ in range(2):
            with ad.Tape() as tape:
                loss = ad.reduce_sum(ad.scale(x, 3.0))
                tape.backward(loss)
        np.testing.assert_allclose(x.grad, [6.0, 6.0])

    def test_tape_entries_topologically_ordered(self):
        x = ad.Tensor(np.ones((2, 3)), requires_grad=True)
        w = ad.Tensor(np.ones((3, 3)), requires_grad=True)
        with ad.Tape() as tape:
            h = ad.swish(ad.matmul(x, w))
            ad.reduce_sum(ad.mul(h, h))
            seen = {id(x), id(w)}
            for out, inputs, _ in tape._entries:
                for inp in inputs:
                    assert id(inp) in seen or not inp.requires_grad
                seen.add(id(out))


class TestFiniteDiffOracle:
    def test_square_at_three(self):
        x = ad.Tensor([3.0], dtype=np.float64)
        (g,) = ad.finite_diff_grad(lambda t: float(t.data[0] ** 2), [x])
        assert abs(g[0] - 6.0) < 1e-6

    def test_constant_function(self):
        x = ad.Tensor(np.random.default_rng(5).standard_normal(4), dtype=np.float64)
        (g,) = ad.finite_diff_grad(lambda t: 1.25, [x])
        np.testing.assert_array_equal(g, np.zeros(4))

    def test_nondeterministic_function_detected(self):
        x = ad.Tensor([1.0], dtype=np.float64)
        state = {"n": 0}

        def f(t):
            state["n"] += 1
            return float(state["n"])

        with pytest.raises(NondeterministicFunctionError):
            ad.finite_diff_grad(f, [x])


def _ln_params(rng, d):
    return [ad.Tensor(rng.standard_normal(d) * 0.1 + 1.0), ad.Tensor(rng.standard_normal(d) * 0.1)]


# Each entry: name -> (builder producing scalar loss from leaves, leaf factory).
_GRAD_CASES = {
    "matmul": (
        lambda a, b: ad.reduce_sum(ad.matmul(a, b)),
        lambda rng: [rand(rng, 3, 4), rand(rng, 4, 2)],
    ),
    "matmul-batched": (
        lambda a, b: ad.reduce_sum(ad.matmul(a, b)),
        lambda rng: [rand(rng, 2, 3, 4), rand(rng, 2, 4, 2)],
    ),
    "matmul-3d-2d": (
        lambda a, b: ad.reduce_sum(ad.matmul(a, b)),
        lambda rng: [rand(rng, 2, 3, 4), rand(rng, 4, 5)],
    ),
    "add-bias": (
        lambda a, b: ad.reduce_sum(ad.swish(ad.add(a, b))),
        lambda rng: [rand(rng, 3, 4), rand(rng, 4)],
    ),
    "mul": (
        lambda a, b: ad.reduce_sum(ad.mul(a, b)),
        lambda rng: [rand(rng, 3, 4), rand(rng, 3, 4)],
    ),
    "concat": (
        lambda a, b: ad.reduce_sum(ad.swish(ad.concat([a, b], axis=1))),
        lambda rng: [rand(rng, 2, 3), rand(rng, 2, 2)],
    ),
    "slice": (
        lambda a: ad.reduce_sum(ad.swish(ad.slice_axis(a, 1, 1, 3))),
        lambda rng: [rand(rng, 3, 4)],
    ),
    "embedding": (
        lambda t: ad.reduce_sum(ad.swish(ad.embedding(t, np.array([0, 2, 2, 1])))),
        lambda rng: [rand(rng, 4, 3)],
    ),
    "layer-norm": (
        lambda x, g, b: ad.reduce_sum(ad.swish(ad.layer_norm(x, g, b))),
        lambda rng: [rand(rng, 3, 5)] + _ln_params(rng, 5),
    ),
    "softmax": (
        lambda x, w: ad.reduce_sum(ad.mul(ad.softmax(x), w)),
        lambda rng: [rand(rng, 3, 5), rand(rng, 3, 5)],
    ),
    "log-softmax": (
        lambda x, w: ad.reduce_sum(ad.mul(ad.log_softmax(x), w)),
        lambda rng: [rand(rng, 3, 5), rand(rng, 3, 5)],
    ),
    "sigmoid": (
        lambda x: ad.reduce_sum(ad.sigmoid(x)),
        lambda rng: [rand(rng, 4, 3)],
    ),
    "logsigmoid": (
        lambda x: ad.reduce_sum(ad.logsigmoid(x)),
        lambda rng: [rand(rng, 4, 3)],
    ),
    "tanh": (
        lambda x: ad.reduce_sum(ad.tanh(x)),
        lambda rng: [rand(rng, 4, 3)],
    ),
    "swish": (
        lambda x: ad.reduce_sum(ad.swish(x)),
        lambda rng: [rand(rng, 4, 3)],
    ),
    "glu": (
        lambda x: ad.reduce_sum(ad.glu(x)),
        lambda rng: [rand(rng, 3, 6)],
    ),
    "depthwise-conv1d": (
        lambda x, w: ad.reduce_sum(ad.swish(ad.depthwise_conv1d(x, w, left=2, right=1))),
        lambda rng: [rand(rng, 6, 3), rand(rng, 4, 3)],
    ),
    "masked-fill": (
        lambda x: ad.reduce_sum(
            ad.softmax(ad.masked_fill(x, np.triu(np.ones((4, 4), dtype=bool), k=1)))
        ),
        lambda rng: [rand(rng, 4, 4)],
    ),
    "transpose": (
        lambda x: ad.reduce_sum(ad.swish(ad.transpose(x, (1, 0, 2)))),
        lambda rng: [rand(rng, 2, 3, 4)],
    ),
    "reshape": (
        lambda x: ad.reduce_sum(ad.swish(ad.reshape(x, (6, 2)))),
        lambda rng: [rand(rng, 3, 4)],
    ),
    "reduce-sum-axis": (
        lambda x: ad.reduce_sum(ad.swish(ad.reduce_sum(x, axis=1))),
        lambda rng: [rand(rng, 3, 4)],
    ),
    "reduce-mean": (
        lambda x: ad.reduce_sum(ad.swish(ad.reduce_mean(x, axis=0, keepdims=True))),
        lambda rng: [rand(rng, 3, 4)],
    ),
    "expand": (
        lambda x, w: ad.reduce_sum(ad.mul(ad.expand(x, 1, 5), w)),
        lambda rng: [rand(rng, 3, 4), rand(rng, 3, 5, 4)],
    ),
    "scale": (
        lambda x: ad.reduce_sum(ad.scale(x, -1.7)),
        lambda rng: [rand(rng, 3, 4)],
    ),
}


@pytest.mark.parametrize("name", sorted(_GRAD_CASES))
def test_primitive_gradients_match_oracle(name):
    build, make = _GRAD_CASES[name]
    with ad.precision("float64"):
        for instance in range(10):
            rng = np.random.default_rng(hash(name) % 2**32 + instance)
            check_gradients(build, make(rng))


class TestCausality:
    def test_conv_future_perturbation_bit_exact(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((10, 3)).astype(np.float32)
        w = ad.Tensor(rng.standard_normal((5, 3)))
        t = 4
        left, right = 3, 1
        base = ad.depthwise_conv1d(ad.Tensor(x), w, left, right).data
        pert = x.copy()
        pert[t + right + 1:] += rng.standard_normal(pert[t + right + 1:].shape).astype(np.float32)
        out = ad.depthwise_conv1d(ad.Tensor(pert), w, left, right).data
        assert (out[: t + 1] == base[: t + 1]).all()

    def test_masked_attention_future_perturbation_bit_exact(self):
        rng = np.random.default_rng(8)
        T, d = 8, 4
        wq = ad.Tensor(rng.standard_normal((d, d)))
        causal = np.triu(np.ones((T, T), dtype=bool), k=1)

        def attend(x):
            q = ad.matmul(ad.Tensor(x), wq)
            logits = ad.matmul(q, ad.transpose(ad.Tensor(x), (1, 0)))
            att = ad.softmax(ad.masked_fill(logits, causal))
            return ad.matmul(att, ad.Tensor(x)).data

        x = rng.standard_normal((T, d)).astype(np.float32)
        base = attend(x)
        pert = x.copy()
        pert[6:] = rng.standard_normal(pert[6:].shape)
        out = attend(pert)
        assert (out[:6] == base[:6]).all()


class TestDeterminismAndErrors:
    def test_seeded_sequence_bit_identical(self):
        def run():
            rng = np.random.default_rng(99)
            x = ad.Tensor(rng.standard_normal((4, 4)))
            w = ad.Tensor(ad.xavier_uniform(rng, (4, 4)))
            return ad.layer_norm(
                ad.matmul(ad.swish(x), w),
                ad.Tensor(np.ones(4)),
                ad.Tensor(np.zeros(4)),
            ).data.tobytes()

        assert run() == run()

    def test_unknown_kind(self):
        with pytest.raises(UnknownOpError):
            ad.apply_primitive("frobnicate", [ad.Tensor([1.0])])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))

    def test_non_finite_output_rejected(self):
        big = ad.Tensor(np.array([1e30], dtype=np.float32))
        with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
            ad.mul(big, big)

    def test_apply_primitive_dispatch(self):
        out = ad.apply_primitive("softmax-over-last-axis", [ad.Tensor([0.0, 0.0])])
        np.testing.assert_allclose(out.data, [0.5, 0.5])
        out = ad.apply_primitive(
            "depthwise-conv1d",
            [ad.Tensor(np.ones((4, 2))), ad.Tensor(np.ones((3, 2)))],
            {"left": 1, "right": 1},
        )
        assert out.shape == (4, 2)

    def test_primitive_registry_covers_required_set(self):
        required = {
            "matmul", "add", "elementwise-multiply", "concat", "slice",
            "embedding-lookup", "layer-normalization", "softmax-over-last-axis",
            "log-softmax", "sigmoid", "swish", "GLU", "depthwise-conv1d",
            "masked-fill", "transpose", "reshape", "reduce-sum", "reduce-mean",
        }
        assert required <= set(ad.primitive_kinds())
