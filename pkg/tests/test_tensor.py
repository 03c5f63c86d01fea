"""Tensor core: frozen arithmetic cases, stability guards, FD gradient oracles."""

import io

import numpy as np
import pytest

from pf3d import tensor as T
from pf3d.gradcheck import check_gradients
from pf3d.tensor import ContractError, ShapeError, Tensor


def rnd(*shape, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = T.matmul(Tensor(np.eye(2)), a)
        np.testing.assert_array_equal(out.data, a.data)

    def test_direct_arithmetic(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_array_equal(
            T.matmul(a, b).data, [[19.0, 22.0], [43.0, 50.0]]
        )

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError) as e:
            T.matmul(rnd(2, 3), rnd(2, 3))
        assert "(2, 3)" in str(e.value)

    def test_grad_vs_finite_differences(self):
        a, b = rnd(3, 3, seed=1), rnd(3, 3, seed=2)
        worst = check_gradients(lambda: T.tsum(T.matmul(a, b)), [a, b])
        assert worst < 1e-6

    def test_batched(self):
        a, b = rnd(4, 2, 3, seed=3), rnd(4, 3, 5, seed=4)
        out = T.matmul(a, b)
        assert out.shape == (4, 2, 5)
        check_gradients(lambda: T.tsum(T.square(T.matmul(a, b))), [a, b])


class TestSoftmax:
    def test_constant_logits(self):
        out = T.softmax(Tensor([0.0, 0.0, 0.0]), axis=-1)
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)

    def test_stability_forced(self):
        out = T.softmax(Tensor([1000.0, 0.0]), axis=-1)
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-300)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.uniform(-1e3, 1e3, size=(40, 5)))
        s = T.softmax(x, axis=-1).data.sum(axis=-1)
        np.testing.assert_allclose(s, 1.0, atol=1e-9)

    def test_grad(self):
        x = rnd(4, 5, seed=6)
        w = rnd(5, 1, seed=7)
        check_gradients(lambda: T.tsum(T.matmul(T.softmax(x, axis=-1), w)), [x, w])


class TestBackwardContract:
    def test_sum_of_squares(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        T.backward(T.tsum(T.square(x)))
        np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])

    def test_constant_loss_zero_grads(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        T.backward(T.tsum(x * 0.0))
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])

    def test_non_scalar_raises(self):
        with pytest.raises(ContractError):
            T.backward(rnd(3, seed=8))

    def test_accumulation_until_zeroed(self):
        x = Tensor([2.0], requires_grad=True)
        for _ in range(2):
            T.backward(T.tsum(T.square(x)))
        np.testing.assert_array_equal(x.grad, [8.0])
        x.zero_grad()
        T.backward(T.tsum(T.square(x)))
        np.testing.assert_array_equal(x.grad, [4.0])


# one FD example per remaining differentiable op, as a single parametrized suite
_OP_CASES = {
    "add": lambda a, b: T.tsum(T.square(a + b)),
    "sub": lambda a, b: T.tsum(T.square(a - b)),
    "mul": lambda a, b: T.tsum(a * b),
    "div": lambda a, b: T.tsum(a / (b + 3.0)),
    "neg": lambda a, b: T.tsum(-a * b),
    "pow": lambda a, b: T.tsum((a + 3.0) ** 1.7),
    "exp": lambda a, b: T.tsum(T.exp(a)),
    "log": lambda a, b: T.tsum(T.log(a + 4.0)),
    "sqrt": lambda a, b: T.tsum(T.sqrt(a + 4.0)),
    "abs": lambda a, b: T.tsum((a + 0.3).abs()),
    "tanh": lambda a, b: T.tsum(T.tanh(a)),
    "sigmoid": lambda a, b: T.tsum(T.sigmoid(a) * b),
    "softplus": lambda a, b: T.tsum(T.softplus(a) * b),
    "gelu": lambda a, b: T.tsum(T.gelu(a) * b),
    "clamp_min": lambda a, b: T.tsum(T.clamp_min(a, 0.25) * b),
    "sum": lambda a, b: T.tsum(T.tsum(a, axis=1) * T.tsum(b, axis=1)),
    "mean": lambda a, b: T.tsum(T.mean(a, axis=0) * T.mean(b, axis=0)),
    "max": lambda a, b: T.tsum(T.tmax(a, axis=1) * T.tmax(b, axis=1)),
    "min": lambda a, b: T.tsum(T.tmin(a, axis=1) * T.tmin(b, axis=1)),
    "reshape": lambda a, b: T.tsum(T.square(T.reshape(a, (6, 2)) + 1.0)),
    "permute": lambda a, b: T.tsum(T.permute(a, (1, 0)) * T.permute(b, (1, 0))),
    "roll": lambda a, b: T.tsum(T.roll(a, (1, 2), (0, 1)) * b),
    "concat": lambda a, b: T.tsum(T.square(T.concat([a, b], axis=1))),
    "slice": lambda a, b: T.tsum(T.square(a[1:3, :2] + b[0:2, 1:3])),
    "pad2d": lambda a, b: T.tsum(T.square(T.pad2d(a, (1, 2), (0, 1)))),
    "broadcast_to": lambda a, b: T.tsum(T.broadcast_to(a[0:1], (3, 4)) * b[0:3]),
    "square": lambda a, b: T.tsum(T.square(a)),
    "l1": lambda a, b: T.l1(a, b),
    "mean_all": lambda a, b: T.mean(a * b),
}


_SINGLE_OPERAND = {"pow", "exp", "log", "sqrt", "abs", "tanh", "reshape",
                   "pad2d", "square"}


@pytest.mark.parametrize("name", sorted(_OP_CASES))
def test_op_gradients_match_finite_differences(name):
    a, b = rnd(3, 4, seed=10), rnd(3, 4, seed=11)
    leaves = [a] if name in _SINGLE_OPERAND else [a, b]
    worst = check_gradients(lambda: _OP_CASES[name](a, b), leaves)
    assert worst < 1e-4


class TestIndexingOps:
    def test_gather_scatter_grads(self):
        src = rnd(5, 3, seed=12)
        idx = np.array([0, 2, 2, 4])
        check_gradients(lambda: T.tsum(T.square(T.gather_rows(src, idx))), [src])
        check_gradients(
            lambda: T.tsum(T.square(T.scatter_rows(T.gather_rows(src, idx), idx, 6))),
            [src],
        )

    def test_scatter_sums_collisions(self):
        src = Tensor([[1.0], [2.0], [3.0]])
        out = T.scatter_rows(src, np.array([1, 1, 0]), 3)
        np.testing.assert_array_equal(out.data, [[3.0], [3.0], [0.0]])

    def test_take_along_grad(self):
        x = rnd(4, 6, seed=13)
        idx = np.array([[0], [5], [2], [2]])
        check_gradients(lambda: T.tsum(T.take_along(x, idx, axis=1) ** 2.0), [x])


class TestShapeRoundTrips:
    def test_reshape_transpose_bit_identical(self):
        rng = np.random.default_rng(14)
        x = Tensor(rng.standard_normal((3, 5, 7)))
        back = T.permute(T.permute(x, (2, 0, 1)), (1, 2, 0))
        assert np.array_equal(back.data, x.data)
        back2 = T.reshape(T.reshape(x, (105,)), (3, 5, 7))
        assert np.array_equal(back2.data, x.data)


class TestLinearLayerNorm:
    def test_linear_grad(self):
        x, w, b = rnd(6, 4, seed=15), rnd(4, 3, seed=16), rnd(3, seed=17)
        check_gradients(lambda: T.tsum(T.square(T.linear(x, w, b))), [x, w, b])

    def test_layernorm_normalizes(self):
        x = rnd(5, 8, seed=18, scale=3.0)
        g, b = Tensor(np.ones(8), requires_grad=True), Tensor(
            np.zeros(8), requires_grad=True
        )
        out = T.layernorm(x, g, b)
        np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.data.std(axis=-1), 1.0, atol=1e-4)

    def test_layernorm_grad(self):
        x, g, b = rnd(5, 8, seed=19), rnd(8, seed=20), rnd(8, seed=21)
        check_gradients(lambda: T.tsum(T.square(T.layernorm(x, g, b))), [x, g, b])


class TestConv2d:
    def test_dirac_kernel_reproduces_input(self):
        rng = np.random.default_rng(22)
        x = Tensor(rng.standard_normal((1, 3, 6, 7)))
        w = np.zeros((3, 3, 3, 3))
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        out = T.conv2d(x, Tensor(w), padding=1)
        np.testing.assert_array_equal(out.data, x.data)

    def test_shapes_stride_dilation(self):
        x = rnd(2, 4, 9, 11, seed=23)
        w = rnd(6, 4, 3, 3, seed=24)
        assert T.conv2d(x, w, stride=2, padding=1).shape == (2, 6, 5, 6)
        assert T.conv2d(x, w, dilation=2, padding=2).shape == (2, 6, 9, 11)

    def test_grouped_matches_manual(self):
        rng = np.random.default_rng(25)
        x = Tensor(rng.standard_normal((1, 4, 5, 5)))
        w = Tensor(rng.standard_normal((4, 1, 3, 3)))
        out = T.conv2d(x, w, padding=1, groups=4)
        # depthwise reference by plain correlation, channel by channel
        ref = np.zeros_like(out.data)
        xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
        for c in range(4):
            for i in range(5):
                for j in range(5):
                    ref[0, c, i, j] = np.sum(
                        xp[0, c, i : i + 3, j : j + 3] * w.data[c, 0]
                    )
        np.testing.assert_allclose(out.data, ref, atol=1e-12)

    @pytest.mark.parametrize(
        "stride,padding,dilation,groups",
        [(1, 1, 1, 1), (2, 1, 1, 1), (1, 2, 2, 1), (1, 1, 1, 2), (1, 2, 2, 4)],
    )
    def test_grad(self, stride, padding, dilation, groups):
        x = rnd(1, 4, 6, 6, seed=26)
        w = rnd(4, 4 // groups, 3, 3, seed=27)
        b = rnd(4, seed=28)
        check_gradients(
            lambda: T.tsum(
                T.square(
                    T.conv2d(
                        x, w, b, stride=stride, padding=padding,
                        dilation=dilation, groups=groups,
                    )
                )
            ),
            [x, w, b],
        )


class TestDropout:
    def test_eval_path_is_identity(self):
        x = rnd(10, 10, seed=29)
        assert T.dropout(x, 0.0, np.random.default_rng(0)) is x

    def test_scaling_preserves_mean(self):
        rng = np.random.default_rng(30)
        x = Tensor(np.ones((400, 50)))
        out = T.dropout(x, 0.3, rng)
        assert abs(out.data.mean() - 1.0) < 0.02


class TestSerialization:
    def test_round_trip_bit_identical(self):
        rng = np.random.default_rng(31)
        arr = rng.standard_normal((3, 4, 5))
        buf = io.BytesIO()
        T.write_tensor(buf, arr)
        buf.seek(0)
        back = T.read_tensor(buf)
        assert back.shape == arr.shape
        assert np.array_equal(back, arr)

    def test_magic_guard(self):
        buf = io.BytesIO(b"NOTMAGIC" + b"\x00" * 16)
        with pytest.raises(ContractError):
            T.read_tensor(buf)

    def test_wire_layout(self):
        buf = io.BytesIO()
        T.write_tensor(buf, np.array([[1.0, 2.0]]))
        raw = buf.getvalue()
        assert raw[:8] == b"PF3DTNSR"
        assert raw[8:12] == (2).to_bytes(4, "little")
        assert raw[12:20] == (1).to_bytes(8, "little")
        assert raw[20:28] == (2).to_bytes(8, "little")
        assert len(raw) == 28 + 16


class TestNoNaN:
    def test_log_guard(self):
        out = T.log(Tensor([0.0, 1e-320, 1.0]))
        assert np.all(np.isfinite(out.data))

    def test_softmax_extremes(self):
        x = Tensor(np.array([[1e3, -1e3, 0.0], [5e2, 5e2, 5e2]]))
        out = T.softmax(x, axis=-1)
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data.sum(-1), 1.0, atol=1e-12)
