import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from umiformer.autodiff import (
    OPS,
    CheckpointError,
    ContractError,
    LayerNorm,
    Linear,
    Module,
    NumericalError,
    OptimizerState,
    Parameter,
    ShapeError,
    Tensor,
    adamw_step,
    check_gradients,
    decode_checkpoint,
    encode_checkpoint,
    forward_op,
    no_grad,
    ops,
    precision,
    step_lr,
)
from umiformer.autodiff.ops import LAYERNORM_EPS


class TestForwardOps:
    def test_softmax_uniform(self, f64):
        out = ops.softmax(Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=0, atol=1e-15)

    def test_tanh_zero(self):
        assert ops.tanh(Tensor(0.0)).item() == 0.0

    def test_gather_rows_by_hand(self, f64):
        x = Tensor([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        out = ops.gather(x, np.array([2, 0]), axis=0)
        np.testing.assert_array_equal(out.data, [[5.0, 6.0], [1.0, 2.0]])

    def test_gelu_uses_tanh_form(self, f64):
        x = np.linspace(-3, 3, 13)
        expected = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))
        np.testing.assert_allclose(ops.gelu(Tensor(x)).data, expected, rtol=1e-15)

    def test_softmax_is_stable_for_large_logits(self, f64):
        out = ops.softmax(Tensor([1000.0, 1000.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_layernorm_moments(self, f64, rng):
        out = ops.layernorm(Tensor(rng.normal(3.0, 5.0, size=(4, 32))), axis=-1).data
        assert np.abs(out.mean(axis=-1)).max() < 1e-6
        assert np.abs(out.var(axis=-1) - 1).max() < 1e-4

    def test_softmax_rows_sum_to_one(self, f64, rng):
        out = ops.softmax(Tensor(rng.normal(size=(5, 7)) * 10), axis=0).data
        np.testing.assert_allclose(out.sum(axis=0), 1.0, atol=1e-9)

    def test_nearest_upsample_repeats(self, f64):
        x = Tensor(np.arange(8.0).reshape(1, 2, 2, 2, 1))
        out = ops.nearest_upsample_3d(x, 2).data
        assert out.shape == (1, 4, 4, 4, 1)
        assert out[0, 3, 2, 1, 0] == x.data[0, 1, 1, 0, 0]

    def test_forward_op_dispatch_accepts_hyphens(self, f64):
        a = Tensor([[1.0, -1.0]])
        np.testing.assert_array_equal(forward_op("scalar-mul", a, c=2.0).data, [[2.0, -2.0]])
        with pytest.raises(ContractError, match="unknown op"):
            forward_op("convolve", a)

    def test_registry_is_the_closed_op_set(self):
        assert set(OPS) == {
            "matmul", "add", "sub", "mul", "scalar_mul", "div", "exp", "log", "tanh", "gelu", "softmax",
            "layernorm", "reduce_sum", "reduce_mean", "reduce_max", "reshape", "transpose", "concat",
            "gather", "broadcast", "nearest_upsample_3d", "conv3d_pointwise",
        }


class TestContracts:
    def test_no_implicit_broadcasting(self):
        with pytest.raises(ShapeError, match=r"add: operand shapes \(2, 3\) and \(1, 3\)"):
            ops.add(Tensor(np.ones((2, 3))), Tensor(np.ones((1, 3))))

    def test_matmul_inner_dims_named(self):
        with pytest.raises(ShapeError, match="matmul"):
            ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))

    def test_broadcast_rule(self):
        with pytest.raises(ShapeError):
            ops.broadcast(Tensor(np.ones((2, 3))), (4, 3))

    def test_gather_out_of_range(self):
        with pytest.raises(ShapeError, match="out of range"):
            ops.gather(Tensor(np.ones((3, 2))), np.array([3]))

    def test_non_finite_output_raises(self):
        with pytest.raises(NumericalError, match="exp"):
            ops.exp(Tensor([1e4]))

    def test_log_of_zero_raises(self):
        with pytest.raises(NumericalError):
            ops.log(Tensor([0.0, 1.0]))

    def test_backward_needs_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError, match="scalar"):
            ops.scalar_mul(x, 2.0).backward()


class TestBackward:
    def test_sum_gives_ones(self, f64):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        ops.reduce_sum(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_sum_of_squares(self, f64):
        x = Tensor([1.0, 2.0], requires_grad=True)
        ops.reduce_sum(ops.mul(x, x)).backward()
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_repeated_backward_accumulates(self, f64):
        x = Tensor([1.0, 2.0], requires_grad=True)
        ops.reduce_sum(x).backward()
        ops.reduce_sum(x).backward()
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_gather_scatter_adds_duplicates(self, f64):
        x = Tensor(np.zeros((3, 2)), requires_grad=True)
        ops.reduce_sum(ops.gather(x, np.array([1, 1, 2]))).backward()
        np.testing.assert_array_equal(x.grad, [[0, 0], [2, 2], [1, 1]])

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = ops.scalar_mul(x, 3.0)
        assert not y.requires_grad and y._parents == ()

    def test_determinism(self, f64, rng):
        data = rng.normal(size=(3, 4))

        def run():
            x = Tensor(data, requires_grad=True)
            ops.reduce_sum(ops.softmax(ops.gelu(x), axis=0)).backward()
            return x.grad

        assert np.array_equal(run(), run())

    def test_reduce_max_routes_to_first_max(self, f64):
        x = Tensor([[1.0, 3.0, 3.0]], requires_grad=True)
        ops.reduce_sum(ops.reduce_max(x, axis=1)).backward()
        np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0]])


UNARY = ["exp", "tanh", "gelu", "softmax", "layernorm"]


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(0, 2**31 - 1),
    chain=st.lists(st.sampled_from(UNARY), min_size=1, max_size=4),
    rows=st.integers(1, 4),
    cols=st.integers(3, 5),
)
def test_composed_graphs_match_finite_differences(seed, chain, rows, cols):
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        x = Tensor(rng.uniform(-1, 1, size=(rows, cols)), requires_grad=True)
        w = Tensor(rng.normal(size=(rows, cols)))

        def loss():
            h = x
            for name in chain:
                h = getattr(ops, name)(h)
            return ops.reduce_sum(ops.mul(h, w))

        assert check_gradients(loss, [x]) < 1e-4


@settings(max_examples=40, deadline=None)
@given(
    shape=st.lists(st.integers(1, 4), min_size=2, max_size=4),
    axis=st.integers(-4, 3),
)
def test_reduction_shape_algebra(shape, axis):
    x = Tensor(np.ones(shape))
    if not -len(shape) <= axis < len(shape):
        with pytest.raises(ShapeError):
            ops.reduce_sum(x, axis)
        return
    expected = tuple(s for i, s in enumerate(shape) if i != axis % len(shape))
    for op in (ops.reduce_sum, ops.reduce_mean, ops.reduce_max):
        assert op(x, axis).shape == expected
    assert ops.softmax(x, axis).shape == tuple(shape)


@settings(max_examples=40, deadline=None)
@given(lead=st.lists(st.integers(1, 3), max_size=2), m=st.integers(1, 4), k=st.integers(1, 4), n=st.integers(1, 4))
def test_matmul_shape_algebra(lead, m, k, n):
    a = Tensor(np.ones(tuple(lead) + (m, k)))
    assert ops.matmul(a, Tensor(np.ones((k, n)))).shape == tuple(lead) + (m, n)
    if lead:
        assert ops.matmul(a, Tensor(np.ones(tuple(lead) + (k, n)))).shape == tuple(lead) + (m, n)


class TestAdamW:
    def test_zero_grad_no_decay_leaves_param(self, f64):
        p = Parameter(np.array([0.7, -1.2]), name="p")
        p.grad = np.zeros(2)
        adamw_step([p], OptimizerState(learning_rate=0.1, weight_decay=0.0))
        np.testing.assert_array_equal(p.data, [0.7, -1.2])

    def test_single_scalar_by_hand(self, f64):
        # one step from m = v = 0: m_hat = g, v_hat = g^2
        theta, g, lr, wd, eps = 0.5, 0.2, 1e-3, 0.01, 1e-8
        p = Parameter(np.array(theta), name="theta")
        p.grad = np.array(g)
        state = OptimizerState(learning_rate=lr, weight_decay=wd, epsilon=eps)
        adamw_step([p], state)
        expected = theta * (1 - lr * wd) - lr * g / (abs(g) + eps)
        assert abs(p.item() - expected) < 1e-12
        assert state.step_count == 1
        assert p.grad == g

    def test_second_step_by_hand(self, f64):
        p = Parameter(np.array(1.0), name="w")
        state = OptimizerState(learning_rate=0.01, weight_decay=0.0)
        m = v = 0.0
        theta = 1.0
        for t, g in enumerate((0.3, -0.1), start=1):
            p.grad = np.array(g)
            adamw_step([p], state)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            theta -= 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert abs(p.item() - theta) < 1e-12

    def test_missing_grad_names_parameter(self):
        p = Parameter(np.ones(2), name="decoder.head.weight")
        with pytest.raises(ContractError, match="decoder.head.weight"):
            adamw_step([p], OptimizerState())

    def test_schedule(self):
        lr = [step_lr(1e-4, e, (50, 120)) for e in (49, 50, 119, 120)]
        np.testing.assert_allclose(lr, [1e-4, 1e-5, 1e-5, 1e-6], rtol=1e-12)


class Tiny(Module):
    def __init__(self, rng):
        self.fc = Linear(3, 2, rng)
        self.norm = LayerNorm(2)
        self.blocks = [Linear(2, 2, rng), Linear(2, 2, rng, zero_init=True)]


class TestModules:
    def test_parameter_paths(self, rng):
        names = [n for n, _ in Tiny(rng).named_parameters()]
        assert names == [
            "fc.weight", "fc.bias", "norm.gamma", "norm.beta",
            "blocks.0.weight", "blocks.0.bias", "blocks.1.weight", "blocks.1.bias",
        ]
        assert len(set(names)) == len(names)

    def test_state_dict_round_trip(self, rng):
        a, b = Tiny(rng), Tiny(np.random.default_rng(99))
        b.load_state_dict(a.state_dict())
        for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_array_equal(p.data, q.data)

    def test_state_dict_mismatch(self, rng):
        state = Tiny(rng).state_dict()
        state.pop("fc.bias")
        with pytest.raises(ContractError, match="fc.bias"):
            Tiny(rng).load_state_dict(state)

    def test_layernorm_eps(self):
        assert LAYERNORM_EPS == 1e-6


class TestCheckpoint:
    def test_byte_exact_round_trip(self, rng):
        tensors = {"a.w": rng.normal(size=(2, 3)).astype(np.float32), "b": np.arange(4, dtype=np.float32)}
        blob = encode_checkpoint(tensors, {"seed": "3"})
        back, meta = decode_checkpoint(blob)
        assert meta == {"seed": "3"}
        for k in tensors:
            np.testing.assert_array_equal(back[k], tensors[k])
        assert encode_checkpoint(back, meta) == blob

    def test_header_layout(self):
        blob = encode_checkpoint({"w": np.ones((2,), dtype=np.float32)})
        assert blob[:4] == b"UMIF"
        version, count, name_len = struct.unpack("<III", blob[4:16])
        assert (version, count, name_len) == (1, 1, 1)
        assert blob[16:17] == b"w"
        rank, dim = struct.unpack("<IQ", blob[17:29])
        assert (rank, dim) == (1, 2)
        assert np.frombuffer(blob[29:37], "<f4").tolist() == [1.0, 1.0]

    def test_bad_magic(self):
        with pytest.raises(CheckpointError, match="magic"):
            decode_checkpoint(b"NOPE" + bytes(12))

    def test_truncated(self):
        blob = encode_checkpoint({"w": np.ones((3,), dtype=np.float32)})
        with pytest.raises(CheckpointError):
            decode_checkpoint(blob[:-9])
