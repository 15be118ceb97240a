import numpy as np
import pytest

from aedet import serialize
from aedet.errors import CheckpointError, ConfigError, NumericError, UsageError
from aedet.gradcheck import finite_diff_check
from aedet.tensor import (
    ComputationTape,
    Tensor,
    backward,
    channel_mean,
    conv2d,
    elementwise_add,
    elementwise_mul,
    leaky_relu,
    max_pool2d,
    scalar_mul,
    tensor_sum,
)

from oracles import conv2d_loops, max_pool_loops

F64 = np.float64


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=F64), requires_grad=grad)


# --- conv2d -----------------------------------------------------------------


def test_conv_identity_kernel():
    x = t64(np.arange(9.0).reshape(1, 1, 3, 3))
    out = conv2d(x, t64(np.ones((1, 1, 1, 1))), t64([0.0]))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_zero_kernel():
    x = t64(np.random.default_rng(0).normal(size=(2, 3, 5, 5)))
    out = conv2d(x, t64(np.zeros((4, 3, 3, 3))), t64(np.zeros(4)), 1, 1)
    assert out.shape == (2, 4, 5, 5)
    assert not out.data.any()


@pytest.mark.parametrize(
    "shape,oc,k,stride,pad",
    [((1, 2, 5, 5), 3, 3, 1, 1), ((2, 4, 8, 8), 3, 3, 2, 1), ((2, 3, 7, 6), 2, 3, 2, 0), ((1, 4, 8, 8), 5, 1, 1, 0)],
)
def test_conv_matches_loops(shape, oc, k, stride, pad):
    rng = np.random.default_rng(1)
    x = rng.normal(size=shape)
    w = rng.normal(size=(oc, shape[1], k, k))
    b = rng.normal(size=oc)
    got = conv2d(t64(x), t64(w), t64(b), stride, pad).data
    want = conv2d_loops(x, w, b, stride, pad)
    assert got.shape == want.shape
    np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-12)


def test_conv_shape_errors():
    x = t64(np.zeros((1, 2, 4, 4)))
    with pytest.raises(ConfigError):
        conv2d(x, t64(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ConfigError):
        conv2d(x, t64(np.zeros((1, 2, 5, 5))))
    with pytest.raises(ConfigError):
        conv2d(x, t64(np.zeros((1, 2, 3, 3))), stride=0)


def test_conv_non_finite_is_numeric_error():
    x = t64(np.full((1, 1, 3, 3), np.inf))
    with pytest.raises(NumericError):
        conv2d(x, t64(np.ones((1, 1, 1, 1))))


# --- max pool ---------------------------------------------------------------


def test_max_pool_constant():
    out = max_pool2d(t64(np.full((1, 2, 4, 4), 3.5)), 2, 2)
    np.testing.assert_array_equal(out.data, np.full((1, 2, 2, 2), 3.5))


def test_max_pool_single_window():
    out = max_pool2d(t64([[[[1.0, 2.0], [3.0, 4.0]]]]), 2, 2)
    assert out.data.reshape(-1).tolist() == [4.0]


def test_max_pool_matches_loops():
    x = np.random.default_rng(2).normal(size=(1, 1, 6, 6))
    np.testing.assert_array_equal(max_pool2d(t64(x), 2, 2).data, max_pool_loops(x, 2, 2))
    x = np.random.default_rng(3).normal(size=(2, 3, 7, 7))
    np.testing.assert_array_equal(max_pool2d(t64(x), 3, 2).data, max_pool_loops(x, 3, 2))


def test_max_pool_tie_goes_to_first():
    x = t64(np.ones((1, 1, 2, 2)), grad=True)
    backward(tensor_sum(max_pool2d(x, 2, 2)))
    assert x.grad.reshape(-1).tolist() == [1.0, 0.0, 0.0, 0.0]


def test_max_pool_window_too_large():
    with pytest.raises(ConfigError):
        max_pool2d(t64(np.zeros((1, 1, 2, 2))), 3)


# --- elementwise ops --------------------------------------------------------


def test_leaky_relu_values():
    x = t64([[[[3.0, -2.0, 0.0]]]])
    assert leaky_relu(x, 0.1).data.reshape(-1).tolist() == [3.0, pytest.approx(-0.2), 0.0]
    pos = t64(np.abs(np.random.default_rng(0).normal(size=(2, 2, 3, 3))) + 0.1)
    np.testing.assert_array_equal(leaky_relu(pos, 0.3).data, pos.data)
    with pytest.raises(ConfigError):
        leaky_relu(pos, 1.0)


def test_add_examples():
    a = t64([1.0, 2.0])
    np.testing.assert_array_equal(elementwise_add(a, t64([3.0, 4.0])).data, [4.0, 6.0])
    np.testing.assert_array_equal(elementwise_add(a, t64([0.0, 0.0])).data, a.data)
    np.testing.assert_array_equal(elementwise_add(a, scalar_mul(a, -1.0)).data, [0.0, 0.0])


def test_add_channel_broadcast_and_grad():
    a = t64(np.ones((2, 3, 2, 2)), grad=True)
    b = t64(np.ones((2, 1, 2, 2)), grad=True)
    backward(tensor_sum(elementwise_add(a, b)))
    np.testing.assert_array_equal(a.grad, np.ones((2, 3, 2, 2)))
    np.testing.assert_array_equal(b.grad, np.full((2, 1, 2, 2), 3.0))


def test_add_incompatible():
    with pytest.raises(ConfigError):
        elementwise_add(t64(np.ones((1, 2, 2, 2))), t64(np.ones((1, 3, 2, 2))))
    with pytest.raises(ConfigError):
        elementwise_add(t64(np.ones((1, 1, 2, 2))), t64(np.ones((1, 3, 2, 2))))


def test_scalar_mul_examples():
    a = t64([2.0, -3.0])
    assert scalar_mul(a, 0.5).data.tolist() == [1.0, -1.5]
    assert not scalar_mul(a, 0.0).data.any()
    np.testing.assert_array_equal(scalar_mul(a, 1.0).data, a.data)
    with pytest.raises(NumericError):
        scalar_mul(a, float("nan"))


def test_channel_mean_examples():
    a = t64(np.array([2.0, 4.0]).reshape(1, 2, 1, 1))
    assert channel_mean(a).data.reshape(-1).tolist() == [3.0]
    one = t64(np.random.default_rng(0).normal(size=(2, 1, 3, 3)))
    np.testing.assert_array_equal(channel_mean(one).data, one.data)
    const = t64(np.full((1, 5, 2, 2), 0.7))
    np.testing.assert_allclose(channel_mean(const).data, 0.7, rtol=0, atol=1e-15)


# --- backward ---------------------------------------------------------------


def test_backward_sum_is_ones():
    x = t64(np.random.default_rng(0).normal(size=(2, 3)), grad=True)
    backward(tensor_sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_square():
    x = t64([1.0, 2.0], grad=True)
    backward(tensor_sum(elementwise_mul(x, x)))
    assert x.grad.tolist() == [2.0, 4.0]


def test_backward_fan_out_accumulates():
    x = t64([1.0, -1.0, 3.0], grad=True)
    backward(tensor_sum(x))
    single = x.grad.copy()
    x.zero_grad()
    backward(tensor_sum(elementwise_add(x, x)))
    np.testing.assert_array_equal(x.grad, 2 * single)


def test_backward_on_detached_is_usage_error():
    x = t64([1.0, 2.0])
    with pytest.raises(UsageError):
        backward(tensor_sum(x))
    with pytest.raises(UsageError):
        backward(t64([1.0, 2.0], grad=True))


def test_tape_is_topological_and_visits_once():
    x = t64(np.ones((1, 2, 3, 3)), grad=True)
    h = leaky_relu(x, 0.1)
    y = elementwise_add(h, h)
    loss = tensor_sum(elementwise_add(y, channel_mean(h)))
    tape = ComputationTape.record(loss)
    pos = {id(n): k for k, n in enumerate(tape.nodes)}
    assert len(pos) == len(tape.nodes)
    for n in tape.nodes:
        for p in n._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(n)]
    assert tape.nodes[-1] is loss


def _conv_chain(seed):
    rng = np.random.default_rng(seed)
    w = t64(rng.normal(size=(3, 2, 3, 3)) * 0.5, grad=True)
    b = t64(rng.normal(size=3), grad=True)
    x = t64(rng.normal(size=(2, 2, 6, 6)), grad=True)
    return x, w, b


def test_backward_deterministic():
    grads = []
    for _ in range(2):
        x, w, b = _conv_chain(7)
        out = max_pool2d(leaky_relu(conv2d(x, w, b, 1, 1), 0.1), 2, 2)
        backward(tensor_sum(elementwise_mul(out, out)))
        grads.append((x.grad.copy(), w.grad.copy(), b.grad.copy()))
    for g0, g1 in zip(*grads):
        assert g0.tobytes() == g1.tobytes()


def test_forward_deterministic_float32():
    outs = []
    for _ in range(2):
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=(4, 3, 16, 16)).astype(np.float32))
        w = Tensor(rng.normal(size=(8, 3, 3, 3)).astype(np.float32))
        outs.append(leaky_relu(conv2d(x, w, None, 2, 1), 0.1).data.tobytes())
    assert outs[0] == outs[1]


# --- finite differences ------------------------------------------------------


def test_fd_sum_exact():
    x = np.random.default_rng(0).normal(size=(2, 3, 4, 4))
    assert finite_diff_check(tensor_sum, x, 1e-4) < 1e-10


def test_fd_sum_of_squares():
    x = np.random.default_rng(1).normal(size=(2, 3, 3, 3))
    assert finite_diff_check(lambda t: tensor_sum(elementwise_mul(t, t)), x, 1e-6) < 1e-6


def test_fd_conv_leaky_chain():
    rng = np.random.default_rng(2)
    w = t64(rng.normal(size=(3, 2, 3, 3)))
    b = t64(rng.normal(size=3))
    x = rng.normal(size=(1, 2, 5, 5))
    pre = conv2d(t64(x), w, b, 1, 1).data
    assert np.abs(pre).min() > 1e-3
    err = finite_diff_check(lambda t: tensor_sum(leaky_relu(conv2d(t, w, b, 1, 1), 0.1)), x, 1e-6)
    assert err < 1e-4


def test_fd_rejects_bad_eps():
    with pytest.raises(ConfigError):
        finite_diff_check(tensor_sum, np.ones(3), 1e-2)


# --- serialization ------------------------------------------------------------


def test_aetn_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a": rng.normal(size=(2, 3)).astype(np.float32), "bé": np.zeros((0,), np.float32), "s": np.float32(2.5) * np.ones(())}
    path = tmp_path / "t.aetn"
    serialize.save_tensors(path, tensors)
    back = serialize.load_tensors(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].dtype == np.float32
        assert back[k].tobytes() == np.asarray(tensors[k], np.float32).tobytes()
        assert back[k].shape == np.asarray(tensors[k]).shape
    raw = path.read_bytes()
    assert raw[:4] == b"AETN"
    assert int.from_bytes(raw[4:8], "little") == serialize.FORMAT_VERSION


def test_aetn_faults(tmp_path):
    buf = serialize.dumps({"w": np.ones((2, 2), np.float32)})
    with pytest.raises(CheckpointError):
        serialize.loads(b"XXXX" + buf[4:])
    with pytest.raises(CheckpointError):
        serialize.loads(buf[:-3])
    bad_version = buf[:4] + (99).to_bytes(4, "little") + buf[8:]
    with pytest.raises(CheckpointError):
        serialize.loads(bad_version)
