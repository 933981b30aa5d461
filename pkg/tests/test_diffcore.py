import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from op_cases import OP_CASES, op_gradient_error

from daemon_tkg import diffcore as dc
from daemon_tkg.diffcore import Tape, Tensor, backward
from daemon_tkg.gradcheck import max_rel_error, numeric_grad

SEEDS = range(20)


def tape_grads(fn, *arrays):
    """Gradient of sum(fn(*tensors)) w.r.t. every input array."""
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = dc.sum(fn(*leaves))
    g = backward(loss, tape, wrt=leaves)
    return [g[t] for t in leaves]


def fd_grads(fn, *arrays):
    out = []
    for i in range(len(arrays)):
        def f(x, i=i):
            args = list(arrays)
            args[i] = x
            return fn(*[Tensor(a) for a in args]).value.sum()
        out.append(numeric_grad(f, arrays[i]))
    return out


def assert_grads_match(fn, *arrays, tol=1e-4):
    for a, n in zip(tape_grads(fn, *arrays), fd_grads(fn, *arrays)):
        assert max_rel_error(a, n) < tol


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    out = dc.matmul(np.eye(2), np.array([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.value, [[3.0], [4.0]])


def test_matmul_hand():
    assert dc.matmul([[1.0, 2.0]], [[3.0], [4.0]]).value.tolist() == [[11.0]]


def test_matmul_shape_error_names_shapes():
    with pytest.raises(dc.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        dc.matmul(np.ones((2, 3)), np.ones((2, 3)))


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_gradient(seed):
    rng = np.random.default_rng(seed)
    assert_grads_match(dc.matmul, rng.standard_normal((5, 7)), rng.standard_normal((7, 3)))


def test_batched_matmul_gradient():
    rng = np.random.default_rng(1)
    assert_grads_match(dc.matmul, rng.standard_normal((2, 4, 3)), rng.standard_normal((3, 5)))


# ---------------------------------------------------------------- elementwise

def test_elementwise_hand():
    assert dc.elementwise("mul", [1.0, 2.0], [3.0, 4.0]).value.tolist() == [3.0, 8.0]
    x = np.array([1.5, -2.0, 7.0])
    np.testing.assert_array_equal(dc.elementwise("mul", x, np.ones(3)).value, x)


def test_elementwise_bad_broadcast():
    with pytest.raises(dc.DimensionError):
        dc.add(np.ones((2, 3)), np.ones((4,)))


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("kind", ["add", "sub", "mul"])
def test_elementwise_gradient(seed, kind):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
    assert_grads_match(lambda x, y: dc.elementwise(kind, x, y), a, b)


@pytest.mark.parametrize("seed", range(5))
def test_broadcast_gradient_sums_over_leading_axes(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((3, 4, 6)), rng.standard_normal(6)
    assert_grads_match(dc.mul, a, b)
    (gb,) = tape_grads(lambda y: dc.add(a, y), b)
    np.testing.assert_array_equal(gb, np.full(6, 12.0))


def test_div_gradient():
    rng = np.random.default_rng(3)
    assert_grads_match(dc.div, rng.standard_normal((3, 4)), rng.uniform(0.5, 2.0, (3, 4)))


# ---------------------------------------------------------------- activations

def test_activation_values():
    assert dc.activation("sigmoid", 0.0).value == 0.5
    assert dc.activation("relu", -3.0).value == 0.0
    assert dc.activation("relu", 3.0).value == 3.0


def test_sigmoid_stable_for_large_negative():
    y = dc.sigmoid(np.array([-800.0, 800.0])).value
    assert np.all(np.isfinite(y))
    assert y[0] == 0.0 and y[1] == 1.0


def test_log_domain_error():
    with pytest.raises(dc.DomainError):
        dc.log(np.array([1.0, 0.0]))


@pytest.mark.parametrize("seed", SEEDS)
def test_sigmoid_gradient(seed):
    rng = np.random.default_rng(seed)
    assert_grads_match(dc.sigmoid, rng.standard_normal((3, 5)) * 3)


@pytest.mark.parametrize("seed", SEEDS)
def test_log_and_relu_gradient(seed):
    rng = np.random.default_rng(seed)
    assert_grads_match(dc.log, rng.uniform(0.1, 3.0, (4, 4)))
    x = rng.standard_normal((4, 4))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    assert_grads_match(dc.relu, x)


# ---------------------------------------------------------------- layer norm

def test_layer_norm_constant_row_is_zero():
    out = dc.layer_norm(np.ones((1, 4)), np.ones(4), np.zeros(4))
    np.testing.assert_array_equal(out.value, np.zeros((1, 4)))


def test_layer_norm_two_point():
    out = dc.layer_norm(np.array([[1.0, -1.0]]), np.ones(2), np.zeros(2)).value
    np.testing.assert_allclose(out, [[1.0, -1.0]], atol=1e-5)


@pytest.mark.parametrize("seed", SEEDS)
def test_layer_norm_gradient(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 8))
    gain, bias = rng.standard_normal(8), rng.standard_normal(8)
    w = rng.standard_normal((3, 8))  # random readout so the sum is not trivially constant
    assert_grads_match(lambda a, g, b: dc.mul(dc.layer_norm(a, g, b), w), x, gain, bias)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_layer_norm_moments(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((5, 16)) * rng.uniform(0.5, 10)
    y = dc.layer_norm(x, np.ones(16), np.zeros(16)).value
    assert np.all(np.abs(y.mean(axis=1)) < 1e-10)
    var = x.var(axis=1)
    np.testing.assert_allclose(y.var(axis=1), var / (var + dc.LN_EPS), rtol=1e-10)


# ---------------------------------------------------------------- segment reduce

def test_segment_sum_hand():
    out = dc.segment_reduce("sum", [[1.0, 2.0], [3.0, 4.0]], [0, 0], 1)
    assert out.value.tolist() == [[4.0, 6.0]]


def test_segment_std_single_is_zero():
    out = dc.segment_reduce("std", [[1.0, 2.0], [3.0, 4.0]], [0, 1], 3)
    np.testing.assert_array_equal(out.value, np.zeros((3, 2)))


@pytest.mark.parametrize("kind", ["sum", "mean", "max", "min", "std"])
def test_segment_empty_segments_zero(kind):
    out = dc.segment_reduce(kind, [[1.0, -2.0], [5.0, 4.0]], [2, 2], 4).value
    np.testing.assert_array_equal(out[[0, 1, 3]], 0.0)


def test_segment_id_out_of_range():
    with pytest.raises(IndexError):
        dc.segment_reduce("sum", np.ones((2, 2)), [0, 3], 3)


@given(st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_segment_sum_matches_naive_loop_bitwise(seed):
    rng = np.random.default_rng(seed)
    n, e = int(rng.integers(1, 6)), int(rng.integers(0, 15))
    m = rng.standard_normal((e, 3))
    ids = rng.integers(0, n, e)
    naive = np.zeros((n, 3))
    for row, s in zip(m, ids):
        naive[s] = naive[s] + row
    np.testing.assert_array_equal(dc.segment_reduce("sum", m, ids, n).value, naive)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("kind", ["sum", "mean", "max", "min", "std"])
def test_segment_gradient(seed, kind):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((2, 9, 4))
    ids = rng.integers(0, 4, 9)
    w = rng.standard_normal((2, 4, 4))
    assert_grads_match(lambda x: dc.mul(dc.segment_reduce(kind, x, ids, 4), w), m)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("kind", ["max", "min"])
def test_segment_extremum_matches_naive_loop(seed, kind):
    rng = np.random.default_rng(seed)
    n, m = 6, 11
    ids = rng.integers(0, n, m)
    x = rng.standard_normal((2, m, 3))
    pick = max if kind == "max" else min
    naive = np.zeros((2, n, 3))
    for b in range(2):
        for v in range(n):
            for j in range(3):
                vals = [x[b, e, j] for e in range(m) if ids[e] == v]
                naive[b, v, j] = pick(vals) if vals else 0.0
    np.testing.assert_array_equal(dc.segment_reduce(kind, x, ids, n).value, naive)


@pytest.mark.parametrize("seed", SEEDS)
def test_segment_stats_equals_separate_reductions(seed):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((2, 9, 3))
    ids = rng.integers(0, 5, 9)
    kinds = ("mean", "max", "min", "std", "sum")
    fused = dc.segment_stats(kinds, m, ids, 5).value
    separate = np.concatenate([dc.segment_reduce(k, m, ids, 5).value for k in kinds], axis=-1)
    np.testing.assert_array_equal(fused, separate)


def test_segment_max_ties_route_to_first():
    m = Tensor(np.array([[1.0], [3.0], [3.0], [2.0]]), requires_grad=True)
    with Tape() as tape:
        loss = dc.sum(dc.segment_reduce("max", m, [0, 0, 0, 1], 2))
    g = backward(loss, tape)[m]
    assert g[:, 0].tolist() == [0.0, 1.0, 0.0, 1.0]


def test_segment_min_ties_unsorted_ids():
    m = Tensor(np.array([[1.0], [0.0], [1.0], [0.0]]), requires_grad=True)
    with Tape() as tape:
        loss = dc.sum(dc.segment_reduce("min", m, [1, 0, 1, 0], 2))
    g = backward(loss, tape)[m]
    assert g[:, 0].tolist() == [1.0, 1.0, 0.0, 0.0]


# ---------------------------------------------------------------- shape ops

@pytest.mark.parametrize("seed", range(5))
def test_shape_op_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 5, 3))
    w = rng.standard_normal((2, 4, 3))
    assert_grads_match(lambda a: dc.mul(dc.gather(a, [4, 0, 4, 1]), w), x)
    w2 = rng.standard_normal((3, 5, 2))
    assert_grads_match(lambda a: dc.mul(dc.transpose(a, (2, 1, 0)), w2), x)
    w_s = rng.standard_normal((2, 5, 2))
    assert_grads_match(lambda a: dc.mul(dc.slice_last(a, 1, 3), w_s), x)
    y = rng.standard_normal((2, 5, 2))
    w3 = rng.standard_normal((2, 5, 5))
    assert_grads_match(lambda a, b: dc.mul(dc.concat([a, b]), w3), x, y)
    idx = rng.integers(0, 3, (2, 5, 7))
    w4 = rng.standard_normal((2, 5, 7))
    assert_grads_match(lambda a: dc.mul(dc.take_along(a, idx), w4), x)
    w5 = rng.standard_normal((2, 1, 3))
    assert_grads_match(lambda a: dc.mul(dc.mean(a, axis=1, keepdims=True), w5), x)
    w6 = rng.standard_normal((5, 6))
    assert_grads_match(lambda a: dc.mul(dc.reshape(a, (5, 6)), w6), x)


def test_clip_gradient_masks_outside():
    x = Tensor(np.array([-1.0, 0.5, 2.0]), requires_grad=True)
    with Tape() as tape:
        loss = dc.sum(dc.clip(x, 0.0, 1.0))
    assert backward(loss, tape)[x].tolist() == [0.0, 1.0, 0.0]


# ---------------------------------------------------------------- backward contract

def test_backward_sum_is_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with Tape() as tape:
        loss = dc.sum(x)
    np.testing.assert_array_equal(backward(loss, tape)[x], np.ones((2, 3)))


def test_backward_square():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = dc.sum(x * x)
    assert backward(loss, tape)[x].tolist() == [2.0, 4.0]


def test_backward_twice_is_error():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = dc.sum(x * x)
    backward(loss, tape)
    with pytest.raises(dc.ContractError):
        backward(loss, tape)


def test_backward_nonscalar_is_error():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(dc.ContractError):
        backward(y, tape)


def test_tape_is_topological():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = dc.sigmoid(x * x + x)
        dc.sum(y)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    for i, node in enumerate(tape.nodes):
        assert all(pos.get(id(p), -1) < i for p in node.parents)


def test_no_recording_without_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    y = x * x
    assert not y.requires_grad and y.parents == ()


def test_replay_is_bit_identical():
    def run():
        rng = np.random.default_rng(11)
        x = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
        w = Tensor(rng.standard_normal((5, 3)), requires_grad=True)
        with Tape() as tape:
            h = dc.layer_norm(dc.matmul(x, w), np.ones(3), np.zeros(3))
            loss = dc.sum(dc.sigmoid(h))
        g = backward(loss, tape)
        return loss.value, g[x], g[w]

    for a, b in zip(run(), run()):
        np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------- every op, 20 seeds

@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_every_op_gradient(name, seed):
    assert op_gradient_error(name, seed) < 1e-4
