"""One random instance builder per differentiable op, for finite-difference checks.

Each builder takes a Generator and returns ``(fn, arrays)`` where ``fn`` maps
tensors to a tensor. Inputs stay clear of kinks (relu at 0, clip bounds).
"""
import numpy as np

from daemon_tkg import diffcore as dc
from daemon_tkg.diffcore import Tape, Tensor, backward
from daemon_tkg.gradcheck import max_rel_error, numeric_grad
from daemon_tkg.model import message


def _away_from_zero(rng, shape, gap=0.1):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap, x)


def _readout(rng, shape):
    w = rng.standard_normal(shape)
    return lambda t: dc.mul(t, w)


def _matmul(rng):
    return (lambda a, b: dc.matmul(a, b)), [rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5))]


def _binary(kind):
    def build(rng):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((1, 4))
        if kind == "div":
            b = np.abs(b) + 0.5
        return (lambda x, y: dc.elementwise(kind, x, y)), [a, b]
    return build


def _unary(kind):
    def build(rng):
        if kind in ("log", "sqrt"):
            x = rng.uniform(0.2, 3.0, (3, 4))
        elif kind == "relu":
            x = _away_from_zero(rng, (3, 4))
        else:
            x = rng.standard_normal((3, 4)) * 3
        fn = {"sigmoid": dc.sigmoid, "relu": dc.relu, "log": dc.log, "sqrt": dc.sqrt}[kind]
        return fn, [x]
    return build


def _clip(rng):
    x = rng.uniform(-2, 2, (4, 5))
    x = np.where(np.abs(np.abs(x) - 1.0) < 0.05, x * 0.8, x)
    return (lambda t: dc.clip(t, -1.0, 1.0)), [x]


def _layer_norm(rng):
    return dc.layer_norm, [rng.standard_normal((3, 5)), rng.standard_normal(5), rng.standard_normal(5)]


def _segment(kind):
    def build(rng):
        n, m = 4, 9
        ids = rng.integers(0, n, m)
        return (lambda x: dc.segment_reduce(kind, x, ids, n)), [rng.standard_normal((2, m, 3))]
    return build


def _segment_stats(rng):
    n, m = 4, 9
    ids = rng.integers(0, n, m)
    return (lambda x: dc.segment_stats(("mean", "max", "min", "std"), x, ids, n)), [rng.standard_normal((2, m, 3))]


def _gather(rng):
    idx = rng.integers(0, 5, 7)
    return (lambda x: dc.gather(x, idx)), [rng.standard_normal((2, 5, 3))]


def _take_along(rng):
    idx = rng.integers(0, 6, (3, 8))
    return (lambda x: dc.take_along(x, idx)), [rng.standard_normal((3, 6))]


def _concat(rng):
    return (lambda a, b: dc.concat([a, b])), [rng.standard_normal((2, 3)), rng.standard_normal((2, 4))]


def _slice(rng):
    return (lambda x: dc.slice_last(x, 1, 4)), [rng.standard_normal((3, 5))]


def _reshape(rng):
    return (lambda x: dc.reshape(x, (6, 2))), [rng.standard_normal((3, 4))]


def _transpose(rng):
    return (lambda x: dc.transpose(x, (2, 0, 1))), [rng.standard_normal((2, 3, 4))]


def _sum(rng):
    return (lambda x: dc.sum(x, axis=1, keepdims=True)), [rng.standard_normal((3, 4))]


def _mean(rng):
    return (lambda x: dc.mean(x, axis=0)), [rng.standard_normal((3, 4))]


def _message(variant):
    def build(rng):
        return (lambda h, w: message(h, w, variant)), [rng.standard_normal((3, 6)), rng.standard_normal((3, 6))]
    return build


OP_CASES = {
    "matmul": _matmul,
    **{k: _binary(k) for k in ("add", "sub", "mul", "div")},
    **{k: _unary(k) for k in ("sigmoid", "relu", "log", "sqrt")},
    "clip": _clip,
    "layer_norm": _layer_norm,
    **{f"segment_{k}": _segment(k) for k in ("sum", "mean", "max", "min", "std")},
    "segment_stats": _segment_stats,
    "gather": _gather,
    "take_along": _take_along,
    "concat": _concat,
    "slice_last": _slice,
    "reshape": _reshape,
    "transpose": _transpose,
    "sum": _sum,
    "mean": _mean,
    **{f"message_{k}": _message(k) for k in ("multiply", "translate", "rotate")},
}


def op_gradient_error(name: str, seed: int) -> float:
    """Worst relative error of tape vs central differences, with a random linear readout."""
    rng = np.random.default_rng(seed)
    fn, arrays = OP_CASES[name](rng)
    out_shape = fn(*[Tensor(a) for a in arrays]).shape
    weights = rng.standard_normal(out_shape)

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = dc.sum(dc.mul(fn(*leaves), weights))
    grads = backward(loss, tape, wrt=leaves)
    worst = 0.0
    for i, leaf in enumerate(leaves):
        def f(x, i=i):
            args = [Tensor(a) for a in arrays]
            args[i] = Tensor(x)
            return float((fn(*args).value * weights).sum())
        worst = max(worst, max_rel_error(grads[leaf], numeric_grad(f, arrays[i])))
    return worst
