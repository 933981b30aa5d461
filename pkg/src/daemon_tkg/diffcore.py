"""Dense float64 arrays with a straight-line reverse-mode tape.

Usage::

    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = dc.sum(dc.mul(x, x))
    grads = backward(y, tape)      # {x: array([2., 2., 2.])}

Ops executed outside an active tape, or on inputs that do not require
gradients, are evaluated eagerly and not recorded.
"""
from __future__ import annotations

import functools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

STD_EPS = 1e-8
LN_EPS = 1e-5

_local = threading.local()


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class Tensor:
    """Immutable float64 array node. Leaves with ``requires_grad`` are parameters."""

    __slots__ = ("value", "requires_grad", "parents", "vjp", "name", "__weakref__")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.vjp: Callable[[np.ndarray], tuple] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all routed through the recorded ops below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


class Tape:
    """The computation record: nodes in execution (topological) order."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.consumed = False
        self._prev: Tape | None = None

    def __enter__(self) -> Tape:
        self._prev = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Tape | None:
    return getattr(_local, "tape", None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(value: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor(value)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.vjp = vjp
        tape.nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """``a[..., k] @ b[k, n]``; ``b`` must be a matrix.

    For inputs with three or more axes the leading axis is treated as a batch of
    independent items: each item's result is bit-identical however many are stacked.
    """
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if bv.ndim != 2 or av.ndim < 1 or av.shape[-1] != bv.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")

    k, n = bv.shape
    a2 = av.reshape(-1, k)
    bt = np.ascontiguousarray(bv.T)

    def vjp(g):
        g2 = g.reshape(-1, n)
        return (g2 @ bt).reshape(av.shape), a2.T @ g2

    if av.ndim >= 3:
        # BLAS picks kernels by row count, so a slice of a big product need not match
        # the same rows computed alone; one call per leading index keeps batch items isolated.
        out = np.empty(av.shape[:-1] + (n,))
        for i in range(av.shape[0]):
            out[i] = (np.ascontiguousarray(av[i]).reshape(-1, k) @ bv).reshape(out.shape[1:])
    else:
        out = (a2 @ bv).reshape(av.shape[:-1] + (n,))
    return _record(out, (a, b), vjp)


# ---------------------------------------------------------------- elementwise

def _binary(a, b, fwd, vjp_factory) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = fwd(a.value, b.value)
    except ValueError:
        raise DimensionError(f"shapes {a.shape} and {b.shape} do not broadcast") from None
    if not (a.requires_grad or b.requires_grad) or active_tape() is None:
        return Tensor(out)
    ga_fn, gb_fn = vjp_factory(a.value, b.value, out)
    sa, sb = a.value.shape, b.value.shape

    def vjp(g):
        return _unbroadcast(ga_fn(g), sa), _unbroadcast(gb_fn(g), sb)

    return _record(out, (a, b), vjp)


def add(a, b) -> Tensor:
    return _binary(a, b, np.add, lambda x, y, o: (lambda g: g, lambda g: g))


def sub(a, b) -> Tensor:
    return _binary(a, b, np.subtract, lambda x, y, o: (lambda g: g, lambda g: -g))


def mul(a, b) -> Tensor:
    return _binary(a, b, np.multiply, lambda x, y, o: (lambda g: g * y, lambda g: g * x))


def div(a, b) -> Tensor:
    return _binary(
        a, b, np.divide,
        lambda x, y, o: (lambda g: g / y, lambda g: -g * o / y),
    )


def elementwise(op_kind: str, a, b) -> Tensor:
    try:
        fn = {"mul": mul, "add": add, "sub": sub, "div": div}[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    return fn(a, b)


# ---------------------------------------------------------------- activations

def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _stable_sigmoid(x.value)
    return _record(y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.value > 0
    return _record(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.value <= 0):
        raise DomainError("log of non-positive value")
    xv = x.value
    return _record(np.log(xv), (x,), lambda g: (g / xv,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.value < 0):
        raise DomainError("sqrt of negative value")
    y = np.sqrt(x.value)
    return _record(y, (x,), lambda g: (g / (2.0 * y),))


def activation(kind: str, x) -> Tensor:
    try:
        fn = {"sigmoid": sigmoid, "relu": relu, "log": log}[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


def clip(x, lo: float | None = None, hi: float | None = None) -> Tensor:
    x = as_tensor(x)
    y = np.clip(x.value, lo, hi)
    inside = y == x.value
    return _record(y, (x,), lambda g: (g * inside,))


# ---------------------------------------------------------------- normalization

def layer_norm(x, gain, bias, eps: float = LN_EPS) -> Tensor:
    """Normalize the last axis (biased variance), then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}, {bias.shape} vs last dim {d}")
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gain.value

    def vjp(g):
        dxhat = g * gv
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(xhat * gv + bias.value, (x, gain, bias), vjp)


# ---------------------------------------------------------------- segment reductions

class _Segments:
    """Edges grouped by segment, in original edge order within each segment.

    ``rounds[k]`` holds the k-th edge of every segment having more than k edges,
    so per-round fancy indexing never repeats a segment.
    """

    __slots__ = ("n", "count", "safe", "rounds", "order", "starts", "nonempty")

    def __init__(self, ids: np.ndarray, n: int):
        if ids.size and (ids.min() < 0 or ids.max() >= n):
            raise IndexError(f"segment id out of range [0, {n})")
        self.n = n
        self.count = np.bincount(ids, minlength=n)
        self.safe = np.maximum(self.count, 1).astype(np.float64)[:, None]
        order = np.argsort(ids, kind="stable")
        sid = ids[order]
        starts = np.concatenate([[0], np.cumsum(self.count)])[:-1]
        self.order = order
        self.nonempty = self.count > 0
        self.starts = starts[self.nonempty]
        rank = np.arange(len(ids)) - starts[sid]
        self.rounds = [(order[rank == k], sid[rank == k]) for k in range(int(rank.max(initial=-1)) + 1)]

    def sum(self, values: np.ndarray) -> np.ndarray:
        out = np.zeros(values.shape[:-2] + (self.n, values.shape[-1]))
        # same addition order as a naive per-edge accumulation loop
        for edges, segs in self.rounds:
            out[..., segs, :] += values[..., edges, :]
        return out

    def extremum_value(self, values: np.ndarray, largest: bool) -> np.ndarray:
        """Per-segment max/min, without locating the attaining edge."""
        out = np.zeros(values.shape[:-2] + (self.n, values.shape[-1]))
        if self.starts.size:
            ufunc = np.maximum if largest else np.minimum
            out[..., self.nonempty, :] = ufunc.reduceat(values[..., self.order, :], self.starts, axis=-2)
        return out

    def extremum(self, values: np.ndarray, largest: bool) -> tuple[np.ndarray, np.ndarray]:
        """Per-segment max/min and, per output entry, the first edge attaining it."""
        out = np.zeros(values.shape[:-2] + (self.n, values.shape[-1]))
        arg = np.zeros(out.shape, dtype=np.int64)
        for k, (edges, segs) in enumerate(self.rounds):
            cand = values[..., edges, :]
            if k == 0:
                out[..., segs, :] = cand
                arg[..., segs, :] = edges[:, None]
                continue
            cur = out[..., segs, :]
            better = cand > cur if largest else cand < cur
            out[..., segs, :] = np.where(better, cand, cur)
            arg[..., segs, :] = np.where(better, edges[:, None], arg[..., segs, :])
        return out, arg


@functools.lru_cache(maxsize=256)
def _cached_segments(key: bytes, n: int) -> _Segments:
    return _Segments(np.frombuffer(key, dtype=np.int64), n)


def _segments(ids: np.ndarray, n: int) -> _Segments:
    # the same snapshot is reduced several times per layer; reuse its grouping
    return _cached_segments(np.ascontiguousarray(ids, dtype=np.int64).tobytes(), n)


def _scatter_rows(values: np.ndarray, ids: np.ndarray, n: int) -> np.ndarray:
    return _segments(ids, n).sum(values)


def _reduce(kind: str, mv: np.ndarray, ids: np.ndarray, seg: _Segments, memo: dict):
    """(value, vjp) of one reduction; ``memo`` shares segment sums between kinds."""
    safe = seg.safe

    def mean():
        if "mean" not in memo:
            memo["mean"] = seg.sum(mv) / safe
        return memo["mean"]

    if kind == "sum":
        return seg.sum(mv), lambda g: g[..., ids, :]

    if kind == "mean":
        return mean(), lambda g: (g / safe)[..., ids, :]

    if kind in ("max", "min"):
        largest = kind == "max"
        nonempty = seg.nonempty

        def vjp(g):
            gm = np.zeros_like(mv)
            if ids.size:
                _, arg = seg.extremum(mv, largest)
                # each edge is the arg of at most one (segment, feature) entry
                lead = np.indices(arg.shape, sparse=True)
                gm[(*lead[:-2], arg[..., nonempty, :], lead[-1])] = g[..., nonempty, :]
            return gm

        return seg.extremum_value(mv, largest), vjp

    if kind == "std":
        dev = mv - mean()[..., ids, :]
        std = np.sqrt(seg.sum(dev * dev) / safe)
        denom = (safe * np.maximum(std, STD_EPS))[..., ids, :]
        return std, lambda g: g[..., ids, :] * dev / denom

    raise ValueError(f"unknown segment reduction {kind!r}")


def _segment_inputs(messages, segment_ids, num_segments: int):
    m = as_tensor(messages)
    ids = np.asarray(segment_ids, dtype=np.int64)
    if m.value.ndim < 2 or ids.shape != (m.value.shape[-2],):
        raise DimensionError(f"segment ids {ids.shape} do not match messages {m.value.shape}")
    return m, ids, _segments(ids, num_segments)


def segment_reduce(kind: str, messages, segment_ids, num_segments: int) -> Tensor:
    """Reduce rows (axis -2) of ``messages`` into ``num_segments`` groups.

    Empty segments give zero rows. ``std`` is the population standard deviation;
    its gradient divides by ``max(std, STD_EPS)``.
    """
    m, ids, seg = _segment_inputs(messages, segment_ids, num_segments)
    out, vjp = _reduce(kind, m.value, ids, seg, {})
    return _record(out, (m,), lambda g: (vjp(g),))


def segment_stats(kinds: Sequence[str], messages, segment_ids, num_segments: int) -> Tensor:
    """``segment_reduce`` for each kind, concatenated on the last axis.

    Values are identical to the separate reductions; the segment means are computed once.
    """
    m, ids, seg = _segment_inputs(messages, segment_ids, num_segments)
    memo: dict = {}
    parts = [_reduce(k, m.value, ids, seg, memo) for k in kinds]
    d = m.value.shape[-1]

    def vjp(g):
        gm = np.zeros_like(m.value)
        for i, (_, fn) in enumerate(parts):
            gm += fn(g[..., i * d:(i + 1) * d])
        return (gm,)

    return _record(np.concatenate([v for v, _ in parts], axis=-1), (m,), vjp)


# ---------------------------------------------------------------- indexing / shape

def gather(x, index) -> Tensor:
    """Select rows along axis -2: ``x[..., index, :]``."""
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    xv = x.value
    n = xv.shape[-2]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather index out of range [0, {n})")

    def vjp(g):
        return (_scatter_rows(g, idx, n),)

    return _record(xv[..., idx, :], (x,), vjp)


def take_along(x, index) -> Tensor:
    """``np.take_along_axis(x, index, axis=-1)``."""
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    xv = x.value

    def vjp(g):
        out = np.zeros_like(xv)
        lead = np.indices(idx.shape, sparse=True)[:-1]
        np.add.at(out, (*lead, idx), g)
        return (out,)

    return _record(np.take_along_axis(xv, idx, axis=-1), (x,), vjp)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(x) for x in xs]
    vals = [t.value for t in ts]
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _record(np.concatenate(vals, axis=axis), ts, vjp)


def slice_last(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    xv = x.value

    def vjp(g):
        out = np.zeros_like(xv)
        out[..., start:stop] = g
        return (out,)

    return _record(xv[..., start:stop], (x,), vjp)


def reshape(x, shape: Iterable[int]) -> Tensor:
    x = as_tensor(x)
    orig = x.shape
    return _record(x.value.reshape(tuple(shape)), (x,), lambda g: (g.reshape(orig),))


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _record(np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inv),))


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.sum(x.value, axis=axis, keepdims=keepdims), (x,), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


# ---------------------------------------------------------------- reverse pass

def backward(loss: Tensor, tape: Tape, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` w.r.t. every leaf reached (or each of ``wrt``).

    A tape may be consumed once.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise ContractError("tape already consumed by a previous backward pass")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    leaves: dict[int, Tensor] = {}
    if not loss.parents and loss.requires_grad:
        leaves[id(loss)] = loss
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if not parent.requires_grad:
                continue
            if not parent.parents:
                leaves[id(parent)] = parent
            key = id(parent)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg

    if wrt is None:
        return {t: grads[k] for k, t in leaves.items()}
    return {t: grads.get(id(t), np.zeros_like(t.value)) for t in wrt}
