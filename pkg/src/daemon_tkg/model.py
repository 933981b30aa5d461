"""Adaptive path-memory network: query-conditioned path memory over a snapshot window.

For a batch of queries (s, r) the memory holds one d-vector per candidate entity.
Each snapshot in the window refines it with ``layers`` rounds of relation-projected
message passing; a sigmoid gate blends the fresh indicator state with the memory
carried over from the previous snapshot.
"""
from __future__ import annotations

import functools
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from . import diffcore as dc
from .data import SnapshotGraph
from .diffcore import Tensor

MSG_VARIANTS = ("multiply", "translate", "rotate")
MPS_VARIANTS = ("gated", "pmmp", "mmp", "ipmm")
AGGREGATORS = ("mean", "max", "min", "std")
NUM_SCALERS = 3
ROTATE_EPS = 1e-8
DEGREE_EPS = 1e-2


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_relations: int  # including inverse relations
    dim: int = 64
    layers: int = 2
    msg_variant: str = "multiply"
    mps_variant: str = "gated"
    # switches below exist so path semantics can be checked literally
    aggregate: str = "pna"  # "sum" drops PNA and the output projection
    layer_norm: bool = True
    activation: bool = True
    shortcut: bool = True
    boundary: bool = False  # add the layer-0 state to every aggregate

    def validate(self) -> None:
        if self.msg_variant not in MSG_VARIANTS:
            raise ConfigError(f"unknown message variant {self.msg_variant!r}; valid: {', '.join(MSG_VARIANTS)}")
        if self.mps_variant not in MPS_VARIANTS:
            raise ConfigError(f"unknown memory passing variant {self.mps_variant!r}; valid: {', '.join(MPS_VARIANTS)}")
        if self.aggregate not in ("pna", "sum"):
            raise ConfigError(f"unknown aggregate {self.aggregate!r}")
        if self.dim < 2:
            raise ConfigError("dim must be >= 2")
        if self.msg_variant == "rotate" and self.dim % 2:
            raise ConfigError("rotate messages need an even dim")
        if self.layers < 1:
            raise ConfigError("need at least one aggregation layer")
        if self.num_relations < 1:
            raise ConfigError("empty relation vocabulary")

    @classmethod
    def path_oracle(cls, num_relations: int, dim: int, layers: int) -> ModelConfig:
        """Plain sum aggregation, no projection/norm/activation/shortcut, with boundary."""
        return cls(num_relations, dim, layers, aggregate="sum", layer_norm=False,
                   activation=False, shortcut=False, boundary=True)

    def to_dict(self) -> dict:
        return asdict(self)


Params = dict[str, np.ndarray]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, V = cfg.dim, cfg.num_relations
    shapes: dict[str, tuple[int, ...]] = {"relation": (V, d)}
    for l in range(cfg.layers):
        shapes[f"layer{l}.rel_weight"] = (V, d, d)
        shapes[f"layer{l}.rel_bias"] = (V, d)
        if cfg.aggregate == "pna":
            shapes[f"layer{l}.pna_weight"] = (len(AGGREGATORS) * NUM_SCALERS * d, d)
            shapes[f"layer{l}.pna_bias"] = (d,)
        shapes[f"layer{l}.ln_gain"] = (d,)
        shapes[f"layer{l}.ln_bias"] = (d,)
    shapes.update({
        "gate_weight": (d, d), "gate_bias": (d,),
        "score_w1": (d, d), "score_b1": (d,),
        "score_w2": (d, 1), "score_b2": (1,),
    })
    return shapes


def init_params(cfg: ModelConfig, seed: int | np.random.Generator) -> Params:
    """Uniform(-1/sqrt(d), 1/sqrt(d)) for matrices and embeddings, zero biases, unit gains."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(cfg.dim)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("gain"):
            params[name] = np.ones(shape)
        elif name.endswith("bias") or name.endswith("_b1") or name.endswith("_b2"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.uniform(-bound, bound, shape)
    return params


def as_leaves(params: Mapping[str, np.ndarray], requires_grad: bool = True) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}


def _tensors(params) -> Mapping[str, Tensor]:
    if all(isinstance(v, Tensor) for v in params.values()):
        return params
    return as_leaves(params, requires_grad=False)


# ---------------------------------------------------------------- pieces

def indicator_init(subjects: Sequence[int], relations: Sequence[int], num_entities: int, params) -> Tensor:
    """[B, E, d]: the subject row holds the query relation embedding, all others zero."""
    p = _tensors(params)
    subjects = np.asarray(subjects, dtype=np.int64)
    onehot = np.zeros((len(subjects), num_entities, 1))
    onehot[np.arange(len(subjects)), subjects, 0] = 1.0
    r = dc.gather(p["relation"], relations)  # [B, d]
    return dc.mul(onehot, dc.reshape(r, (len(subjects), 1, -1)))


def relation_projection(params, layer: int, relations: Sequence[int]) -> Tensor:
    """[B, V, d]: W_p r + b_p for every relation type p and every query relation r."""
    p = _tensors(params)
    W = p[f"layer{layer}.rel_weight"]  # [V, d, d]
    V, d, _ = W.shape
    rel = np.asarray(relations, dtype=np.int64)
    if rel.size and (rel.min() < 0 or rel.max() >= p["relation"].shape[0]):
        raise IndexError("query relation outside the vocabulary")
    r = dc.gather(p["relation"], rel)  # [B, d]
    # flat[j, p*d + i] = W[p, i, j]
    flat = dc.reshape(dc.transpose(W, (2, 0, 1)), (d, V * d))
    proj = dc.reshape(dc.matmul(dc.reshape(r, (len(rel), 1, d)), flat), (len(rel), V, d))
    return dc.add(proj, p[f"layer{layer}.rel_bias"])


def message(h, w, variant: str = "multiply") -> Tensor:
    if variant == "multiply":
        return dc.mul(h, w)
    if variant == "translate":
        return dc.add(h, w)
    if variant == "rotate":
        h, w = dc.as_tensor(h), dc.as_tensor(w)
        half = h.shape[-1] // 2
        hr, hi = dc.slice_last(h, 0, half), dc.slice_last(h, half, 2 * half)
        wr, wi = dc.slice_last(w, 0, half), dc.slice_last(w, half, 2 * half)
        mod = dc.clip(dc.sqrt(dc.add(dc.mul(wr, wr), dc.mul(wi, wi))), ROTATE_EPS, None)
        c, s = dc.div(wr, mod), dc.div(wi, mod)
        return dc.concat([dc.sub(dc.mul(hr, c), dc.mul(hi, s)),
                          dc.add(dc.mul(hr, s), dc.mul(hi, c))])
    raise ConfigError(f"unknown message variant {variant!r}")


def degree_scalers(snapshot: SnapshotGraph) -> np.ndarray:
    """[E, 3] (identity, amplification, attenuation) from log(in_degree + 1).

    The normalizer is the mean log-degree over entities with incoming edges.
    Entities without incoming edges get zero for both degree scalers.
    """
    return _degree_scalers(np.ascontiguousarray(snapshot.dst, dtype=np.int64).tobytes(),
                           snapshot.num_entities).copy()


@functools.lru_cache(maxsize=256)
def _degree_scalers(dst_key: bytes, num_entities: int) -> np.ndarray:
    in_degree = np.bincount(np.frombuffer(dst_key, dtype=np.int64), minlength=num_entities)
    logd = np.log(in_degree + 1.0)
    active = in_degree > 0
    avg = max(float(logd[active].mean()) if active.any() else 0.0, DEGREE_EPS)
    amp = logd / avg
    att = np.where(active, 1.0 / np.maximum(amp, DEGREE_EPS), 0.0)
    return np.stack([np.ones_like(amp), amp, att], axis=1)


def pna_aggregate(msgs: Tensor, snapshot: SnapshotGraph) -> Tensor:
    """[B, E, 12d]: {mean, max, min, std} x {identity, amplification, attenuation}."""
    n = snapshot.num_entities
    stats = dc.segment_stats(AGGREGATORS, msgs, snapshot.dst, n)
    scal = degree_scalers(snapshot)[:, :, None]  # [E, 3, 1]
    B, E, width = stats.shape
    scaled = dc.mul(dc.reshape(stats, (B, E, 1, width)), scal)  # [B, E, 3, 4d]
    return dc.reshape(scaled, (B, E, NUM_SCALERS * width))


def pau_layer(H: Tensor, snapshot: SnapshotGraph, rel_weights: Tensor, params, layer: int,
              cfg: ModelConfig, H0: Tensor | None = None) -> Tensor:
    """One round of message passing over ``snapshot``.

    aggregate -> linear -> layer_norm -> relu -> + H (each stage switchable).
    """
    p = _tensors(params)
    n = snapshot.num_entities
    h_src = dc.gather(H, snapshot.src)
    w_edge = dc.gather(rel_weights, snapshot.rel)
    msgs = message(h_src, w_edge, cfg.msg_variant)
    if cfg.aggregate == "pna":
        agg = pna_aggregate(msgs, snapshot)
        out = dc.add(dc.matmul(agg, p[f"layer{layer}.pna_weight"]), p[f"layer{layer}.pna_bias"])
    else:
        out = dc.segment_reduce("sum", msgs, snapshot.dst, n)
    if cfg.boundary:
        out = dc.add(out, H0)
    if cfg.layer_norm:
        out = dc.layer_norm(out, p[f"layer{layer}.ln_gain"], p[f"layer{layer}.ln_bias"])
    if cfg.activation:
        out = dc.relu(out)
    if cfg.shortcut:
        out = dc.add(out, H)
    return out


def memory_passing(H00: Tensor, M_prev: Tensor | None, params, variant: str = "gated") -> Tensor:
    """Initial layer state for the next snapshot."""
    if variant not in MPS_VARIANTS:
        raise ConfigError(f"unknown memory passing variant {variant!r}; valid: {', '.join(MPS_VARIANTS)}")
    if M_prev is None or variant == "mmp":
        return H00
    if variant == "gated":
        p = _tensors(params)
        U = dc.sigmoid(dc.add(dc.matmul(M_prev, p["gate_weight"]), p["gate_bias"]))
        return dc.add(dc.mul(U, H00), dc.mul(dc.sub(1.0, U), M_prev))
    if variant == "ipmm":
        return dc.mul(dc.add(H00, M_prev), 0.5)
    # pmmp: every row starts from the entity-mean of the previous memory
    pooled = dc.mean(M_prev, axis=1, keepdims=True)
    return dc.add(dc.mul(H00, 0.0), pooled)


def forward(subjects: Sequence[int], relations: Sequence[int], history: Sequence[SnapshotGraph],
            num_entities: int, params, cfg: ModelConfig) -> Tensor:
    """Final path memory [B, E, d] after the last snapshot of ``history``."""
    p = _tensors(params)
    H00 = indicator_init(subjects, relations, num_entities, p)
    if not history:
        return H00
    rel_w = [relation_projection(p, l, relations) for l in range(cfg.layers)]
    M = None
    memories = []
    for snap in history:
        H = memory_passing(H00, M, p, cfg.mps_variant)
        H0 = H
        for l in range(cfg.layers):
            H = pau_layer(H, snap, rel_w[l], p, l, cfg, H0)
        M = H
        memories.append(M)
    if cfg.mps_variant == "mmp" and len(memories) > 1:
        total = memories[0]
        for m in memories[1:]:
            total = dc.add(total, m)
        M = dc.mul(total, 1.0 / len(memories))
    return M


def score(memory: Tensor, params) -> Tensor:
    """[B, E] probabilities sigmoid(F(m)), F = linear -> relu -> linear."""
    p = _tensors(params)
    h = dc.relu(dc.add(dc.matmul(memory, p["score_w1"]), p["score_b1"]))
    logits = dc.add(dc.matmul(h, p["score_w2"]), p["score_b2"])
    return dc.sigmoid(dc.reshape(logits, logits.shape[:-1]))


def predict(subjects, relations, history, num_entities: int, params, cfg: ModelConfig) -> np.ndarray:
    """Inference-only convenience: probabilities as a plain array."""
    mem = forward(subjects, relations, history, num_entities, params, cfg)
    return score(mem, params).value
