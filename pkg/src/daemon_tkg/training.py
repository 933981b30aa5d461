"""Negative-sampling training with the orthogonality regularizer and Adam."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable

import numpy as np

from . import diffcore as dc
from .checkpoint import Checkpoint
from .data import TkgDataset, build_filter_index, build_snapshots, history_window
from .diffcore import Tape, Tensor
from .evaluation import config_digest, evaluate, model_scorer, query_batches
from .model import ModelConfig, as_leaves, forward, init_params, score

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    dim: int = 64
    layers: int = 2
    history_length: int = 10
    negatives: int = 64
    alpha: float = 1.0
    learning_rate: float = 5e-4
    max_epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    msg_variant: str = "multiply"
    mps_variant: str = "gated"
    clamp_eps: float = 1e-7

    def validate(self) -> None:
        if self.negatives < 1:
            raise ValueError("negatives must be >= 1")
        if self.history_length < 1:
            raise ValueError("history_length must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be >= 1 and max_epochs >= 0")

    def model_config(self, num_relations: int) -> ModelConfig:
        return ModelConfig(num_relations, self.dim, self.layers, self.msg_variant, self.mps_variant)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ---------------------------------------------------------------- sampling and losses

def sample_negatives(objects: np.ndarray, n: int, num_entities: int, rng: np.random.Generator) -> np.ndarray:
    """[B, n] uniform entities, each different from its row's true object."""
    if num_entities < 2:
        raise ValueError("negative sampling needs at least 2 entities")
    objects = np.asarray(objects, dtype=np.int64).reshape(-1, 1)
    draws = rng.integers(0, num_entities - 1, size=(objects.shape[0], n))
    return draws + (draws >= objects)


def loss_tkg(p_pos, p_neg, clamp_eps: float = 1e-7) -> Tensor:
    """Mean over the batch of -log p+ - mean_j log(1 - p-_j); p_pos [B], p_neg [B, n]."""
    pos = dc.clip(p_pos, clamp_eps, 1.0 - clamp_eps)
    neg = dc.clip(p_neg, clamp_eps, 1.0 - clamp_eps)
    per_query = dc.sub(
        dc.mul(dc.log(pos), -1.0),
        dc.mean(dc.log(dc.sub(1.0, neg)), axis=-1),
    )
    return dc.mean(per_query)


def loss_reg(R, alpha: float = 1.0) -> Tensor:
    """Frobenius norm of R^T R - alpha I."""
    R = dc.as_tensor(R)
    gram = dc.matmul(dc.transpose(R, (1, 0)), R)
    diff = dc.sub(gram, alpha * np.eye(R.shape[1]))
    return dc.sqrt(dc.sum(dc.mul(diff, diff)))


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for k, g in grads.items():
        if k not in state.m:
            state.m[k] = np.zeros_like(params[k])
            state.v[k] = np.zeros_like(params[k])
        m, v = state.m[k], state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if lr:
            params[k] -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# ---------------------------------------------------------------- batch step

def batch_loss(params: dict[str, Tensor], batch: np.ndarray, negatives: np.ndarray, history,
               num_entities: int, mcfg: ModelConfig, cfg: TrainConfig) -> Tensor:
    mem = forward(batch[:, 0], batch[:, 1], history, num_entities, params, mcfg)
    probs = score(mem, params)
    p_pos = dc.take_along(probs, batch[:, 2:3])
    p_neg = dc.take_along(probs, negatives)
    return dc.add(loss_tkg(dc.reshape(p_pos, (len(batch),)), p_neg, cfg.clamp_eps),
                  loss_reg(params["relation"], cfg.alpha))


def loss_and_grads(params: dict[str, np.ndarray], batch, negatives, history, num_entities,
                   mcfg: ModelConfig, cfg: TrainConfig) -> tuple[float, dict[str, np.ndarray]]:
    leaves = as_leaves(params)
    with Tape() as tape:
        loss = batch_loss(leaves, batch, negatives, history, num_entities, mcfg, cfg)
    g = dc.backward(loss, tape, wrt=leaves.values())
    return float(loss.value), {k: g[t] for k, t in leaves.items()}


# ---------------------------------------------------------------- fit

@dataclass
class FitResult:
    checkpoint: Checkpoint
    log: list[dict]
    best_epoch: int
    final_params: dict[str, np.ndarray]


def _streams(seed: int) -> dict[str, np.random.Generator]:
    init, neg, shuffle = np.random.SeedSequence(seed).spawn(3)
    return {"init": np.random.default_rng(init), "neg": np.random.default_rng(neg),
            "shuffle": np.random.default_rng(shuffle)}


def fit(ds: TkgDataset, cfg: TrainConfig, init: dict[str, np.ndarray] | None = None,
        on_epoch: Callable[[dict], None] | None = None, deterministic: bool = False,
        stop_at_mrr: float | None = None) -> FitResult:
    """Train on ``ds.train`` (grouped by time, ascending); keep the best valid-MRR params.

    ``stop_at_mrr`` ends training early once valid filtered MRR reaches it.
    """
    cfg.validate()
    if not ds.augmented:
        raise ValueError("fit expects an augmented dataset")
    mcfg = cfg.model_config(ds.num_relations)
    mcfg.validate()
    rngs = _streams(cfg.seed)
    params = init_params(mcfg, rngs["init"]) if init is None else {k: v.copy() for k, v in init.items()}
    state = AdamState()
    snapshots = build_snapshots(ds)
    filters = build_filter_index(ds)
    digest = config_digest(cfg.to_dict())

    best = None
    best_mrr, best_epoch = -1.0, 0
    history_log = []
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        losses = []
        train = ds.train[rngs["shuffle"].permutation(len(ds.train))]
        for bi, batch in enumerate(query_batches(train, cfg.batch_size)):
            hist = history_window(snapshots, int(batch[0, 3]), cfg.history_length)
            negs = sample_negatives(batch[:, 2], cfg.negatives, ds.num_entities, rngs["neg"])
            loss, grads = loss_and_grads(params, batch, negs, hist, ds.num_entities, mcfg, cfg)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}, step {state.step + 1}")
            adam_step(params, grads, state, cfg.learning_rate)
            losses.append(loss)

        entry = {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else 0.0}
        if len(ds.valid):
            reports, _ = evaluate(ds, model_scorer(params, mcfg), "valid", cfg.history_length,
                                  cfg.batch_size, snapshots, filters, digest)
            rep = reports["time-filtered"]
            entry.update(valid_mrr=rep.mrr, valid_hits1=rep.hits1, valid_hits3=rep.hits3,
                         valid_hits10=rep.hits10)
        else:
            entry.update(valid_mrr=0.0, valid_hits1=0.0, valid_hits3=0.0, valid_hits10=0.0)
        entry["seconds"] = 0.0 if deterministic else time.perf_counter() - t0
        history_log.append(entry)
        log.info("epoch %d loss %.4f valid mrr %.4f", epoch, entry["train_loss"], entry["valid_mrr"])
        if on_epoch is not None:
            on_epoch(entry)
        if best is None or entry["valid_mrr"] >= best_mrr:
            best_mrr, best_epoch = entry["valid_mrr"], epoch
            best = {k: v.copy() for k, v in params.items()}
        if stop_at_mrr is not None and entry["valid_mrr"] >= stop_at_mrr:
            break

    if best is None:
        best = {k: v.copy() for k, v in params.items()}
    ckpt = Checkpoint(config=cfg.to_dict(), num_base_relations=ds.num_base_relations,
                      dim=cfg.dim, layers=cfg.layers, params=best)
    return FitResult(ckpt, history_log, best_epoch, params)


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
