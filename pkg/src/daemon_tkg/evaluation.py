"""Ranking metrics (MRR, Hits@k) in raw and time-aware filtered modes, and migration."""
from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import FilterIndex, SnapshotGraph, TkgDataset, build_filter_index, build_snapshots, history_window
from .model import ModelConfig, predict

HITS_AT = (1, 3, 10)

# scorer(subjects, relations, history, num_entities) -> [B, E] scores
Scorer = Callable[[np.ndarray, np.ndarray, Sequence[SnapshotGraph], int], np.ndarray]


@dataclass
class MetricReport:
    split: str
    mode: str  # "raw" or "time-filtered"
    mrr: float
    hits1: float
    hits3: float
    hits10: float
    num_queries: int
    config_digest: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_ranks(cls, ranks: np.ndarray, split: str, mode: str, digest: str = "") -> MetricReport:
        ranks = np.asarray(ranks, dtype=np.float64)
        if not ranks.size:
            return cls(split, mode, 0.0, 0.0, 0.0, 0.0, 0, digest)
        hits = [float(np.mean(ranks <= k)) for k in HITS_AT]
        return cls(split, mode, float(np.mean(1.0 / ranks)), *hits, int(ranks.size), digest)


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def rank_target(scores: np.ndarray, target: int, filter_set: Iterable[int] = ()) -> float:
    """1 + #strictly better + #ties / 2 among candidates not filtered out."""
    scores = np.asarray(scores, dtype=np.float64)
    excluded = np.zeros(scores.shape[0], dtype=bool)
    fs = [e for e in filter_set if e != target]
    excluded[fs] = True
    if excluded[target]:
        raise ValueError("target is excluded by the filter")
    st = scores[target]
    keep = ~excluded
    keep[target] = False
    better = np.count_nonzero(scores[keep] > st)
    ties = np.count_nonzero(scores[keep] == st)
    return 1.0 + better + ties / 2.0


def batch_ranks(scores: np.ndarray, targets: np.ndarray, exclude: np.ndarray | None = None) -> np.ndarray:
    """Vectorized ``rank_target`` over rows; ``exclude`` masks filtered competitors."""
    b = np.arange(len(targets))
    st = scores[b, targets][:, None]
    comp = np.ones_like(scores, dtype=bool)
    comp[b, targets] = False
    if exclude is not None:
        comp &= ~exclude
    better = np.count_nonzero((scores > st) & comp, axis=1)
    ties = np.count_nonzero((scores == st) & comp, axis=1)
    return 1.0 + better + ties / 2.0


def model_scorer(params: dict[str, np.ndarray], cfg: ModelConfig) -> Scorer:
    def scorer(subjects, relations, history, num_entities):
        return predict(subjects, relations, history, num_entities, params, cfg)
    return scorer


@dataclass
class QueryRank:
    subject: int
    relation: int
    object: int
    time: int
    direction: str
    rank_raw: float
    rank_filtered: float


def query_batches(quads: np.ndarray, batch_size: int) -> list[np.ndarray]:
    """Group queries by time (ascending), then chunk; input order kept within a time."""
    if not len(quads):
        return []
    quads = quads[np.argsort(quads[:, 3], kind="stable")]
    out = []
    for t in np.unique(quads[:, 3]):
        group = quads[quads[:, 3] == t]
        out.extend(group[i:i + batch_size] for i in range(0, len(group), batch_size))
    return out


def evaluate(ds: TkgDataset, scorer: Scorer, split: str, history_length: int,
             batch_size: int = 32, snapshots: list[SnapshotGraph] | None = None,
             filter_index: FilterIndex | None = None, digest: str = "",
             workers: int = 1) -> tuple[dict[str, MetricReport], list[QueryRank]]:
    """Rank every (augmented) query of ``split`` with history from all facts before its time."""
    if snapshots is None:
        snapshots = build_snapshots(ds)
    if filter_index is None:
        filter_index = build_filter_index(ds)
    quads = ds.split(split)
    batches = query_batches(quads, batch_size)

    def run(batch):
        t = int(batch[0, 3])
        hist = history_window(snapshots, t, history_length)
        scores = scorer(batch[:, 0], batch[:, 1], hist, ds.num_entities)
        raw = batch_ranks(scores, batch[:, 2])
        exclude = np.zeros_like(scores, dtype=bool)
        for i, (s, r, _, _) in enumerate(batch.tolist()):
            f = list(filter_index[(s, r, t)])
            exclude[i, f] = True
        return raw, batch_ranks(scores, batch[:, 2], exclude)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, batches))
    else:
        results = [run(b) for b in batches]

    records = []
    nb = ds.num_base_relations
    for batch, (raw, filt) in zip(batches, results):
        for (s, r, o, t), a, b in zip(batch.tolist(), raw.tolist(), filt.tolist()):
            records.append(QueryRank(s, r, o, t, "inverse" if r >= nb else "direct", a, b))
    raw_all = np.array([q.rank_raw for q in records])
    filt_all = np.array([q.rank_filtered for q in records])
    reports = {
        "raw": MetricReport.from_ranks(raw_all, split, "raw", digest),
        "time-filtered": MetricReport.from_ranks(filt_all, split, "time-filtered", digest),
    }
    return reports, records


def write_report(reports: dict[str, MetricReport], path: str | Path) -> None:
    payload = {mode: r.to_dict() for mode, r in reports.items()}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_query_csv(records: list[QueryRank], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "relation", "object", "time", "direction", "rank_raw", "rank_filtered"])
        for q in records:
            w.writerow([q.subject, q.relation, q.object, q.time, q.direction, q.rank_raw, q.rank_filtered])


def migration_ratios(migrated: MetricReport, direct: MetricReport) -> dict[str, float]:
    """Migrated metric as a percentage of the direct metric."""
    out = {}
    for k in ("mrr", "hits1", "hits3", "hits10"):
        d = getattr(direct, k)
        out[k] = 100.0 * getattr(migrated, k) / d if d else float("nan")
    return out


# ---------------------------------------------------------------- rule oracle

def rule_oracle_scorer(ds: TkgDataset) -> Scorer:
    """Scores 1 for objects the dataset's rule derives from the previous snapshot, else 0."""
    rule = ds.metadata["rule"]
    body, head, lag = rule["body"], rule["head"], rule["lag"]
    nb = ds.num_base_relations

    def scorer(subjects, relations, history, num_entities):
        scores = np.zeros((len(subjects), num_entities))
        if not history:
            return scores
        # every timestamp of a rule dataset has facts, so the last snapshot is t_q - lag
        snap = history[-lag]
        for i, (s, r) in enumerate(zip(subjects.tolist(), relations.tolist())):
            want = body if r == head else body + nb if r == head + nb else None
            if want is None:
                continue
            hit = (snap.src == s) & (snap.rel == want)
            scores[i, snap.dst[hit]] = 1.0
        return scores

    return scorer
