"""Temporal KG datasets: loading, augmentation, snapshots, windows, filters, synthetic data.

Quadruple arrays are int64 ``[N, 4]`` with columns (subject, relation, object, time).
"""
from __future__ import annotations

import bisect
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from functools import reduce
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

SPLITS = ("train", "valid", "test")
FORMAT_VERSION = 1

# window lengths used for the public benchmarks
DEFAULT_HISTORY = {"ICEWS18": 25, "GDELT": 15, "WIKI": 10, "YAGO": 10}


class DataError(ValueError):
    """Base class for dataset problems."""


class ParseError(DataError):
    pass


class ValidationError(DataError):
    pass


class Quadruple(NamedTuple):
    subject: int
    relation: int
    object: int
    time: int


def _as_quads(rows) -> np.ndarray:
    arr = np.asarray(rows, dtype=np.int64)
    return arr.reshape(-1, 4) if arr.size else np.zeros((0, 4), dtype=np.int64)


@dataclass(frozen=True, eq=False)
class TkgDataset:
    num_entities: int
    num_base_relations: int
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    # history-only facts: visible in windows and filters, never queried
    background: np.ndarray = field(default_factory=lambda: _as_quads([]))
    time_granularity: int = 1
    time_offset: int = 0
    augmented: bool = False
    name: str = ""
    metadata: dict = field(default_factory=dict)

    @property
    def num_relations(self) -> int:
        """Relation vocabulary size including inverse relations."""
        return 2 * self.num_base_relations

    def split(self, name: str) -> np.ndarray:
        if name not in (*SPLITS, "background"):
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)

    def all_facts(self, include_background: bool = True) -> np.ndarray:
        parts = [self.train, self.valid, self.test]
        if include_background:
            parts.append(self.background)
        return np.concatenate(parts, axis=0)

    def base_split(self, name: str) -> np.ndarray:
        """A split without the inverse half added by augmentation."""
        q = self.split(name)
        return q[: len(q) // 2] if self.augmented else q

    def __eq__(self, other) -> bool:
        if not isinstance(other, TkgDataset):
            return NotImplemented
        return (
            self.num_entities == other.num_entities
            and self.num_base_relations == other.num_base_relations
            and self.time_granularity == other.time_granularity
            and self.time_offset == other.time_offset
            and self.augmented == other.augmented
            and all(np.array_equal(self.split(s), other.split(s)) for s in (*SPLITS, "background"))
        )


# ---------------------------------------------------------------- file IO

def _read_quads(path: Path, num_entities: int, num_relations: int) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) < 4:
                raise ParseError(f"{path}:{lineno}: expected at least 4 columns, got {len(tokens)}")
            try:
                s, r, o, t = (int(x) for x in tokens[:4])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-integer token in {line.strip()!r}") from None
            if not (0 <= s < num_entities and 0 <= o < num_entities):
                raise ValidationError(f"{path}:{lineno}: entity id out of range [0, {num_entities})")
            if not 0 <= r < num_relations:
                raise ValidationError(f"{path}:{lineno}: relation id out of range [0, {num_relations})")
            rows.append((s, r, o, t))
    return _as_quads(rows)


def _read_stat(path: Path) -> tuple[int, int]:
    tokens = path.read_text().split()
    if len(tokens) < 2:
        raise ParseError(f"{path}: expected 'num_entities num_relations [num_timestamps]'")
    try:
        return int(tokens[0]), int(tokens[1])
    except ValueError:
        raise ParseError(f"{path}: non-integer token in stat line") from None


def time_granularity(raw_times: Iterable[int]) -> int:
    """gcd of the gaps between consecutive distinct timestamps (at least 1)."""
    ts = np.unique(np.asarray(list(raw_times), dtype=np.int64))
    if ts.size < 2:
        return 1
    return max(1, reduce(math.gcd, np.diff(ts).tolist()))


def load_dataset(directory: str | Path) -> TkgDataset:
    """Read ``stat.txt`` and the split files, normalizing timestamps to 0, 1, 2, ..."""
    directory = Path(directory)
    for fname in ("stat.txt", *(f"{s}.txt" for s in SPLITS)):
        if not (directory / fname).is_file():
            raise FileNotFoundError(f"missing dataset file: {directory / fname}")
    num_entities, num_relations = _read_stat(directory / "stat.txt")
    raw = {s: _read_quads(directory / f"{s}.txt", num_entities, num_relations) for s in SPLITS}
    bg_path = directory / "background.txt"
    raw["background"] = (_read_quads(bg_path, num_entities, num_relations)
                         if bg_path.is_file() else _as_quads([]))

    header = {}
    if (directory / "dataset.json").is_file():
        header = json.loads((directory / "dataset.json").read_text())
        if header.get("format_version") != FORMAT_VERSION:
            raise ValidationError(f"unsupported dataset format version {header.get('format_version')}")

    all_raw = np.concatenate([q[:, 3] for q in raw.values()])
    if "time_granularity" in header:
        gran, offset = int(header["time_granularity"]), int(header["time_offset"])
    else:
        gran = time_granularity(all_raw)
        offset = int(all_raw.min()) if all_raw.size else 0
    for q in raw.values():
        if q.size:
            if np.any((q[:, 3] - offset) % gran):
                raise ValidationError(f"timestamps not aligned to granularity {gran}")
            q[:, 3] = (q[:, 3] - offset) // gran

    for s in SPLITS:
        if len(raw[s]) == 0:
            warnings.warn(f"{directory}: split {s!r} is empty", stacklevel=2)

    ds = TkgDataset(
        num_entities=num_entities,
        num_base_relations=num_relations,
        train=raw["train"], valid=raw["valid"], test=raw["test"],
        background=raw["background"],
        time_granularity=gran, time_offset=offset,
        name=header.get("name", directory.name),
        metadata=header.get("metadata", {}),
    )
    check_split_order(ds)
    _warn_unseen_relations(ds)
    return ds


def check_split_order(ds: TkgDataset) -> None:
    """max(train) < min(valid) <= max(valid) < min(test), ignoring empty splits."""
    prev_max, prev_name = None, None
    for s in SPLITS:
        q = ds.split(s)
        if not len(q):
            continue
        lo, hi = int(q[:, 3].min()), int(q[:, 3].max())
        if prev_max is not None and lo <= prev_max:
            raise ValidationError(f"split {s!r} starts at time {lo}, not after {prev_name!r} (max {prev_max})")
        prev_max, prev_name = hi, s


def _warn_unseen_relations(ds: TkgDataset) -> None:
    seen = set(np.unique(ds.train[:, 1]).tolist())
    for s in ("valid", "test"):
        unseen = set(np.unique(ds.split(s)[:, 1]).tolist()) - seen
        if unseen:
            warnings.warn(f"relations {sorted(unseen)} in {s} never occur in train", stacklevel=3)


def save_dataset(ds: TkgDataset, directory: str | Path) -> None:
    """Write the canonical layout: dataset.json header plus text tables with raw times."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = {
        "format_version": FORMAT_VERSION,
        "name": ds.name,
        "num_entities": ds.num_entities,
        "num_base_relations": ds.num_base_relations,
        "time_granularity": ds.time_granularity,
        "time_offset": ds.time_offset,
        "metadata": ds.metadata,
    }
    (directory / "dataset.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    times = np.unique(ds.all_facts()[:, 3])
    (directory / "stat.txt").write_text(f"{ds.num_entities} {ds.num_base_relations} {len(times)}\n")
    names = list(SPLITS) + (["background"] if len(ds.background) else [])
    for s in names:
        q = ds.base_split(s).copy()
        q[:, 3] = q[:, 3] * ds.time_granularity + ds.time_offset
        lines = "".join(f"{a}\t{b}\t{c}\t{d}\n" for a, b, c, d in q.tolist())
        (directory / f"{s}.txt").write_text(lines)


# ---------------------------------------------------------------- augmentation

def inverse_quads(q: np.ndarray, num_base_relations: int) -> np.ndarray:
    return np.stack([q[:, 2], q[:, 1] + num_base_relations, q[:, 0], q[:, 3]], axis=1)


def add_inverse_quadruples(ds: TkgDataset) -> TkgDataset:
    """Append (o, r + |R|, s, t) for every fact; each split doubles."""
    if ds.augmented:
        raise RuntimeError("dataset is already augmented with inverse quadruples")
    aug = {s: np.concatenate([ds.split(s), inverse_quads(ds.split(s), ds.num_base_relations)])
           for s in (*SPLITS, "background")}
    return replace(ds, **aug, augmented=True)


# ---------------------------------------------------------------- snapshots

@dataclass(frozen=True, eq=False)
class SnapshotGraph:
    """All edges of one timestamp, sorted by (destination, relation, source)."""

    time: int
    num_entities: int
    src: np.ndarray
    rel: np.ndarray
    dst: np.ndarray

    @property
    def num_edges(self) -> int:
        return len(self.dst)

    @property
    def in_degree(self) -> np.ndarray:
        return np.bincount(self.dst, minlength=self.num_entities)

    @property
    def dst_index(self) -> np.ndarray:
        """Segment offsets: edges of destination v are ``dst_index[v]:dst_index[v + 1]``."""
        return np.concatenate([[0], np.cumsum(self.in_degree)])

    @property
    def edges(self) -> list[tuple[int, int, int]]:
        return list(zip(self.src.tolist(), self.rel.tolist(), self.dst.tolist()))

    @classmethod
    def from_edges(cls, time: int, num_entities: int, src, rel, dst) -> SnapshotGraph:
        src, rel, dst = (np.asarray(a, dtype=np.int64) for a in (src, rel, dst))
        order = np.lexsort((src, rel, dst))
        return cls(time, num_entities, src[order], rel[order], dst[order])


def build_snapshots(ds: TkgDataset, splits: Sequence[str] = (*SPLITS, "background")) -> list[SnapshotGraph]:
    """One snapshot per distinct time in the selected splits, ascending."""
    if not ds.augmented:
        raise RuntimeError("build_snapshots expects an augmented dataset")
    quads = np.concatenate([ds.split(s) for s in splits], axis=0)
    if not len(quads):
        return []
    quads = quads[np.argsort(quads[:, 3], kind="stable")]
    times, starts = np.unique(quads[:, 3], return_index=True)
    bounds = list(starts[1:]) + [len(quads)]
    return [
        SnapshotGraph.from_edges(int(t), ds.num_entities, q[:, 0], q[:, 1], q[:, 2])
        for t, q in ((t, quads[a:b]) for t, a, b in zip(times, starts, bounds))
    ]


def history_window(snapshots: Sequence[SnapshotGraph], t_q: int, length: int) -> list[SnapshotGraph]:
    """Up to ``length`` snapshots with time strictly before ``t_q``, ascending."""
    if length < 1:
        raise ValueError("history length must be >= 1")
    times = [s.time for s in snapshots]
    end = bisect.bisect_left(times, t_q)
    return list(snapshots[max(0, end - length):end])


# ---------------------------------------------------------------- filtering

class FilterIndex:
    """(subject, relation, time) -> objects true at exactly that time."""

    def __init__(self, table: dict[tuple[int, int, int], frozenset[int]]):
        self._table = table

    def __getitem__(self, key: tuple[int, int, int]) -> frozenset[int]:
        return self._table.get(key, frozenset())

    def __contains__(self, key) -> bool:
        return key in self._table

    def __len__(self) -> int:
        return len(self._table)

    def items(self):
        return self._table.items()


def build_filter_index(ds: TkgDataset) -> FilterIndex:
    if not ds.augmented:
        raise RuntimeError("build_filter_index expects an augmented dataset")
    table: dict[tuple[int, int, int], set[int]] = {}
    for s, r, o, t in ds.all_facts().tolist():
        table.setdefault((s, r, t), set()).add(o)
    return FilterIndex({k: frozenset(v) for k, v in table.items()})


# ---------------------------------------------------------------- relabeling

def relabel_entities(ds: TkgDataset, permutation: Sequence[int]) -> TkgDataset:
    """Map every subject/object id ``e`` to ``permutation[e]``."""
    perm = np.asarray(permutation, dtype=np.int64)
    n = ds.num_entities
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise ValidationError("permutation must be a bijection on [0, num_entities)")

    def apply(q):
        q = q.copy()
        q[:, 0] = perm[q[:, 0]]
        q[:, 2] = perm[q[:, 2]]
        return q

    return replace(ds, **{s: apply(ds.split(s)) for s in (*SPLITS, "background")})


# ---------------------------------------------------------------- statistics

def dataset_statistics(ds: TkgDataset) -> dict:
    """Fact counts per split, timestamp count, and average entities per timestamp."""
    base = {s: ds.base_split(s) for s in SPLITS}
    facts = np.concatenate(list(base.values()), axis=0)
    times = np.unique(facts[:, 3]) if len(facts) else np.zeros(0, dtype=np.int64)
    per_time = [len(np.unique(facts[facts[:, 3] == t][:, [0, 2]])) for t in times]
    e_avg = float(np.mean(per_time)) if per_time else 0.0
    return {
        "name": ds.name,
        "num_entities": ds.num_entities,
        "num_relations": ds.num_base_relations,
        "num_train": len(base["train"]),
        "num_valid": len(base["valid"]),
        "num_test": len(base["test"]),
        "num_timestamps": len(times),
        "time_granularity": ds.time_granularity,
        "avg_entities_per_timestamp": e_avg,
        "entities_over_avg": ds.num_entities / e_avg if e_avg else float("inf"),
    }


# ---------------------------------------------------------------- synthetic rule data

@dataclass(frozen=True)
class SynthSpec:
    """Rule dataset: (a, body, b, t) implies (a, head, b, t + 1).

    Facts of every relation other than ``head`` are a random stream. Stream facts
    from the valid/test period are history-only background, so every evaluation
    query is implied by the rule.
    """

    num_entities: int = 20
    num_base_relations: int = 2
    num_timestamps: int = 30
    facts_per_step: int = 4
    body_relation: int = 0
    head_relation: int = 1
    valid_fraction: float = 0.1
    test_fraction: float = 0.1

    def validate(self) -> None:
        if self.num_entities < 2:
            raise ValidationError("need at least 2 entities")
        if self.num_base_relations < 2:
            raise ValidationError("need at least 2 base relations")
        if self.num_timestamps < 4:
            raise ValidationError("need at least 4 timestamps")
        if self.body_relation == self.head_relation:
            raise ValidationError("body and head relation must differ")
        for r in (self.body_relation, self.head_relation):
            if not 0 <= r < self.num_base_relations:
                raise ValidationError(f"rule relation {r} outside vocabulary")
        max_pairs = self.num_entities * (self.num_entities - 1)
        if not 1 <= self.facts_per_step <= max_pairs:
            raise ValidationError(f"facts_per_step must be in [1, {max_pairs}]")
        if not (0 < self.valid_fraction and 0 < self.test_fraction
                and self.valid_fraction + self.test_fraction < 1):
            raise ValidationError("valid/test fractions must be positive and sum below 1")


def generate_synthetic(synth: SynthSpec, seed: int) -> TkgDataset:
    synth.validate()
    rng = np.random.default_rng(seed)
    n, T = synth.num_entities, synth.num_timestamps
    n_test = max(1, round(T * synth.test_fraction))
    n_valid = max(1, round(T * synth.valid_fraction))
    valid_start, test_start = T - n_test - n_valid, T - n_test
    if valid_start < 2:
        raise ValidationError("too few timestamps for a train split")

    stream_rels = [r for r in range(synth.num_base_relations) if r != synth.head_relation]
    stream, derived = [], []
    for t in range(T):
        for r in stream_rels:
            flat = rng.choice(n * (n - 1), size=synth.facts_per_step, replace=False)
            a, b = np.divmod(np.sort(flat), n - 1)
            b = b + (b >= a)  # skip self loops
            stream.extend((int(x), r, int(y), t) for x, y in zip(a, b))
    for s, r, o, t in stream:
        if r == synth.body_relation and t + 1 < T:
            derived.append((s, synth.head_relation, o, t + 1))
    stream_q, derived_q = _as_quads(sorted(set(stream))), _as_quads(sorted(set(derived)))

    def take(q, lo, hi):
        return q[(q[:, 3] >= lo) & (q[:, 3] < hi)]

    train = np.concatenate([take(stream_q, 0, valid_start), take(derived_q, 0, valid_start)])
    train = train[np.lexsort((train[:, 2], train[:, 1], train[:, 0], train[:, 3]))]
    return TkgDataset(
        num_entities=n,
        num_base_relations=synth.num_base_relations,
        train=train,
        valid=take(derived_q, valid_start, test_start),
        test=take(derived_q, test_start, T),
        background=take(stream_q, valid_start, T),
        name=f"synthetic-{seed}",
        metadata={"rule": {"body": synth.body_relation, "head": synth.head_relation, "lag": 1},
                  "seed": seed, "generator": synth.__dict__.copy()},
    )
