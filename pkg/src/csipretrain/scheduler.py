"""Padding-aware batch construction.

The proposed strategy sorts the whole pool by token length, slices it into
``B`` contiguous buckets, and every epoch shuffles inside each bucket, cuts
mini-batches that never cross a bucket boundary, and shuffles the batch
order globally.  Three reference paradigms (sequential, alternating, global)
and an exhaustive partition oracle live here too.
"""

from __future__ import annotations

import dataclasses

import itertools
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .rng import make_rng

STRATEGIES = ("proposed", "sequential", "alternating", "global")
ORACLE_MAX_N = 12


@dataclass(frozen=True)
class PoolEntry:
    sample_id: int
    dataset_id: int
    length: int


class SamplePool:
    """The global collection of samples, reduced to what batching needs."""

    def __init__(self, entries: Iterable[PoolEntry | tuple]):
        self.entries = tuple(e if isinstance(e, PoolEntry) else PoolEntry(*e) for e in entries)
        self.lengths: dict[int, int] = {}
        self.datasets: dict[int, int] = {}
        for e in self.entries:
            if e.sample_id in self.lengths:
                raise ValueError(f"duplicate sample_id {e.sample_id}")
            if e.length < 1:
                raise ValueError(f"sample {e.sample_id}: token length must be >= 1")
            self.lengths[e.sample_id] = int(e.length)
            self.datasets[e.sample_id] = int(e.dataset_id)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[PoolEntry]:
        return iter(self.entries)

    @property
    def dataset_ids(self) -> list[int]:
        return sorted(set(self.datasets.values()))

    @property
    def n_datasets(self) -> int:
        return len(set(self.datasets.values()))

    @classmethod
    def from_lengths(cls, lengths: Sequence[int], dataset_ids: Sequence[int] | None = None):
        if dataset_ids is None:
            dataset_ids = [0] * len(lengths)
        return cls(PoolEntry(i, int(d), int(L)) for i, (L, d) in enumerate(zip(lengths, dataset_ids)))


@dataclass(frozen=True)
class Bucket:
    index: int
    members: tuple[PoolEntry, ...]

    @property
    def length_range(self) -> tuple[int, int]:
        ls = [m.length for m in self.members]
        return (min(ls), max(ls))


@dataclass(frozen=True)
class MiniBatch:
    sample_ids: tuple[int, ...]
    padded_len: int
    group: int = 0  # bucket index (proposed) or dataset id (baselines)

    def __len__(self) -> int:
        return len(self.sample_ids)


@dataclass(frozen=True)
class BatchPlan:
    batches: tuple[MiniBatch, ...]
    strategy: str
    seed: int
    batch_size: int
    epoch: int = 0
    bucket_bounds: tuple[tuple[int, int], ...] = ()

    def __len__(self) -> int:
        return len(self.batches)

    def __iter__(self) -> Iterator[MiniBatch]:
        return iter(self.batches)

    def sample_ids(self) -> list[int]:
        return [sid for b in self.batches for sid in b.sample_ids]

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "seed": self.seed,
            "epoch": self.epoch,
            "batch_size": self.batch_size,
            "bucket_bounds": [list(b) for b in self.bucket_bounds],
            "batches": [
                {"group": b.group, "h": b.padded_len, "members": list(b.sample_ids)}
                for b in self.batches
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "BatchPlan":
        return cls(
            batches=tuple(MiniBatch(tuple(b["members"]), int(b["h"]), int(b["group"])) for b in d["batches"]),
            strategy=d["strategy"],
            seed=int(d["seed"]),
            batch_size=int(d["batch_size"]),
            epoch=int(d.get("epoch", 0)),
            bucket_bounds=tuple(tuple(b) for b in d.get("bucket_bounds", ())),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass(frozen=True)
class DiversityReport:
    entropies: np.ndarray = field(repr=False)
    epsilon: float
    violations: int

    @property
    def violation_fraction(self) -> float:
        return self.violations / len(self.entropies) if len(self.entropies) else 0.0

    @property
    def mean_entropy(self) -> float:
        return float(np.mean(self.entropies)) if len(self.entropies) else 0.0


class DiversityViolation(RuntimeError):
    pass


# -- accounting ---------------------------------------------------------------


def _batch_lengths(batch: MiniBatch, lengths: Mapping[int, int]) -> list[int]:
    try:
        return [lengths[sid] for sid in batch.sample_ids]
    except KeyError as exc:
        raise KeyError(f"unknown sample_id {exc.args[0]} in plan") from None


def compute_jpad(plan: BatchPlan | Iterable[MiniBatch], lengths: Mapping[int, int]) -> int:
    """Total number of padding tokens: sum over batches of (h_j - L_i)."""
    total = 0
    for b in plan:
        ls = _batch_lengths(b, lengths)
        total += len(ls) * max(ls) - sum(ls)
    return total


def plan_cost(plan: BatchPlan | Iterable[MiniBatch], lengths: Mapping[int, int]) -> int:
    """Token positions processed: sum over batches of |B_j| * h_j."""
    return sum(len(b) * max(_batch_lengths(b, lengths)) for b in plan)


def padding_ratio(plan: BatchPlan, lengths: Mapping[int, int]) -> float:
    cost = plan_cost(plan, lengths)
    return compute_jpad(plan, lengths) / cost if cost else 0.0


def source_entropy(dataset_ids: Sequence[int], n_datasets: int | None = None) -> float:
    """Shannon entropy (nats) of the dataset-id histogram of one batch."""
    if len(dataset_ids) == 0:
        raise ValueError("entropy of an empty batch is undefined")
    counts = np.array(sorted(Counter(dataset_ids).values()), dtype=np.float64)
    if n_datasets is not None and len(counts) > n_datasets:
        raise ValueError(f"batch has {len(counts)} sources but N={n_datasets}")
    p = counts / counts.sum()
    return float(max(0.0, -np.sum(p * np.log(p))))


# -- proposed strategy -----------------------------------------------------------


def sort_pool(pool: SamplePool) -> list[PoolEntry]:
    return sorted(pool, key=lambda e: (e.length, e.dataset_id, e.sample_id))


def partition_buckets(pool: SamplePool, B: int) -> list[Bucket]:
    """Sort by length and slice into ``B`` contiguous buckets of capacity ceil(|pool|/B)."""
    n = len(pool)
    if not 1 <= B <= n:
        raise ValueError(f"bucket count B={B} outside [1, {n}]")
    ordered = sort_pool(pool)
    cap = math.ceil(n / B)
    buckets = []
    for k in range(B):
        members = tuple(ordered[k * cap:(k + 1) * cap])
        if members:
            buckets.append(Bucket(k, members))
    return buckets


def _split(ids: Sequence[int], size: int) -> list[tuple[int, ...]]:
    return [tuple(ids[i:i + size]) for i in range(0, len(ids), size)]


def schedule_epoch(buckets: Sequence[Bucket], batch_size: int, seed: int, epoch: int = 0) -> BatchPlan:
    if not buckets:
        raise ValueError("no buckets to schedule")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = make_rng(seed, "proposed", epoch)
    batches = []
    for bucket in buckets:
        members = bucket.members
        order = rng.permutation(len(members))
        shuffled = [members[i] for i in order]
        for chunk in _split(shuffled, batch_size):
            batches.append(MiniBatch(tuple(e.sample_id for e in chunk),
                                     max(e.length for e in chunk), bucket.index))
    order = rng.permutation(len(batches))
    return BatchPlan(
        batches=tuple(batches[i] for i in order),
        strategy="proposed",
        seed=seed,
        batch_size=batch_size,
        epoch=epoch,
        bucket_bounds=tuple(b.length_range for b in buckets),
    )


def build_proposed_plan(pool: SamplePool, buckets: int, batch_size: int, seed: int, epoch: int = 0) -> BatchPlan:
    return schedule_epoch(partition_buckets(pool, buckets), batch_size, seed, epoch)


def partition_by_length(pool: SamplePool) -> list[Bucket]:
    """One bucket per distinct token length: every batch drawn from it is single-scale."""
    groups: dict[int, list[PoolEntry]] = {}
    for e in sort_pool(pool):
        groups.setdefault(e.length, []).append(e)
    return [Bucket(k, tuple(g)) for k, (_, g) in enumerate(sorted(groups.items()))]


def build_homogeneous_plan(pool: SamplePool, batch_size: int, seed: int, epoch: int = 0) -> BatchPlan:
    return schedule_epoch(partition_by_length(pool), batch_size, seed, epoch)


# -- baselines -------------------------------------------------------------------


def _dataset_batches(pool: SamplePool, batch_size: int, rng: np.random.Generator) -> dict[int, list[MiniBatch]]:
    by_ds: dict[int, list[PoolEntry]] = {}
    for e in pool:
        by_ds.setdefault(e.dataset_id, []).append(e)
    out = {}
    for ds in sorted(by_ds):
        members = sorted(by_ds[ds], key=lambda e: e.sample_id)
        order = rng.permutation(len(members))
        shuffled = [members[i] for i in order]
        out[ds] = [MiniBatch(tuple(e.sample_id for e in c), max(e.length for e in c), ds)
                   for c in _split(shuffled, batch_size)]
    return out


def build_baseline_plan(pool: SamplePool, strategy: str, batch_size: int, seed: int, epoch: int = 0) -> BatchPlan:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = make_rng(seed, strategy, epoch)
    if strategy == "sequential":
        per_ds = _dataset_batches(pool, batch_size, rng)
        batches = [b for ds in sorted(per_ds) for b in per_ds[ds]]
    elif strategy == "alternating":
        per_ds = _dataset_batches(pool, batch_size, rng)
        queues = [per_ds[ds] for ds in sorted(per_ds)]
        batches = []
        for r in range(max(len(q) for q in queues)):
            batches.extend(q[r] for q in queues if r < len(q))
    elif strategy == "global":
        entries = sorted(pool, key=lambda e: e.sample_id)
        order = rng.permutation(len(entries))
        shuffled = [entries[i] for i in order]
        batches = [MiniBatch(tuple(e.sample_id for e in c), max(e.length for e in c), 0)
                   for c in _split(shuffled, batch_size)]
    else:
        raise ValueError(f"unknown baseline strategy {strategy!r}")
    return BatchPlan(tuple(batches), strategy, seed, batch_size, epoch)


def build_plan(pool: SamplePool, strategy: str, batch_size: int, seed: int,
               buckets: int | None = None, epoch: int = 0) -> BatchPlan:
    if strategy == "proposed":
        if buckets is None:
            raise ValueError("proposed strategy needs a bucket count")
        return build_proposed_plan(pool, buckets, batch_size, seed, epoch)
    return build_baseline_plan(pool, strategy, batch_size, seed, epoch)


def training_segments(pool: SamplePool, strategy: str, batch_size: int, seed: int,
                      total_steps: int, buckets: int | None = None) -> Iterator[BatchPlan]:
    """Yield plans whose concatenated batches cover ``total_steps`` updates.

    Non-sequential strategies yield one fresh plan per epoch.  Sequential
    training visits datasets one after another: each dataset gets a
    contiguous share of the steps, filled with reshuffled passes over that
    dataset alone.
    """
    if total_steps <= 0:
        return
    if strategy != "sequential":
        done, epoch = 0, 0
        while done < total_steps:
            plan = build_plan(pool, strategy, batch_size, seed, buckets, epoch)
            yield plan
            done += len(plan)
            epoch += 1
        return
    ds_ids = pool.dataset_ids
    share, extra = divmod(total_steps, len(ds_ids))
    epoch = 0
    for i, ds in enumerate(ds_ids):
        sub = SamplePool(e for e in pool if e.dataset_id == ds)
        need = share + (1 if i < extra else 0)
        while need > 0:
            plan = build_baseline_plan(sub, "sequential", batch_size, seed, epoch)
            if len(plan) > need:
                plan = dataclasses.replace(plan, batches=plan.batches[:need])
            yield plan
            need -= len(plan)
            epoch += 1


# -- diversity -----------------------------------------------------------------------


def diversity_report(plan: BatchPlan, datasets: Mapping[int, int], n_datasets: int,
                     epsilon: float, enforce: bool = False) -> DiversityReport:
    ent = np.array([source_entropy([datasets[s] for s in b.sample_ids], n_datasets) for b in plan])
    violations = int(np.sum(ent < epsilon))
    report = DiversityReport(ent, float(epsilon), violations)
    if enforce and violations:
        raise DiversityViolation(f"{violations}/{len(ent)} batches below entropy {epsilon:.4f}")
    return report


def batch_distribution(batch: MiniBatch, datasets: Mapping[int, int], dataset_ids: Sequence[int]) -> np.ndarray:
    c = Counter(datasets[s] for s in batch.sample_ids)
    return np.array([c.get(d, 0) for d in dataset_ids], dtype=np.float64) / len(batch)


# -- exact oracle -------------------------------------------------------------------------


def sorted_contiguous_sum(lengths: Sequence[int], batch_size: int) -> int:
    ordered = sorted(lengths)
    return sum(max(ordered[i:i + batch_size]) for i in range(0, len(ordered), batch_size))


def oracle_min_padding(lengths: Sequence[int], batch_size: int) -> tuple[int, tuple[tuple[int, ...], ...]]:
    """Minimum of sum_j max(batch_j) over every partition into equal-size batches.

    Exhaustive: fixes the lowest unassigned index and enumerates its
    companions, so each unordered partition is visited exactly once.
    Returns the optimum and one witness partition as index tuples.
    """
    n = len(lengths)
    if batch_size < 1 or n % batch_size:
        raise ValueError(f"batch_size {batch_size} does not divide {n}")
    if n > ORACLE_MAX_N:
        raise ValueError(f"instance of {n} samples exceeds the oracle limit {ORACLE_MAX_N}")
    vals = list(lengths)
    if any(v < 0 for v in vals):
        raise ValueError("lengths must be non-negative")
    best = [math.inf, ()]

    def rec(remaining: tuple[int, ...], acc: int, groups: tuple):
        if acc >= best[0]:
            return
        if not remaining:
            best[0], best[1] = acc, groups
            return
        first, rest = remaining[0], remaining[1:]
        for comp in itertools.combinations(rest, batch_size - 1):
            group = (first,) + comp
            left = tuple(i for i in rest if i not in comp)
            rec(left, acc + max(vals[i] for i in group), groups + (group,))

    rec(tuple(range(n)), 0, ())
    return int(best[0]), best[1]
