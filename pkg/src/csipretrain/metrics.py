"""NMSE, compute accounting and gradient-conflict statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .rng import make_rng
from .scheduler import BatchPlan, MiniBatch, compute_jpad, plan_cost

N_HIST_BINS = 41
COLLINEAR_TOL = 1e-12


def nmse(truth: np.ndarray, pred: np.ndarray) -> tuple[float, float]:
    """Return (||H - H_hat||^2 / ||H||^2, the same in dB). Exact match gives -inf dB."""
    truth = np.asarray(truth)
    pred = np.asarray(pred)
    if truth.shape != pred.shape:
        raise ValueError(f"shape mismatch: {truth.shape} vs {pred.shape}")
    ref = float(np.sum(np.abs(truth) ** 2))
    if ref == 0.0:
        raise ValueError("NMSE undefined for an all-zero reference")
    lin = float(np.sum(np.abs(truth - pred) ** 2)) / ref
    return lin, to_db(lin)


def to_db(linear: float) -> float:
    return 10.0 * math.log10(linear) if linear > 0 else -math.inf


def format_db(db: float) -> str:
    return "-inf" if db == -math.inf else repr(float(db))


def grad_cosine(g1: np.ndarray, g2: np.ndarray) -> float:
    g1 = np.asarray(g1, dtype=np.float64).ravel()
    g2 = np.asarray(g2, dtype=np.float64).ravel()
    if g1.shape != g2.shape:
        raise ValueError("gradient vectors differ in length")
    n1, n2 = np.linalg.norm(g1), np.linalg.norm(g2)
    if n1 == 0.0 or n2 == 0.0:
        raise ValueError("cosine undefined for a zero gradient")
    if np.array_equal(g1, g2):
        return 1.0
    c = float(np.clip(np.dot(g1, g2) / (n1 * n2), -1.0, 1.0))
    # collinear vectors land a few ulps short of +-1; snap those
    if 1.0 - abs(c) <= COLLINEAR_TOL:
        c = math.copysign(1.0, c)
    return c


@dataclass(frozen=True, eq=False)
class ConflictStats:
    cosines: np.ndarray = field(repr=False)
    fraction_negative: float
    histogram: np.ndarray = field(repr=False)
    bin_edges: np.ndarray = field(repr=False)

    @classmethod
    def from_cosines(cls, cosines: Sequence[float]) -> "ConflictStats":
        c = np.asarray(cosines, dtype=np.float64)
        hist, edges = np.histogram(c, bins=N_HIST_BINS, range=(-1.0, 1.0))
        frac = float(np.mean(c < 0)) if len(c) else 0.0
        return cls(c, frac, hist, edges)

    @property
    def mean(self) -> float:
        return float(np.mean(self.cosines)) if len(self.cosines) else 0.0


def sample_batch_pairs(plan: BatchPlan, n_pairs: int, seed: int, pairing: str = "same_length"):
    """Draw ``n_pairs`` index pairs of distinct batches from ``plan``.

    ``same_length`` only pairs batches whose padded length agrees, so a
    scale-homogeneous plan is compared within one scale; ``any`` pairs freely.
    """
    rng = make_rng(seed, "pairs", plan.strategy)
    if pairing == "any":
        groups = [list(range(len(plan)))]
    elif pairing == "same_length":
        by_h: dict[int, list[int]] = {}
        for i, b in enumerate(plan):
            by_h.setdefault(b.padded_len, []).append(i)
        groups = [g for _, g in sorted(by_h.items())]
    else:
        raise ValueError(f"unknown pairing {pairing!r}")
    groups = [g for g in groups if len(g) >= 2]
    if not groups:
        raise ValueError("plan has no pair of comparable batches")
    weights = np.array([len(g) * (len(g) - 1) for g in groups], dtype=np.float64)
    weights /= weights.sum()
    pairs = []
    for _ in range(n_pairs):
        g = groups[rng.choice(len(groups), p=weights)]
        i, j = rng.choice(len(g), size=2, replace=False)
        pairs.append((g[i], g[j]))
    return pairs


def conflict_stats(plan: BatchPlan, gradient: Callable[[MiniBatch, int], np.ndarray],
                   n_pairs: int, seed: int, pairing: str = "same_length") -> ConflictStats:
    """Cosine statistics of full-parameter gradients over sampled batch pairs.

    ``gradient(batch, index)`` must return the flat gradient of one batch at a
    frozen parameter point; results are cached per batch index.
    """
    cache: dict[int, np.ndarray] = {}

    def grad(i):
        if i not in cache:
            g = gradient(plan.batches[i], i)
            if not np.any(g):
                raise ValueError(f"zero gradient for batch {i}")
            cache[i] = g
        return cache[i]

    cos = [grad_cosine(grad(i), grad(j)) for i, j in sample_batch_pairs(plan, n_pairs, seed, pairing)]
    return ConflictStats.from_cosines(cos)


def conflict_experiment(plan_mixed: BatchPlan, plan_aligned: BatchPlan,
                        gradient: Callable[[MiniBatch, int], np.ndarray], n_pairs: int, seed: int,
                        pairing: str = "same_length") -> tuple[ConflictStats, ConflictStats]:
    return (conflict_stats(plan_mixed, gradient, n_pairs, seed, pairing),
            conflict_stats(plan_aligned, gradient, n_pairs, seed, pairing))


@dataclass(frozen=True)
class Cost:
    cost: int
    valid_tokens: int
    jpad: int

    @property
    def padding_ratio(self) -> float:
        return self.jpad / self.cost if self.cost else 0.0


def compute_cost(plan: BatchPlan, lengths: Mapping[int, int]) -> Cost:
    cost = plan_cost(plan, lengths)
    valid = sum(lengths[s] for b in plan for s in b.sample_ids)
    return Cost(cost, valid, compute_jpad(plan, lengths))
