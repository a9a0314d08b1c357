"""Glue between data, scheduling, masking and the model: training and evaluation loops."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .config import ExperimentConfig, MaskConfig
from .datagen import add_noise
from .masking import MASK_KINDS, MaeMask, mae_mask
from .metrics import nmse, to_db
from .model import Batch, ModelConfig, TrainState, collate, loss_and_grads, predict_task, train_step, flatten
from .rng import make_rng, stream_key
from .scheduler import BatchPlan, MiniBatch, SamplePool, PoolEntry, diversity_report, training_segments
from .tensor_core import CsiSample, PatchSpec, TokenSequence, depatchify, patchify

SPLITS = ("train", "val", "test")


def split_bounds(n: int) -> dict[str, tuple[int, int]]:
    """75 / 12.5 / 12.5 split by sample index (384:64:64 for 512 samples)."""
    n_train = n * 3 // 4
    n_val = n // 8
    return {"train": (0, n_train), "val": (n_train, n_train + n_val), "test": (n_train + n_val, n)}


class Corpus:
    """Noisy samples of several datasets with cached token sequences."""

    def __init__(self, datasets: dict[int, list[CsiSample]], patch: PatchSpec,
                 snr_db: float | None = 20.0, noise_seed: int = 0):
        self.patch = patch
        self.datasets: dict[int, list[CsiSample]] = {}
        self.by_id: dict[int, CsiSample] = {}
        for ds, samples in sorted(datasets.items()):
            if snr_db is not None:
                samples = [add_noise(s, snr_db, noise_seed) for s in samples]
            self.datasets[ds] = list(samples)
            for s in samples:
                self.by_id[s.sample_id] = s
        self._seqs: dict[int, TokenSequence] = {}

    def sequence(self, sample_id: int) -> TokenSequence:
        seq = self._seqs.get(sample_id)
        if seq is None:
            seq = self._seqs[sample_id] = patchify(self.by_id[sample_id], self.patch)
        return seq

    def split(self, dataset_id: int, split: str) -> list[CsiSample]:
        samples = self.datasets[dataset_id]
        lo, hi = split_bounds(len(samples))[split]
        return samples[lo:hi]

    def pool(self, split: str = "train", dataset_ids: Iterable[int] | None = None) -> SamplePool:
        ids = sorted(self.datasets) if dataset_ids is None else list(dataset_ids)
        return SamplePool(
            PoolEntry(s.sample_id, ds, self.sequence(s.sample_id).valid_len)
            for ds in ids for s in self.split(ds, split)
        )


@dataclass(frozen=True)
class MaskPolicy:
    cfg: MaskConfig
    patch: PatchSpec

    def kind_for(self, seed: int, step: int) -> str:
        kinds = [k for k in MASK_KINDS if self.cfg.kind_weights.get(k, 0) > 0]
        w = np.array([self.cfg.kind_weights[k] for k in kinds], dtype=np.float64)
        rng = make_rng(seed, "mask-kind", step)
        return kinds[int(rng.choice(len(kinds), p=w / w.sum()))]

    def task_param(self, kind: str, sample: CsiSample) -> float:
        T, K, _ = sample.data.shape
        if kind == "random":
            return self.cfg.random_ratio
        if kind == "time":
            return max(1, int(math.floor(self.cfg.time_observed_fraction * T)))
        return max(1, int(math.floor(self.cfg.freq_observed_fraction * K)))

    def mask(self, seq: TokenSequence, sample: CsiSample, kind: str, seed: int) -> MaeMask:
        param = self.task_param(kind, sample)
        edge = self.patch.t if kind == "time" else self.patch.k
        return mae_mask(seq, kind, param, seed, patch_edge=edge)


def make_batch(corpus: Corpus, mb: MiniBatch, policy: MaskPolicy, seed: int, step: int,
               kind: str | None = None) -> tuple[Batch, str]:
    kind = kind or policy.kind_for(seed, step)
    seqs, masks = [], []
    for sid in mb.sample_ids:
        seq = corpus.sequence(sid)
        seqs.append(seq)
        masks.append(policy.mask(seq, corpus.by_id[sid], kind, stream_key(seed, "mask", step, sid)))
    return collate(seqs, masks, pad_to=mb.padded_len), kind


def model_config(cfg: ExperimentConfig) -> ModelConfig:
    m = cfg.model
    return ModelConfig(
        token_dim=cfg.patch_spec.token_dim, embed_dim=m.embed_dim, heads=m.heads,
        encoder_depth=m.encoder_depth, decoder_depth=m.decoder_depth,
        mlp_ratio=m.mlp_ratio, max_grid=cfg.max_grid(),
    )


@dataclass
class TrainResult:
    state: TrainState
    log: list[dict]
    diversity: list[dict]
    plans: list[BatchPlan]


def run_training(cfg: ExperimentConfig, corpus: Corpus, strategy: str | None = None,
                 steps: int | None = None, buckets: int | None = None,
                 state: TrainState | None = None,
                 on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Scheduled, double-masked pretraining for ``steps`` updates."""
    strategy = strategy or cfg.schedule.strategy
    steps = cfg.train.steps if steps is None else steps
    buckets = buckets or cfg.schedule.buckets
    mcfg = model_config(cfg)
    state = state or TrainState.create(mcfg, cfg.seed)
    pool = corpus.pool("train")
    policy = MaskPolicy(cfg.masking, cfg.patch_spec)
    n_ds = pool.n_datasets
    log, div, plans = [], [], []
    step = 0
    for plan in training_segments(pool, strategy, cfg.schedule.batch_size, cfg.seed, steps, buckets):
        plans.append(plan)
        rep = diversity_report(plan, pool.datasets, n_ds, cfg.epsilon(), cfg.schedule.enforce_diversity)
        div.append({"epoch": plan.epoch, "batches": len(plan), "mean_entropy": rep.mean_entropy,
                    "epsilon": rep.epsilon, "violations": rep.violations})
        for j, mb in enumerate(plan):
            if step >= steps:
                break
            batch, kind = make_batch(corpus, mb, policy, cfg.seed, step)
            state, loss = train_step(state, mcfg, batch, cfg.train.learning_rate)
            valid = int(batch.valid_lens.sum())
            row = {"step": step, "epoch": plan.epoch, "batch": j, "mask": kind,
                   "batch_size": len(mb), "h": mb.padded_len,
                   "padding_ratio": 1.0 - valid / (len(mb) * mb.padded_len), "loss": loss}
            log.append(row)
            if on_step:
                on_step(row)
            step += 1
    return TrainResult(state, log, div, plans)


def hidden_region(seq: TokenSequence, hidden: np.ndarray, sample: CsiSample, patch: PatchSpec) -> np.ndarray:
    flags = np.repeat(hidden[:, None].astype(np.float64), seq.token_dim, axis=1)
    return depatchify(TokenSequence(flags, seq.valid_len, seq.grid_shape), sample.scale, patch).real > 0


def evaluate(params: dict, mcfg: ModelConfig, corpus: Corpus, dataset_ids: Sequence[int],
             split: str, tasks: Sequence[str], policy: MaskPolicy, seed: int,
             max_samples: int | None = None) -> list[dict]:
    """Mean per-sample linear NMSE per (dataset, task) on three regions.

    ``predicted`` covers the hidden entries, ``observed`` the entries handed
    to the model (always exact, so -inf dB) and ``full`` the whole tensor.
    Regions that are empty for a sample are skipped for that sample.
    """
    rows = []
    kinds = {"reconstruction": "random", "time": "time", "frequency": "frequency"}
    for ds in dataset_ids:
        samples = corpus.split(ds, split)[:max_samples]
        for task in tasks:
            acc = {"predicted": [], "observed": [], "full": []}
            for s in samples:
                param = policy.task_param(kinds[task], s)
                pred = predict_task(params, mcfg, s, corpus.patch, task, param,
                                    seed=stream_key(seed, "eval", s.sample_id))
                acc["full"].append(nmse(s.data, pred.tensor)[0])
                region = hidden_region(corpus.sequence(s.sample_id), pred.hidden_tokens, s, corpus.patch)
                for name, sel in (("predicted", region), ("observed", ~region)):
                    if sel.any():
                        acc[name].append(nmse(s.data[sel], pred.tensor[sel])[0])
            for name, vals in acc.items():
                lin = float(np.mean(vals)) if vals else math.nan
                rows.append({"dataset": ds, "split": split, "task": task, "region": name,
                             "n": len(vals), "nmse": lin,
                             "nmse_db": to_db(lin) if vals else math.nan})
    return rows


def batch_gradient_fn(params: dict, mcfg: ModelConfig, corpus: Corpus, policy: MaskPolicy, seed: int,
                      kind: str | None = None):
    """Closure returning the flat full-parameter gradient of one mini-batch at ``params``."""

    def grad(mb: MiniBatch, index: int) -> np.ndarray:
        batch, _ = make_batch(corpus, mb, policy, seed, step=stream_key(seed, "conflict", *mb.sample_ids) % (1 << 62),
                              kind=kind)
        _, g, _ = loss_and_grads(params, mcfg, batch)
        return flatten(g, mcfg)

    return grad
