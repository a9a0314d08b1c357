"""Toy ViT-style masked autoencoder over CSI tokens.

Pre-LN transformer blocks (masked multi-head attention + GELU MLP, both
residual).  The encoder sees only visible tokens: hidden tokens are zeroed
and removed as keys, padded tokens are removed as keys.  The decoder gets
encoder outputs at visible positions and a learned mask token everywhere
else, with positional embeddings added again.  Positional embeddings are
three learned tables (time, frequency, antenna) summed per token, so one
model serves every scale up to ``max_grid``.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .masking import MaeMask, key_bias, key_valid, mae_mask
from .rng import make_rng
from .tensor_core import CsiSample, PatchSpec, TokenSequence, depatchify, pad_tokens, patchify

CHECKPOINT_MAGIC = b"TMAE"
CHECKPOINT_VERSION = 1
TASKS = ("reconstruction", "time", "frequency")


class NumericAbort(FloatingPointError):
    """A loss or gradient became non-finite."""


@dataclass(frozen=True)
class ModelConfig:
    token_dim: int
    embed_dim: int = 32
    heads: int = 2
    encoder_depth: int = 2
    decoder_depth: int = 1
    mlp_ratio: int = 2
    max_grid: tuple[int, int, int] = (16, 16, 16)

    def __post_init__(self):
        object.__setattr__(self, "max_grid", tuple(int(g) for g in self.max_grid))
        for name in ("token_dim", "embed_dim", "heads", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.encoder_depth < 1 or self.decoder_depth < 1:
            raise ValueError("encoder and decoder depth must be >= 1")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if min(self.max_grid) < 1:
            raise ValueError("max_grid entries must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def max_len(self) -> int:
        return math.prod(self.max_grid)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["max_grid"] = list(self.max_grid)
        return d


# -- parameters ---------------------------------------------------------------------


def _block_shapes(prefix: str, d: int, hidden: int) -> list[tuple[str, tuple]]:
    return [
        (f"{prefix}.ln1.g", (d,)), (f"{prefix}.ln1.b", (d,)),
        (f"{prefix}.attn.wq", (d, d)), (f"{prefix}.attn.bq", (d,)),
        (f"{prefix}.attn.wk", (d, d)), (f"{prefix}.attn.bk", (d,)),
        (f"{prefix}.attn.wv", (d, d)), (f"{prefix}.attn.bv", (d,)),
        (f"{prefix}.attn.wo", (d, d)), (f"{prefix}.attn.bo", (d,)),
        (f"{prefix}.ln2.g", (d,)), (f"{prefix}.ln2.b", (d,)),
        (f"{prefix}.mlp.w1", (d, hidden)), (f"{prefix}.mlp.b1", (hidden,)),
        (f"{prefix}.mlp.w2", (hidden, d)), (f"{prefix}.mlp.b2", (d,)),
    ]


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple]]:
    """Canonical parameter order; gradient vectors are concatenated in this order."""
    d, hidden = cfg.embed_dim, cfg.embed_dim * cfg.mlp_ratio
    gt, gk, ga = cfg.max_grid
    shapes = [
        ("embed.w", (cfg.token_dim, d)), ("embed.b", (d,)),
        ("pos.time", (gt, d)), ("pos.freq", (gk, d)), ("pos.ant", (ga, d)),
    ]
    for i in range(cfg.encoder_depth):
        shapes += _block_shapes(f"enc{i}", d, hidden)
    shapes += [("enc_norm.g", (d,)), ("enc_norm.b", (d,)), ("mask_token", (d,))]
    for i in range(cfg.decoder_depth):
        shapes += _block_shapes(f"dec{i}", d, hidden)
    shapes += [("dec_norm.g", (d,)), ("dec_norm.b", (d,)),
               ("head.w", (d, cfg.token_dim)), ("head.b", (cfg.token_dim,))]
    return shapes


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    rng = make_rng(seed, "init")
    params = {}
    for name, shape in param_shapes(cfg):
        leaf = name.rsplit(".", 1)[-1]
        if name.startswith("pos.") or name == "mask_token":
            val = 0.02 * rng.standard_normal(shape)
        elif leaf == "g":
            val = np.ones(shape)
        elif len(shape) == 2:
            std = 1.0 / math.sqrt(shape[0])
            if leaf in ("wo", "w2") or name == "head.w":
                std *= 0.5
            val = std * rng.standard_normal(shape)
        else:
            val = np.zeros(shape)
        params[name] = val
    return params


def flatten(arrays: dict[str, np.ndarray], cfg: ModelConfig) -> np.ndarray:
    return np.concatenate([arrays[name].ravel() for name, _ in param_shapes(cfg)])


def n_params(cfg: ModelConfig) -> int:
    return sum(math.prod(s) for _, s in param_shapes(cfg))


# -- batches -----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Batch:
    tokens: np.ndarray       # (B, L, D)
    coords: np.ndarray       # (B, L, 3), zero on padding rows
    valid_lens: np.ndarray   # (B,)
    hidden: np.ndarray       # (B, L) bool, never set on padding rows

    @property
    def valid(self) -> np.ndarray:
        return key_valid(self.valid_lens, self.tokens.shape[1])

    @property
    def visible(self) -> np.ndarray:
        return self.valid & ~self.hidden


def collate(seqs: Sequence[TokenSequence], masks: Sequence[MaeMask], pad_to: int | None = None) -> Batch:
    L = max(s.valid_len for s in seqs)
    if pad_to is not None:
        if pad_to < L:
            raise ValueError(f"pad_to {pad_to} shorter than longest sequence {L}")
        L = pad_to
    padded = [pad_tokens(s, L) for s in seqs]
    hidden = np.stack([m.padded(L) for m in masks])
    for s, m in zip(seqs, masks):
        if m.valid_len != s.valid_len:
            raise ValueError("mask does not match its sequence length")
    return Batch(
        tokens=np.stack([p.tokens for p in padded]),
        coords=np.stack([p.coords for p in padded]),
        valid_lens=np.array([s.valid_len for s in seqs], dtype=np.int64),
        hidden=hidden,
    )


# -- forward ----------------------------------------------------------------------------


def masked_attention(Q, K, V, M) -> np.ndarray:
    """softmax(Q K^T / sqrt(d_k) + M) V for plain arrays.

    Q, K, V are ``(batch, L, d_k)`` or ``(batch, heads, L, d_k)``; ``M`` is
    ``(batch, L, L)`` (broadcast over heads) or already broadcastable.
    """
    Q, K, V, M = (np.asarray(x, dtype=np.float64) for x in (Q, K, V, M))
    for name, x in (("Q", Q), ("K", K), ("V", V)):
        if np.isnan(x).any():
            raise NumericAbort(f"NaN in attention input {name}")
    if Q.ndim == 4 and M.ndim == 3:
        M = M[:, None]
    return ag.attention(Tensor(Q), Tensor(K), Tensor(V), M).data


def _pos(P, coords: np.ndarray) -> Tensor:
    return (ag.gather_rows(P["pos.time"], coords[..., 0])
            + ag.gather_rows(P["pos.freq"], coords[..., 1])
            + ag.gather_rows(P["pos.ant"], coords[..., 2]))


def _block(P, prefix: str, x: Tensor, bias: np.ndarray, cfg: ModelConfig) -> Tensor:
    B, L, d = x.shape
    H, dk = cfg.heads, cfg.head_dim
    a = ag.layer_norm(x, P[f"{prefix}.ln1.g"], P[f"{prefix}.ln1.b"])

    def heads(w, b):
        t = a @ P[f"{prefix}.attn.{w}"] + P[f"{prefix}.attn.{b}"]
        return ag.transpose(ag.reshape(t, (B, L, H, dk)), (0, 2, 1, 3))

    ctx = ag.attention(heads("wq", "bq"), heads("wk", "bk"), heads("wv", "bv"), bias)
    ctx = ag.reshape(ag.transpose(ctx, (0, 2, 1, 3)), (B, L, d))
    x = x + (ctx @ P[f"{prefix}.attn.wo"] + P[f"{prefix}.attn.bo"])
    m = ag.layer_norm(x, P[f"{prefix}.ln2.g"], P[f"{prefix}.ln2.b"])
    m = ag.gelu(m @ P[f"{prefix}.mlp.w1"] + P[f"{prefix}.mlp.b1"])
    return x + (m @ P[f"{prefix}.mlp.w2"] + P[f"{prefix}.mlp.b2"])


def _check_coords(cfg: ModelConfig, coords: np.ndarray):
    if coords.size and np.any(coords.max(axis=(0, 1)) >= np.array(cfg.max_grid)):
        raise ValueError(f"token grid exceeds model max_grid {cfg.max_grid}")


def _graph(params: dict, cfg: ModelConfig, batch: Batch):
    if batch.tokens.shape[-1] != cfg.token_dim:
        raise ValueError(f"token_dim {batch.tokens.shape[-1]} != model token_dim {cfg.token_dim}")
    _check_coords(cfg, batch.coords)
    P = {n: Tensor(v, requires_grad=True, name=n) for n, v in params.items()}
    valid, visible = batch.valid, batch.visible
    # hidden content must not reach the encoder; padded rows keep theirs and rely on the key bias
    x_in = np.where(batch.hidden[..., None], 0.0, batch.tokens)
    h = ag.matmul(x_in, P["embed.w"]) + P["embed.b"] + _pos(P, batch.coords)
    enc_keys = visible.copy()
    starved = ~enc_keys.any(axis=1)
    enc_keys[starved] = valid[starved]  # fully hidden sample: attend over zeroed valid rows
    enc_bias = key_bias(enc_keys)
    for i in range(cfg.encoder_depth):
        h = _block(P, f"enc{i}", h, enc_bias, cfg)
    h = ag.layer_norm(h, P["enc_norm.g"], P["enc_norm.b"])
    z = ag.where(visible[..., None], h, P["mask_token"]) + _pos(P, batch.coords)
    dec_bias = key_bias(valid)
    for i in range(cfg.decoder_depth):
        z = _block(P, f"dec{i}", z, dec_bias, cfg)
    z = ag.layer_norm(z, P["dec_norm.g"], P["dec_norm.b"])
    out = z @ P["head.w"] + P["head.b"]
    loss = ag.masked_mse(out, batch.tokens, batch.hidden & valid)
    return P, out, loss


def forward(params: dict, cfg: ModelConfig, batch: Batch) -> tuple[np.ndarray, float]:
    """Reconstructed tokens ``(B, L, D)`` and the masked MSE loss."""
    _, out, loss = _graph(params, cfg, batch)
    return out.data, float(loss.data)


def loss_and_grads(params: dict, cfg: ModelConfig, batch: Batch):
    P, out, loss = _graph(params, cfg, batch)
    loss.backward()
    grads = {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in P.items()}
    return float(loss.data), grads, out.data


# -- optimization -------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TrainState:
    params: dict
    m: dict
    v: dict
    step: int = 0
    seed: int = 0

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int) -> "TrainState":
        params = init_params(cfg, seed)
        zeros = {n: np.zeros_like(p) for n, p in params.items()}
        return cls(params, zeros, {n: z.copy() for n, z in zeros.items()}, 0, seed)


@dataclass(frozen=True)
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def check_finite(loss: float, grads: dict, step: int | None = None):
    where = f" at step {step}" if step is not None else ""
    if not math.isfinite(loss):
        raise NumericAbort(f"non-finite loss{where}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericAbort(f"non-finite gradient in parameter block {name!r}{where}")


def train_step(state: TrainState, cfg: ModelConfig, batch: Batch, lr: float,
               adam: AdamConfig = AdamConfig()) -> tuple[TrainState, float]:
    loss, grads, _ = loss_and_grads(state.params, cfg, batch)
    check_finite(loss, grads, state.step)
    t = state.step + 1
    c1 = 1.0 - adam.beta1 ** t
    c2 = 1.0 - adam.beta2 ** t
    params, m, v = {}, {}, {}
    for n, p in state.params.items():
        g = grads[n]
        m[n] = adam.beta1 * state.m[n] + (1.0 - adam.beta1) * g
        v[n] = adam.beta2 * state.v[n] + (1.0 - adam.beta2) * g * g
        params[n] = p - lr * (m[n] / c1) / (np.sqrt(v[n] / c2) + adam.eps)
    return TrainState(params, m, v, t, state.seed), loss


# -- checkpoints -----------------------------------------------------------------------------


def checkpoint_bytes(cfg: ModelConfig, params: dict, step: int) -> bytes:
    buf = io.BytesIO()
    meta = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<IIQ", CHECKPOINT_VERSION, len(meta), step))
    buf.write(meta)
    shapes = param_shapes(cfg)
    buf.write(struct.pack("<I", len(shapes)))
    for name, shape in shapes:
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        if arr.shape != shape:
            raise ValueError(f"parameter {name} has shape {arr.shape}, expected {shape}")
        enc = name.encode()
        buf.write(struct.pack("<I", len(enc)) + enc)
        buf.write(struct.pack("<I", len(shape)) + struct.pack(f"<{len(shape)}I", *shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def save_checkpoint(path: str | Path, cfg: ModelConfig, params: dict, step: int) -> None:
    Path(path).write_bytes(checkpoint_bytes(cfg, params, step))


def load_checkpoint(path: str | Path) -> tuple[ModelConfig, dict, int]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, meta_len, step = struct.unpack_from("<IIQ", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 4 + 16
    cfg = ModelConfig(**json.loads(raw[off:off + meta_len]))
    off += meta_len
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, off)
        name = raw[off + 4:off + 4 + nlen].decode()
        off += 4 + nlen
        (ndim,) = struct.unpack_from("<I", raw, off)
        shape = struct.unpack_from(f"<{ndim}I", raw, off + 4)
        off += 4 + 4 * ndim
        n = math.prod(shape)
        params[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    return cfg, params, step


# -- task inference --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Prediction:
    tensor: np.ndarray = field(repr=False)
    hidden_tokens: np.ndarray = field(repr=False)


def task_mask(seq: TokenSequence, patch: PatchSpec, task: str, param: float, seed: int = 0) -> MaeMask:
    if task == "reconstruction":
        return mae_mask(seq, "random", param, seed)
    if task == "time":
        return mae_mask(seq, "time", param, patch_edge=patch.t)
    if task == "frequency":
        return mae_mask(seq, "frequency", param, patch_edge=patch.k)
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


def predict_task(params: dict, cfg: ModelConfig, sample: CsiSample, patch: PatchSpec,
                 task: str, param: float, seed: int = 0) -> Prediction:
    """Predict the masked part of ``sample`` for one task and splice it into the observation.

    ``param`` is the hidden ratio for reconstruction, the number of observed
    time blocks for ``time`` and of observed subcarriers for ``frequency``.
    """
    seq = patchify(sample, patch)
    mask = task_mask(seq, patch, task, param, seed)
    batch = collate([seq], [mask])
    recon, _ = forward(params, cfg, batch)
    tokens = np.where(mask.hidden[:, None], recon[0, : seq.valid_len], seq.tokens)
    out = TokenSequence(tokens, seq.valid_len, seq.grid_shape)
    return Prediction(depatchify(out, sample.scale, patch), mask.hidden)
