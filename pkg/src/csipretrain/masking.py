"""Double masking: MAE token masks and the additive key-padding bias."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .rng import make_rng
from .tensor_core import TokenSequence

MASK_KINDS = ("random", "time", "frequency")

# Stand-in for -inf: finite so that fully masked rows stay NaN-free, and small
# enough that exp(NEG_BIAS - rowmax) underflows to exactly 0.
NEG_BIAS = float(np.finfo(np.float64).min)


@dataclass(frozen=True, eq=False)
class MaeMask:
    kind: str
    hidden: np.ndarray = field(repr=False)  # bool over valid positions only
    param: float

    @property
    def valid_len(self) -> int:
        return self.hidden.shape[0]

    @property
    def n_hidden(self) -> int:
        return int(self.hidden.sum())

    def padded(self, length: int) -> np.ndarray:
        """Hidden flags extended with False over padding rows."""
        out = np.zeros(length, dtype=bool)
        out[: self.valid_len] = self.hidden
        return out


@dataclass(frozen=True, eq=False)
class AttnBias:
    M: np.ndarray = field(repr=False)  # (batch, L, L)
    valid_lens: tuple[int, ...]


def random_hide_count(ratio: float, valid_len: int) -> int:
    # round half up, stable across languages
    return int(math.floor(ratio * valid_len + 0.5))


def mae_mask(seq: TokenSequence, kind: str, param: float, seed: int = 0,
             patch_edge: int = 1) -> MaeMask:
    """Build an MAE mask over the valid tokens of ``seq``.

    ``random``: ``param`` is the hidden ratio in (0, 1); exactly
    ``round(param * L)`` positions are hidden, drawn without replacement.

    ``time`` / ``frequency``: ``param`` is the number of observed raw time
    blocks (subcarriers); ``patch_edge`` is the patch length along that axis.
    Tokens whose grid index is >= ceil(param / patch_edge) are hidden.  A cut
    covering the whole axis hides nothing.
    """
    L = seq.valid_len
    gt, gk, _ = seq.grid_shape
    coords = seq.coords[:L]
    if kind == "random":
        if not 0.0 < param < 1.0:
            raise ValueError(f"random mask ratio must lie in (0, 1), got {param}")
        n = random_hide_count(param, L)
        hidden = np.zeros(L, dtype=bool)
        if n:
            rng = make_rng(seed, "mae-random")
            hidden[rng.choice(L, size=n, replace=False)] = True
        return MaeMask(kind, hidden, float(param))
    if kind in ("time", "frequency"):
        axis, grid_len = (0, gt) if kind == "time" else (1, gk)
        if patch_edge < 1:
            raise ValueError("patch_edge must be >= 1")
        keep = int(param)
        if keep != param or not 1 <= keep <= grid_len * patch_edge:
            raise ValueError(
                f"{kind} cut {param} outside [1, {grid_len * patch_edge}] for grid length {grid_len}"
            )
        cut = -(-keep // patch_edge)
        return MaeMask(kind, coords[:, axis] >= cut, float(keep))
    raise ValueError(f"unknown mask kind {kind!r}; expected one of {MASK_KINDS}")


def key_valid(valid_lens: Sequence[int], L: int) -> np.ndarray:
    lens = np.asarray(valid_lens)
    return np.arange(L)[None, :] < lens[:, None]


def build_attn_bias(valid_lens: Sequence[int], L: int) -> AttnBias:
    """Additive bias masking padded keys; padded queries stay unmasked."""
    lens = tuple(int(v) for v in valid_lens)
    for b, v in enumerate(lens):
        if not 1 <= v <= L:
            raise ValueError(f"valid length {v} of sample {b} outside [1, {L}]")
    keys = key_valid(lens, L)
    M = np.where(keys[:, None, :], 0.0, NEG_BIAS)
    M = np.broadcast_to(M, (len(lens), L, L)).copy()
    return AttnBias(M, lens)


def key_bias(allowed: np.ndarray) -> np.ndarray:
    """(batch, L) key permissions -> (batch, 1, 1, L) bias, broadcastable over heads and queries."""
    return np.where(allowed, 0.0, NEG_BIAS)[:, None, None, :]
