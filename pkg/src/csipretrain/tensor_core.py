"""CSI tensors, 3D patching and token padding.

A CSI sample is a complex tensor of shape ``(T, K, A)`` (time blocks,
subcarriers, antenna ports).  ``patchify`` cuts it into ``(t, k, a)`` patches
in time-major grid order and flattens each patch into one real token of
width ``2*t*k*a``: all real parts of the patch first, then all imaginary parts.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

MAGIC = 0x31495343  # b"CSI1" read as little-endian u32
FORMAT_VERSION = 1
_RECORD_HEADER = struct.Struct("<8I")
_COUNT = struct.Struct("<I")


class ShapeError(ValueError):
    """Tensor or token shapes are inconsistent."""


class SampleFormatError(ValueError):
    """A binary dataset file is malformed."""


@dataclass(frozen=True)
class ScaleSpec:
    T: int
    K: int
    A: int

    def __post_init__(self):
        for name in ("T", "K", "A"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"ScaleSpec.{name} must be >= 1, got {getattr(self, name)}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.T, self.K, self.A)


@dataclass(frozen=True)
class PatchSpec:
    t: int = 2
    k: int = 2
    a: int = 2

    def __post_init__(self):
        for name in ("t", "k", "a"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"PatchSpec.{name} must be >= 1, got {getattr(self, name)}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.t, self.k, self.a)

    @property
    def token_dim(self) -> int:
        return 2 * self.t * self.k * self.a


@dataclass(frozen=True, eq=False)
class CsiSample:
    """One complex channel tensor with its provenance.

    ``data`` is held as ``complex128``; on disk it is written as a real block
    followed by an imaginary block.
    """

    data: np.ndarray
    scenario_id: int = 0
    dataset_id: int = 0
    sample_id: int = 0

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ShapeError(f"CSI data must be 3D (T, K, A), got shape {arr.shape}")
        arr = arr.astype(np.complex128, copy=False)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"sample {self.sample_id}: CSI data contains NaN or Inf")
        object.__setattr__(self, "data", arr)

    @property
    def scale(self) -> ScaleSpec:
        return ScaleSpec(*self.data.shape)

    def with_data(self, data: np.ndarray) -> "CsiSample":
        return replace(self, data=data)


@dataclass(frozen=True, eq=False)
class TokenSequence:
    tokens: np.ndarray
    valid_len: int
    grid_shape: tuple[int, int, int]
    coords: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.valid_len != math.prod(self.grid_shape):
            raise ShapeError(
                f"valid_len {self.valid_len} != prod(grid_shape {self.grid_shape})"
            )
        if self.tokens.ndim != 2 or self.tokens.shape[0] < self.valid_len:
            raise ShapeError(f"tokens shape {self.tokens.shape} cannot hold {self.valid_len} tokens")
        if self.coords is None:
            object.__setattr__(self, "coords", grid_coords(self.grid_shape))

    @property
    def padded_len(self) -> int:
        return self.tokens.shape[0]

    @property
    def token_dim(self) -> int:
        return self.tokens.shape[1]


def token_length(scale: ScaleSpec, patch: PatchSpec) -> int:
    return math.prod(grid_shape(scale, patch))


def grid_shape(scale: ScaleSpec, patch: PatchSpec) -> tuple[int, int, int]:
    return (
        -(-scale.T // patch.t),
        -(-scale.K // patch.k),
        -(-scale.A // patch.a),
    )


def grid_coords(grid: tuple[int, int, int]) -> np.ndarray:
    """(time, freq, antenna) grid index of every token, in token order."""
    gt, gk, ga = grid
    idx = np.indices((gt, gk, ga)).reshape(3, -1).T
    return np.ascontiguousarray(idx, dtype=np.int64)


def patchify(sample: CsiSample | np.ndarray, patch: PatchSpec) -> TokenSequence:
    data = sample.data if isinstance(sample, CsiSample) else np.asarray(sample, dtype=np.complex128)
    if not np.all(np.isfinite(data)):
        raise ValueError("cannot patchify CSI containing NaN or Inf")
    scale = ScaleSpec(*data.shape)
    gt, gk, ga = grid_shape(scale, patch)
    t, k, a = patch.shape
    full = np.zeros((gt * t, gk * k, ga * a), dtype=np.complex128)
    full[: scale.T, : scale.K, : scale.A] = data
    blocks = full.reshape(gt, t, gk, k, ga, a).transpose(0, 2, 4, 1, 3, 5)
    blocks = blocks.reshape(gt * gk * ga, t * k * a)
    tokens = np.concatenate([blocks.real, blocks.imag], axis=1)
    return TokenSequence(np.ascontiguousarray(tokens), gt * gk * ga, (gt, gk, ga))


def depatchify(seq: TokenSequence, scale: ScaleSpec, patch: PatchSpec) -> np.ndarray:
    grid = grid_shape(scale, patch)
    if tuple(seq.grid_shape) != grid:
        raise ShapeError(f"grid {seq.grid_shape} does not match {grid} for scale {scale.shape}")
    if seq.token_dim != patch.token_dim:
        raise ShapeError(f"token_dim {seq.token_dim} != {patch.token_dim} for patch {patch.shape}")
    gt, gk, ga = grid
    t, k, a = patch.shape
    n = t * k * a
    valid = seq.tokens[: seq.valid_len]
    blocks = valid[:, :n] + 1j * valid[:, n:]
    full = blocks.reshape(gt, gk, ga, t, k, a).transpose(0, 3, 1, 4, 2, 5)
    full = full.reshape(gt * t, gk * k, ga * a)
    return np.ascontiguousarray(full[: scale.T, : scale.K, : scale.A])


def pad_tokens(seq: TokenSequence, target_len: int) -> TokenSequence:
    """Zero-pad ``seq`` to ``target_len`` rows; never truncates."""
    if target_len < seq.valid_len:
        raise ValueError(
            f"target_len {target_len} < valid_len {seq.valid_len}: sequences are never truncated"
        )
    tokens = np.zeros((target_len, seq.token_dim), dtype=np.float64)
    tokens[: seq.valid_len] = seq.tokens[: seq.valid_len]
    coords = np.zeros((target_len, 3), dtype=np.int64)
    coords[: seq.valid_len] = seq.coords[: seq.valid_len]
    return TokenSequence(tokens, seq.valid_len, seq.grid_shape, coords)


# -- binary dataset files ---------------------------------------------------


def write_samples(fh: BinaryIO, samples: Iterable[CsiSample]) -> None:
    samples = list(samples)
    fh.write(_COUNT.pack(len(samples)))
    for s in samples:
        T, K, A = s.data.shape
        fh.write(_RECORD_HEADER.pack(MAGIC, FORMAT_VERSION, T, K, A,
                                     s.scenario_id, s.dataset_id, s.sample_id))
        fh.write(np.ascontiguousarray(s.data.real, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(s.data.imag, dtype="<f8").tobytes())


def read_samples(fh: BinaryIO) -> list[CsiSample]:
    raw = fh.read(_COUNT.size)
    if len(raw) != _COUNT.size:
        raise SampleFormatError("truncated file: missing sample count")
    (count,) = _COUNT.unpack(raw)
    out = []
    for i in range(count):
        raw = fh.read(_RECORD_HEADER.size)
        if len(raw) != _RECORD_HEADER.size:
            raise SampleFormatError(f"truncated header in record {i}")
        magic, version, T, K, A, scen, ds, sid = _RECORD_HEADER.unpack(raw)
        if magic != MAGIC:
            raise SampleFormatError(f"bad magic 0x{magic:08x} in record {i}")
        if version != FORMAT_VERSION:
            raise SampleFormatError(f"unsupported format version {version}")
        n = T * K * A
        body = fh.read(16 * n)
        if len(body) != 16 * n:
            raise SampleFormatError(f"truncated payload in record {i}")
        vals = np.frombuffer(body, dtype="<f8").astype(np.float64)
        data = vals[:n].reshape(T, K, A) + 1j * vals[n:].reshape(T, K, A)
        out.append(CsiSample(data, scen, ds, sid))
    if fh.read(1):
        raise SampleFormatError("trailing bytes after last record")
    return out


def save_dataset(path: str | Path, samples: Iterable[CsiSample]) -> None:
    with open(path, "wb") as fh:
        write_samples(fh, samples)


def load_dataset(path: str | Path) -> list[CsiSample]:
    with open(path, "rb") as fh:
        return read_samples(fh)
