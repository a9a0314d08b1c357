"""Synthetic multipath CSI datasets.

Each sample is a sum of plane-wave paths over a (time, subcarrier, antenna)
grid::

    H[t, k, a] = sum_p g_p * exp(j*2*pi*(nu_p*t*dt - tau_p*k*df)) * exp(j*pi*a*sin(theta_p))

with per-sample draws of gains, Doppler shifts, delays and angles taken from
a scenario preset.  Samples are normalized to unit average power.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .rng import PRNG_NAME, make_rng
from .tensor_core import CsiSample, ScaleSpec, save_dataset

SAMPLE_ID_STRIDE = 1 << 20


@dataclass(frozen=True)
class ScenarioPreset:
    name: str
    num_paths: int
    delay_spread: float
    doppler_spread: float
    angle_spread: float
    power_decay_db: float = 0.0

    def __post_init__(self):
        if self.num_paths < 1:
            raise ValueError(f"preset {self.name}: num_paths must be >= 1")
        for attr in ("delay_spread", "doppler_spread", "angle_spread"):
            if not getattr(self, attr) > 0:
                raise ValueError(f"preset {self.name}: {attr} must be > 0")


@dataclass(frozen=True)
class DatasetSpec:
    scenario: ScenarioPreset
    scale: ScaleSpec
    n_samples: int
    seed: int
    carrier_spacing: float = 30e3
    time_step: float = 5e-4
    dataset_id: int = 0
    scenario_id: int = 0
    name: str = field(default="")

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.n_samples > SAMPLE_ID_STRIDE:
            raise ValueError(f"n_samples must be <= {SAMPLE_ID_STRIDE}")
        if self.carrier_spacing <= 0 or self.time_step <= 0:
            raise ValueError("carrier_spacing and time_step must be > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale"] = list(self.scale.shape)
        return d


@lru_cache(maxsize=None)
def _preset_table() -> dict:
    text = resources.files("csipretrain").joinpath("data/presets.yaml").read_text()
    return yaml.safe_load(text)


def preset_version() -> int:
    return int(_preset_table()["version"])


def preset_names() -> list[str]:
    return list(_preset_table()["presets"])


def get_preset(name: str) -> ScenarioPreset:
    table = _preset_table()["presets"]
    if name not in table:
        raise KeyError(f"unknown scenario preset {name!r}; known: {sorted(table)}")
    return ScenarioPreset(name=name, **table[name])


def default_spacing() -> tuple[float, float]:
    d = _preset_table()["defaults"]
    return float(d["carrier_spacing"]), float(d["time_step"])


def synthesize_channel(gains, dopplers, delays, angles, scale: ScaleSpec,
                       time_step: float, carrier_spacing: float) -> np.ndarray:
    """Sum of complex exponentials for explicit path parameters (no normalization)."""
    gains = np.asarray(gains, dtype=np.complex128)
    t = np.arange(scale.T)
    k = np.arange(scale.K)
    a = np.arange(scale.A)
    pt = np.exp(2j * np.pi * np.outer(dopplers, t) * time_step)
    pk = np.exp(-2j * np.pi * np.outer(delays, k) * carrier_spacing)
    pa = np.exp(1j * np.pi * np.outer(np.sin(angles), a))
    return np.einsum("p,pt,pk,pa->tka", gains, pt, pk, pa)


def draw_paths(preset: ScenarioPreset, rng: np.random.Generator):
    P = preset.num_paths
    power = 10.0 ** (-preset.power_decay_db * np.arange(P) / 10.0)
    power /= power.sum()
    gains = np.sqrt(power / 2) * (rng.standard_normal(P) + 1j * rng.standard_normal(P))
    dopplers = preset.doppler_spread * np.cos(rng.uniform(0.0, 2 * np.pi, P))
    delays = preset.delay_spread * rng.exponential(1.0, P)
    center = rng.uniform(-np.pi / 3, np.pi / 3)
    angles = center + preset.angle_spread * rng.standard_normal(P)
    return gains, dopplers, delays, angles


def generate_sample(spec: DatasetSpec, index: int) -> CsiSample:
    sample_id = spec.dataset_id * SAMPLE_ID_STRIDE + index
    rng = make_rng(spec.seed, "channel", sample_id)
    H = synthesize_channel(*draw_paths(spec.scenario, rng), spec.scale,
                           spec.time_step, spec.carrier_spacing)
    power = np.mean(np.abs(H) ** 2)
    if power > 0:
        H = H / np.sqrt(power)
    return CsiSample(H, spec.scenario_id, spec.dataset_id, sample_id)


def generate_dataset(spec: DatasetSpec) -> list[CsiSample]:
    return [generate_sample(spec, i) for i in range(spec.n_samples)]


def add_noise(sample: CsiSample, snr_db: float, seed: int) -> CsiSample:
    """Add circular complex Gaussian noise at ``snr_db`` relative to the sample's own power."""
    H = sample.data
    signal_power = np.mean(np.abs(H) ** 2)
    noise_power = signal_power / 10.0 ** (snr_db / 10.0)
    rng = make_rng(seed, "noise", sample.sample_id)
    n = rng.standard_normal(H.shape) + 1j * rng.standard_normal(H.shape)
    return sample.with_data(H + np.sqrt(noise_power / 2) * n)


def lag1_time_correlation(samples) -> float:
    """Mean normalized lag-1 temporal autocorrelation (real part)."""
    vals = []
    for s in samples:
        H = s.data if isinstance(s, CsiSample) else s
        num = np.sum(H[1:] * np.conj(H[:-1]))
        den = np.sum(np.abs(H) ** 2) * (H.shape[0] - 1) / H.shape[0]
        vals.append((num / den).real)
    return float(np.mean(vals))


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_dataset(spec: DatasetSpec, path: str | Path, samples=None) -> dict:
    """Write the binary dataset and its JSON manifest; return the manifest."""
    path = Path(path)
    if samples is None:
        samples = generate_dataset(spec)
    save_dataset(path, samples)
    manifest = {
        "format_version": 1,
        "preset_version": preset_version(),
        "prng": PRNG_NAME,
        "spec": spec.to_dict(),
        "seed": spec.seed,
        "n_samples": len(samples),
        "sha256": file_sha256(path),
    }
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_suffix(".manifest.json")
