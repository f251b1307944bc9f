"""Radar waveform synthesis: Barker-13, Costas-7 and LFM pulses plus AWGN.

Frequencies are expressed in cycles/sample (``sample_rate`` defaults to 1.0,
so Nyquist is 0.5). Every noise-free waveform is scaled to unit RMS before
noise is added, which makes ``snr_db`` relative to a known reference power.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DegenerateInputError, FormatError

CLASS_NAMES = ("barker", "costas", "lfm")
BARKER, COSTAS, LFM = 0, 1, 2

BARKER_13 = np.array([1, 1, 1, 1, 1, -1, -1, 1, 1, -1, 1, -1, 1], dtype=np.int8)
COSTAS_7 = np.array([0, 2, 5, 1, 6, 3, 4], dtype=np.int64)

SIGNAL_MAGIC = b"TFSIG001"
_HEADER = struct.Struct("<8sB7x")


@dataclass(frozen=True)
class WaveformConfig:
    n_samples: int = 1024
    sample_rate: float = 1.0
    carrier_range: tuple[float, float] = (0.08, 0.20)
    lfm_bandwidth_range: tuple[float, float] = (0.10, 0.22)
    costas_step: float = 0.035
    barker_code_length: int = 13
    costas_order: int = 7
    snr_range_db: tuple[float, float] = (-10.0, 10.0)

    def validate(self) -> None:
        nyq = self.sample_rate / 2
        lo, hi = self.carrier_range
        if self.n_samples < 1:
            raise ConfigError("n_samples must be positive")
        if self.barker_code_length != 13:
            raise ConfigError("only the length-13 Barker code is embedded")
        if self.costas_order != len(COSTAS_7):
            raise ConfigError("only the order-7 Costas permutation is embedded")
        if not 0 <= lo <= hi:
            raise ConfigError(f"bad carrier_range {self.carrier_range}")
        if hi >= nyq:
            raise ConfigError(f"carrier {hi} at or above Nyquist {nyq}")
        blo, bhi = self.lfm_bandwidth_range
        if not 0 <= blo <= bhi:
            raise ConfigError(f"bad lfm_bandwidth_range {self.lfm_bandwidth_range}")
        if hi + bhi >= nyq:
            raise ConfigError("LFM sweep can exceed Nyquist")
        if hi + (self.costas_order - 1) * self.costas_step >= nyq:
            raise ConfigError("Costas hop pattern can exceed Nyquist")
        slo, shi = self.snr_range_db
        if not slo <= shi:
            raise ConfigError(f"bad snr_range_db {self.snr_range_db}")


@dataclass
class TimeSignal:
    samples: np.ndarray
    label: int
    sample_rate: float = 1.0
    snr_db: float = float("inf")
    seed: int | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("samples must be one-dimensional")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples must be finite")
        if self.label not in (0, 1, 2):
            raise ValueError(f"label must be 0, 1 or 2, got {self.label}")

    def __len__(self) -> int:
        return len(self.samples)


def _unit_rms(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(x**2))


def synth_barker(cfg: WaveformConfig, rng: np.random.Generator) -> TimeSignal:
    """Biphase Barker-13 pulse: carrier phase flipped by pi on each -1 chip."""
    cfg.validate()
    f0 = rng.uniform(*cfg.carrier_range)
    n = np.arange(cfg.n_samples)
    chip = (n * len(BARKER_13)) // cfg.n_samples
    x = BARKER_13[chip] * np.cos(2 * np.pi * f0 * n)
    return TimeSignal(_unit_rms(x), BARKER, cfg.sample_rate)


def synth_costas(cfg: WaveformConfig, rng: np.random.Generator) -> TimeSignal:
    """Frequency-hopped pulse following the embedded Costas permutation.

    Phase is kept continuous across hops so the only discontinuity is in
    instantaneous frequency.
    """
    cfg.validate()
    f_base = rng.uniform(*cfg.carrier_range)
    n = np.arange(cfg.n_samples)
    sub = (n * cfg.costas_order) // cfg.n_samples
    freq = f_base + COSTAS_7[sub] * cfg.costas_step
    phase = 2 * np.pi * np.concatenate(([0.0], np.cumsum(freq[:-1])))
    return TimeSignal(_unit_rms(np.cos(phase)), COSTAS, cfg.sample_rate)


def chirp_phase(f0: float, bandwidth: float, n_samples: int) -> np.ndarray:
    """Phase of a linear chirp sweeping ``f0 -> f0 + bandwidth`` over the record."""
    n = np.arange(n_samples)
    return 2 * np.pi * (f0 * n + 0.5 * (bandwidth / n_samples) * n**2)


def synth_lfm(cfg: WaveformConfig, rng: np.random.Generator) -> TimeSignal:
    cfg.validate()
    f0 = rng.uniform(*cfg.carrier_range)
    bw = rng.uniform(*cfg.lfm_bandwidth_range)
    if f0 + bw >= cfg.sample_rate / 2:
        raise ConfigError("LFM sweep exceeds Nyquist")
    x = np.cos(chirp_phase(f0, bw, cfg.n_samples))
    return TimeSignal(_unit_rms(x), LFM, cfg.sample_rate)


SYNTHESIZERS = (synth_barker, synth_costas, synth_lfm)


def add_awgn(sig: TimeSignal, snr_db: float, rng: np.random.Generator) -> TimeSignal:
    """Return ``sig`` plus white Gaussian noise at ``snr_db`` relative to its empirical power."""
    if not np.isfinite(snr_db):
        raise ValueError("snr_db must be finite")
    ps = np.mean(sig.samples**2)
    if ps == 0:
        raise DegenerateInputError("SNR undefined for an all-zero signal")
    pn = ps / 10 ** (snr_db / 10)
    noisy = sig.samples + rng.normal(0.0, np.sqrt(pn), size=len(sig))
    return dataclasses.replace(sig, samples=noisy, snr_db=float(snr_db))


def sample_rng(global_seed: int, *keys: int) -> np.random.Generator:
    """Independent stream for one sample, keyed by (global seed, split, index, ...)."""
    return np.random.default_rng(np.random.SeedSequence([global_seed, *keys]))


def make_sample(label: int, cfg: WaveformConfig, rng: np.random.Generator,
                seed: int | None = None) -> TimeSignal:
    clean = SYNTHESIZERS[label](cfg, rng)
    snr = rng.uniform(*cfg.snr_range_db)
    noisy = add_awgn(clean, snr, rng)
    noisy.seed = seed
    return noisy


@dataclass
class Dataset:
    signals: list[TimeSignal]
    cfg: WaveformConfig = field(default_factory=WaveformConfig)
    seed: int = 0

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.signals], dtype=np.int64)

    def samples(self) -> np.ndarray:
        return np.stack([s.samples for s in self.signals])

    def __len__(self) -> int:
        return len(self.signals)


def generate_dataset(per_class: int, cfg: WaveformConfig | None = None, seed: int = 0,
                     split: int = 0, classes: Sequence[int] = (0, 1, 2)) -> Dataset:
    """Balanced dataset, ordered class-major. Sample ``i`` of class ``c`` uses
    the stream ``sample_rng(seed, split, c, i)``."""
    cfg = cfg or WaveformConfig()
    cfg.validate()
    signals = []
    for c in classes:
        for i in range(per_class):
            rng = sample_rng(seed, split, c, i)
            sig = make_sample(c, cfg, rng, seed=seed)
            # stored as float32 on disk; keep in-memory copy identical
            sig.samples = sig.samples.astype(np.float32).astype(np.float64)
            signals.append(sig)
    return Dataset(signals, cfg, seed)


# -- file formats -----------------------------------------------------------

def write_signal(path, sig: TimeSignal) -> None:
    payload = np.asarray(sig.samples, dtype="<f4").tobytes()
    Path(path).write_bytes(_HEADER.pack(SIGNAL_MAGIC, sig.label) + payload)


def read_signal(path, sample_rate: float = 1.0) -> TimeSignal:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, label = _HEADER.unpack_from(raw)
    if magic != SIGNAL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    body = raw[_HEADER.size:]
    if len(body) % 4:
        raise FormatError(f"{path}: payload not a whole number of float32 values")
    if label > 2:
        raise FormatError(f"{path}: bad label {label}")
    x = np.frombuffer(body, dtype="<f4").astype(np.float64)
    return TimeSignal(x, int(label), sample_rate)


def save_dataset(ds: Dataset, directory, extra: dict | None = None) -> Path:
    """Write one ``.tfsig`` record per sample plus ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    records = []
    for i, s in enumerate(ds.signals):
        name = f"{i:05d}.tfsig"
        write_signal(d / name, s)
        records.append({"file": name, "label": s.label, "snr_db": round(s.snr_db, 6)})
    counts = {CLASS_NAMES[c]: int(np.sum(ds.labels == c)) for c in range(3)}
    manifest = {
        "format": "TFSIG001",
        "class_names": list(CLASS_NAMES),
        "counts": counts,
        "global_seed": ds.seed,
        "config": dataclasses.asdict(ds.cfg),
        "samples": records,
    }
    if extra:
        manifest.update(extra)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.is_file():
        raise FileNotFoundError(f"no manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    cfg_fields = {k: tuple(v) if isinstance(v, list) else v
                  for k, v in manifest["config"].items()}
    cfg = WaveformConfig(**cfg_fields)
    signals = []
    for rec in manifest["samples"]:
        s = read_signal(d / rec["file"], cfg.sample_rate)
        if s.label != rec["label"]:
            raise FormatError(f"{rec['file']}: label disagrees with manifest")
        s.snr_db = rec["snr_db"]
        s.seed = manifest["global_seed"]
        signals.append(s)
    return Dataset(signals, cfg, manifest["global_seed"])
