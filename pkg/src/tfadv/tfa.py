"""Short-time Fourier transform and its overlap-add inverse.

Frames are centred: frame ``m`` covers samples ``m*hop - length//2`` up to
``m*hop + length//2``, with zeros outside the record. The phase reference
is absolute time, i.e.

    X[k, m] = sum_n x[n] h[n - m*hop] exp(-2j*pi*k*n / fft_size)

with ``h`` the centred window. The inverse uses weighted overlap-add
normalised by the squared-window sum, so reconstruction is exact whenever
that sum is nonzero over the record.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ShapeError

GRID_MAGIC = b"TFGRD001"
_KINDS = ("hann", "boxcar")
_GRID_HEADER = struct.Struct("<8sIIBIIII")


@dataclass(frozen=True)
class WindowSpec:
    kind: str = "hann"
    length: int = 128
    hop: int = 32
    fft_size: int = 128

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ConfigError(f"unknown window kind {self.kind!r}; expected one of {_KINDS}")
        if self.length < 1 or self.hop < 1:
            raise ConfigError("window length and hop must be positive")
        if self.fft_size < self.length:
            raise ConfigError("fft_size must be >= window length")
        if self.length % self.hop:
            raise ConfigError("hop must divide the window length")
        # constant squared-window overlap sum => exact, shift-invariant OLA
        w2 = self.window() ** 2
        ola = w2.reshape(-1, self.hop).sum(axis=0)
        if ola.min() <= 0 or np.ptp(ola) > 1e-9 * ola.max():
            raise ConfigError(f"{self} violates the overlap-add condition")

    def window(self) -> np.ndarray:
        if self.kind == "boxcar":
            return np.ones(self.length)
        n = np.arange(self.length)
        return 0.5 - 0.5 * np.cos(2 * np.pi * n / self.length)

    def n_frames(self, n_samples: int) -> int:
        return 1 + -(-n_samples // self.hop)


@dataclass
class StftGrid:
    data: np.ndarray
    window: WindowSpec
    original_length: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.complex128)
        expect = (self.window.fft_size, self.window.n_frames(self.original_length))
        if self.data.shape[-2:] != expect:
            raise ShapeError(f"grid shape {self.data.shape} inconsistent with {expect}")

    @property
    def shape(self):
        return self.data.shape


def _phase(w: WindowSpec, n_frames: int) -> np.ndarray:
    # exp(-2j pi k (m*hop - length//2) / fft_size), shape (fft_size, n_frames)
    k = np.arange(w.fft_size)[:, None]
    start = np.arange(n_frames)[None, :] * w.hop - w.length // 2
    return np.exp(-2j * np.pi * ((k * start) % w.fft_size) / w.fft_size)


def stft_array(x: np.ndarray, w: WindowSpec) -> np.ndarray:
    """STFT of ``x`` with shape (..., N) -> complex (..., fft_size, frames)."""
    x = np.asarray(x)
    n = x.shape[-1]
    m = w.n_frames(n)
    half = w.length // 2
    padded_len = (m - 1) * w.hop + w.length
    xp = np.zeros(x.shape[:-1] + (padded_len,), dtype=x.dtype)
    xp[..., half:half + n] = x
    frames = np.lib.stride_tricks.sliding_window_view(xp, w.length, axis=-1)[..., ::w.hop, :]
    spectra = np.fft.fft(frames * w.window(), n=w.fft_size, axis=-1)  # (..., m, F)
    return np.swapaxes(spectra, -1, -2) * _phase(w, m)


def istft_array(data: np.ndarray, w: WindowSpec, length: int) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft_array`; complex output."""
    m = data.shape[-1]
    if data.shape[-2] != w.fft_size or m != w.n_frames(length):
        raise ShapeError(f"grid shape {data.shape[-2:]} does not match window/length")
    local = np.fft.ifft(data * np.conj(_phase(w, m)), axis=-2)[..., :w.length, :]
    win = w.window()
    local = local * win[:, None]
    padded_len = (m - 1) * w.hop + w.length
    out = np.zeros(data.shape[:-2] + (padded_len,), dtype=np.complex128)
    norm = np.zeros(padded_len)
    for j in range(m):
        s = j * w.hop
        out[..., s:s + w.length] += local[..., j]
        norm[s:s + w.length] += win**2
    half = w.length // 2
    return out[..., half:half + length] / norm[half:half + length]


def stft(sig, w: WindowSpec | None = None) -> StftGrid:
    """STFT of a :class:`TimeSignal` or a 1-D array."""
    w = w or WindowSpec()
    x = np.asarray(getattr(sig, "samples", sig), dtype=np.float64)
    return StftGrid(stft_array(x, w), w, x.shape[-1])


def istft(grid: StftGrid) -> np.ndarray:
    return istft_array(grid.data, grid.window, grid.original_length)


def split_complex(grid: StftGrid) -> tuple[np.ndarray, np.ndarray]:
    return grid.data.real.copy(), grid.data.imag.copy()


def join_complex(real: np.ndarray, imag: np.ndarray, w: WindowSpec, length: int) -> StftGrid:
    real, imag = np.asarray(real, dtype=np.float64), np.asarray(imag, dtype=np.float64)
    if real.shape != imag.shape:
        raise ShapeError(f"plane shapes differ: {real.shape} vs {imag.shape}")
    data = np.empty(real.shape, dtype=np.complex128)
    data.real, data.imag = real, imag
    return StftGrid(data, w, length)


def write_grid(path, grid: StftGrid) -> None:
    w = grid.window
    bins, frames = grid.data.shape[-2:]
    header = _GRID_HEADER.pack(GRID_MAGIC, bins, frames, _KINDS.index(w.kind),
                               w.length, w.hop, w.fft_size, grid.original_length)
    inter = np.empty((bins, frames, 2), dtype="<f4")
    inter[..., 0], inter[..., 1] = grid.data.real, grid.data.imag
    Path(path).write_bytes(header + inter.tobytes())


def read_grid(path) -> StftGrid:
    raw = Path(path).read_bytes()
    if len(raw) < _GRID_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, bins, frames, kind, length, hop, fft_size, orig = _GRID_HEADER.unpack_from(raw)
    if magic != GRID_MAGIC or kind >= len(_KINDS):
        raise FormatError(f"{path}: not a TFGRD001 file")
    body = raw[_GRID_HEADER.size:]
    if len(body) != bins * frames * 8:
        raise FormatError(f"{path}: payload length {len(body)} != {bins * frames * 8}")
    inter = np.frombuffer(body, dtype="<f4").reshape(bins, frames, 2).astype(np.float64)
    w = WindowSpec(_KINDS[kind], length, hop, fft_size)
    return join_complex(inter[..., 0], inter[..., 1], w, orig)
