"""Time-frequency image rendering with an exact backward pass.

Pipeline, per image:

    magnitude -> per-image min-max normalisation -> colormap LUT -> bilinear resize

All stages act on arrays with arbitrary leading batch dimensions; the
per-image min and max are treated as constants when differentiating.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError, DegenerateInputError, ShapeError

IMAGE_SIZE = (64, 64)


@dataclass(frozen=True)
class ColorLut:
    table: np.ndarray  # (n, 3)

    def __post_init__(self):
        t = np.asarray(self.table, dtype=np.float64)
        if t.ndim != 2 or t.shape[1] != 3 or len(t) < 2:
            raise ConfigError("LUT must be an (n>=2, 3) table")
        if not np.all(np.isfinite(t)) or t.min() < 0 or t.max() > 1:
            raise ConfigError("LUT entries must be finite and in [0, 1]")
        t.setflags(write=False)
        object.__setattr__(self, "table", t)

    def __len__(self):
        return len(self.table)

    @classmethod
    def from_csv(cls, path) -> "ColorLut":
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
        if rows and not _is_number(rows[0][0]):
            rows = rows[1:]
        return cls(np.array([[float(v) for v in r] for r in rows]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["r", "g", "b"])
            for r in self.table:
                w.writerow([f"{v:.10g}" for v in r])

    def lookup(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Interpolated colours for ``u`` in [0, 1] and d(colour)/du."""
        n = len(self.table)
        s = np.clip(u, 0.0, 1.0) * (n - 1)
        idx = np.minimum(np.floor(s).astype(np.intp), n - 2)
        frac = (s - idx)[..., None]
        lo, hi = self.table[idx], self.table[idx + 1]
        rgb = (1.0 - frac) * lo + frac * hi
        return rgb, (hi - lo) * (n - 1)


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


@lru_cache(maxsize=1)
def parula() -> ColorLut:
    """The 64-entry parula table shipped in ``data/parula.csv``."""
    with resources.as_file(resources.files("tfadv") / "data" / "parula.csv") as p:
        return ColorLut.from_csv(p)


@dataclass(frozen=True)
class NormalizationRecord:
    min_mag: float
    max_mag: float


@dataclass
class TFImage:
    pixels: np.ndarray  # (H, W, 3) in [0, 1]
    norm: NormalizationRecord | None = None
    source_shape: tuple[int, int] | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[-1] != 3:
            raise ShapeError(f"expected (H, W, 3) pixels, got {self.pixels.shape}")

    @property
    def shape(self):
        return self.pixels.shape


@lru_cache(maxsize=32)
def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Bilinear interpolation weights (n_out, n_in), half-pixel centres, edge clamp."""
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.minimum(np.floor(src).astype(np.intp), max(n_in - 2, 0))
    frac = src - i0
    r = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    r[rows, i0] += 1 - frac
    if n_in > 1:
        r[rows, i0 + 1] += frac
    r.setflags(write=False)
    return r


def resize(cells: np.ndarray, out_size=IMAGE_SIZE) -> np.ndarray:
    """Bilinear resize of (..., h, w, c) to (..., H, W, c)."""
    ry = resize_matrix(cells.shape[-3], out_size[0])
    rx = resize_matrix(cells.shape[-2], out_size[1])
    return np.einsum("Hh,...hwc,Ww->...HWc", ry, cells, rx, optimize=True)


def resize_backward(d_out: np.ndarray, in_shape) -> np.ndarray:
    ry = resize_matrix(in_shape[0], d_out.shape[-3])
    rx = resize_matrix(in_shape[1], d_out.shape[-2])
    return np.einsum("Hh,...HWc,Ww->...hwc", ry, d_out, rx, optimize=True)


def _magnitude(real, imag, scale):
    m = np.hypot(real, imag)
    if scale == "db":
        return 20 * np.log10(m + 1e-12), m
    if scale != "linear":
        raise ConfigError(f"unknown magnitude scale {scale!r}")
    return m, m


def _minmax(v):
    axes = (-2, -1)
    lo, hi = v.min(axis=axes, keepdims=True), v.max(axis=axes, keepdims=True)
    if np.any(hi <= lo):
        raise DegenerateInputError("constant magnitude field; min-max normalisation undefined")
    return lo, hi


def render_pixels(real, imag, lut: ColorLut | None = None, out_size=IMAGE_SIZE,
                  scale: str = "linear"):
    """Vectorised forward pass. Returns ``(pixels, lo, hi)`` with pixels of
    shape (..., H, W, 3) and ``lo``/``hi`` the per-image normalisation bounds."""
    lut = lut or parula()
    real, imag = np.asarray(real, dtype=np.float64), np.asarray(imag, dtype=np.float64)
    if real.shape != imag.shape:
        raise ShapeError(f"plane shapes differ: {real.shape} vs {imag.shape}")
    v, _ = _magnitude(real, imag, scale)
    lo, hi = _minmax(v)
    rgb, _ = lut.lookup((v - lo) / (hi - lo))
    return np.clip(resize(rgb, out_size), 0.0, 1.0), lo[..., 0, 0], hi[..., 0, 0]


def render_image(planes, lut: ColorLut | None = None, out_size=IMAGE_SIZE,
                 scale: str = "linear") -> TFImage:
    """Render one (real, imag) plane pair, or a :class:`StftGrid`, to a TFImage."""
    if hasattr(planes, "data"):
        planes = (planes.data.real, planes.data.imag)
    real, imag = planes
    px, lo, hi = render_pixels(real, imag, lut, out_size, scale)
    return TFImage(px, NormalizationRecord(float(lo), float(hi)), tuple(np.shape(real)))


def render_backward(planes, lut: ColorLut | None, out_size, d_pixels, scale: str = "linear"):
    """Vector-Jacobian product of :func:`render_pixels` w.r.t. both planes.

    Cells with zero magnitude receive zero gradient.
    """
    lut = lut or parula()
    real, imag = (np.asarray(p, dtype=np.float64) for p in planes)
    d_pixels = np.asarray(d_pixels, dtype=np.float64)
    if real.shape != imag.shape:
        raise ShapeError(f"plane shapes differ: {real.shape} vs {imag.shape}")
    if d_pixels.shape != real.shape[:-2] + tuple(out_size) + (3,):
        raise ShapeError(f"upstream gradient shape {d_pixels.shape} does not match output")
    v, m = _magnitude(real, imag, scale)
    lo, hi = _minmax(v)
    _, slope = lut.lookup((v - lo) / (hi - lo))
    d_rgb = resize_backward(d_pixels, real.shape[-2:])
    dv = np.sum(d_rgb * slope, axis=-1) / (hi - lo)
    if scale == "db":
        dm = dv * 20 / (np.log(10) * (m + 1e-12))
    else:
        dm = dv
    safe = np.where(m > 0, m, 1.0)
    coef = np.where(m > 0, dm / safe, 0.0)
    return coef * real, coef * imag


# -- image export -------------------------------------------------------------

def quantize(pixels: np.ndarray) -> np.ndarray:
    """8-bit quantisation, round half up."""
    p = np.asarray(pixels, dtype=np.float64)
    if p.min() < 0 or p.max() > 1:
        raise ValueError("pixels outside [0, 1]")
    return np.floor(p * 255 + 0.5).astype(np.uint8)


def write_ppm(path, pixels) -> None:
    px = pixels.pixels if isinstance(pixels, TFImage) else pixels
    q = quantize(px)
    h, w = q.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + q.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+255\s", raw)
    if not m:
        raise ValueError(f"{path}: only 8-bit binary PPM supported")
    w, h = int(m[1]), int(m[2])
    return np.frombuffer(raw[m.end():], dtype=np.uint8).reshape(h, w, 3)


def write_png(path, pixels) -> None:
    from PIL import Image

    px = pixels.pixels if isinstance(pixels, TFImage) else pixels
    Image.fromarray(quantize(px), "RGB").save(path)


def write_image(path, pixels, fmt: str = "ppm") -> Path:
    path = Path(path).with_suffix("." + fmt)
    if fmt == "ppm":
        write_ppm(path, pixels)
    elif fmt == "png":
        write_png(path, pixels)
    else:
        raise ConfigError(f"unknown image format {fmt!r}")
    return path


def receive(samples, window=None, lut: ColorLut | None = None, out_size=IMAGE_SIZE,
            scale: str = "linear", batch: int = 256) -> np.ndarray:
    """Full reception pipeline for real waveforms: STFT then render.

    ``samples`` is (N,) or (B, N); returns pixels (H, W, 3) or (B, H, W, 3).
    """
    from .tfa import WindowSpec, stft_array

    window = window or WindowSpec()
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        g = stft_array(x, window)
        return render_pixels(g.real, g.imag, lut, out_size, scale)[0]
    out = []
    for i in range(0, len(x), batch):
        g = stft_array(x[i:i + batch], window)
        out.append(render_pixels(g.real, g.imag, lut, out_size, scale)[0])
    return np.concatenate(out) if out else np.zeros((0, *out_size, 3))
