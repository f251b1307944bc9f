"""Image-domain attacks on TF-image classifiers: FGSM, PGD, CW-L2, DITIMI-FGSM.

Every attack works on a batch ``x`` of shape (B, 64, 64, 3) with labels
``y`` of shape (B,); samples never interact, so results for one sample
do not depend on what else is in the batch (up to BLAS summation order).
Randomness (the DI transform) is drawn from one stream per sample,
``sample_rng(cfg.seed, index)``.

Units: ``epsilon`` and ``alpha`` are given in 0-255 pixel steps and
converted internally; ``linf`` is reported on the [0, 1] scale and ``l2``
in 0-255 pixel units.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ShapeError
from .nn import Model
from .render import TFImage, resize_matrix
from .waveforms import sample_rng

METHODS = ("fgsm", "pgd", "cw", "ditimi")


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 10.0  # pixel steps out of 255
    alpha: float = 1.0  # pixel steps out of 255
    iterations: int = 10
    mu: float = 1.0
    di_probability: float = 0.5
    di_min_size: int = 58
    ti_size: int = 5
    ti_sigma: float = 1.0
    cw_c: float = 1.0
    cw_kappa: float = 0.0
    cw_steps: int = 100
    cw_lr: float = 0.01
    # True: return the iterate after all T updates. False: stop one update
    # early and return x^(T-1).
    return_last_iterate: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if not 0 <= self.di_probability <= 1:
            raise ConfigError("di_probability must lie in [0, 1]")
        if self.iterations < 1 or self.cw_steps < 1:
            raise ConfigError("iteration counts must be >= 1")
        if self.ti_size < 1 or self.ti_size % 2 == 0:
            raise ConfigError("ti_size must be a positive odd integer")
        if not 1 <= self.di_min_size <= 64:
            raise ConfigError("di_min_size must be in [1, 64]")

    @property
    def eps(self) -> float:
        return self.epsilon / 255.0

    @property
    def step(self) -> float:
        return self.alpha / 255.0


@dataclass
class MomentumState:
    g: np.ndarray

    @classmethod
    def zeros_like(cls, x):
        return cls(np.zeros_like(x))


@dataclass
class AttackOutcome:
    adv_image: TFImage
    noise_image: np.ndarray
    linf: float
    l2: float
    label_clean: int
    label_adv: int
    success: bool
    iterations_used: int
    method: str = ""
    extra: dict = field(default_factory=dict)


# -- building blocks -------------------------------------------------------------

def _as_batch(images, labels):
    x = np.asarray(getattr(images, "pixels", images), dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if len(y) != len(x):
        raise ShapeError("one label per image required")
    return x, y, single


def input_grad(model: Model, x, y):
    return model.loss_and_input_grad(x, y).d_input


def project(x_adv, x, eps):
    """Clip into the L-inf ball of radius ``eps`` around ``x`` and into [0, 1]."""
    return np.clip(np.clip(x_adv, x - eps, x + eps), 0.0, 1.0)


def gaussian_kernel(size: int = 5, sigma: float = 1.0) -> np.ndarray:
    """Normalised 2-D Gaussian; size 1 gives the delta kernel."""
    r = np.arange(size) - size // 2
    g = np.exp(-0.5 * (r / sigma) ** 2) if sigma > 0 else (r == 0).astype(float)
    k = np.outer(g, g)
    return k / k.sum()


def ti_smooth(grad: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Channel-wise same-size convolution with zero padding.

    Accepts (H, W, C) or (B, H, W, C).
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.shape == (1, 1):
        return grad * kernel[0, 0]
    shape = (1,) * (grad.ndim - 3) + kernel.shape + (1,)
    return ndimage.convolve(grad, kernel.reshape(shape), mode="constant", cval=0.0)


@dataclass(frozen=True)
class DiDraw:
    size: int
    top: int
    left: int
    applied: bool


def draw_di(rng: np.random.Generator, p: float, min_size: int = 58, full: int = 64) -> DiDraw:
    if rng.random() >= p:
        return DiDraw(full, 0, 0, False)
    size = int(rng.integers(min_size, full + 1))
    top = int(rng.integers(0, full - size + 1))
    left = int(rng.integers(0, full - size + 1))
    return DiDraw(size, top, left, True)


def _di_apply(img, d: DiDraw):
    if not d.applied:
        return img
    h, w = img.shape[:2]
    ry, rx = resize_matrix(h, d.size), resize_matrix(w, d.size)
    small = np.einsum("Hh,hwc,Ww->HWc", ry, img, rx, optimize=True)
    out = np.zeros_like(img)
    out[d.top:d.top + d.size, d.left:d.left + d.size] = small
    return out


def _di_backward(dout, d: DiDraw):
    if not d.applied:
        return dout
    h, w = dout.shape[:2]
    ry, rx = resize_matrix(h, d.size), resize_matrix(w, d.size)
    crop = dout[d.top:d.top + d.size, d.left:d.left + d.size]
    return np.einsum("Hh,HWc,Ww->hwc", ry, crop, rx, optimize=True)


def di_transform(img, p: float, rng: np.random.Generator, min_size: int = 58) -> np.ndarray:
    """With probability ``p``: shrink to a random side in [min_size, 64] and
    zero-pad back to 64 at a random offset. Otherwise the identity."""
    x = np.asarray(getattr(img, "pixels", img), dtype=np.float64)
    return _di_apply(x, draw_di(rng, p, min_size, x.shape[0]))


# -- attacks ---------------------------------------------------------------------

def fgsm_batch(model: Model, x, y, cfg: AttackConfig):
    g = input_grad(model, x, y)
    return project(x + cfg.eps * np.sign(g), x, cfg.eps), 1


def pgd_batch(model: Model, x, y, cfg: AttackConfig):
    x_adv = x.copy()
    for _ in range(cfg.iterations):
        g = input_grad(model, x_adv, y)
        x_adv = project(x_adv + cfg.step * np.sign(g), x, cfg.eps)
    return x_adv, cfg.iterations


def ditimi_batch(model: Model, x, y, cfg: AttackConfig, indices=None):
    """Momentum iterative FGSM with diverse inputs and translation-invariant
    gradient smoothing. ``indices`` key the per-sample random streams."""
    indices = np.arange(len(x)) if indices is None else np.asarray(indices)
    rngs = [sample_rng(cfg.seed, int(i)) for i in indices]
    kernel = gaussian_kernel(cfg.ti_size, cfg.ti_sigma)
    n_updates = cfg.iterations if cfg.return_last_iterate else cfg.iterations - 1
    mom = MomentumState.zeros_like(x)
    x_adv = x.copy()
    for _ in range(n_updates):
        draws = [draw_di(r, cfg.di_probability, cfg.di_min_size, x.shape[1]) for r in rngs]
        xt = np.stack([_di_apply(xi, d) for xi, d in zip(x_adv, draws)])
        gt = input_grad(model, xt, y)
        grad = np.stack([_di_backward(gi, d) for gi, d in zip(gt, draws)])
        smooth = ti_smooth(grad, kernel)
        l1 = np.abs(smooth).sum(axis=(1, 2, 3), keepdims=True)
        # a zero gradient leaves the momentum decaying but untouched
        mom.g = cfg.mu * mom.g + np.divide(smooth, l1, out=np.zeros_like(smooth), where=l1 > 0)
        x_adv = project(x_adv + cfg.step * np.sign(mom.g), x, cfg.eps)
    return x_adv, n_updates


def _cw_margin_grad(model, w, x, y, cfg):
    x_adv = (np.tanh(w) + 1) / 2
    rows = np.arange(len(y))
    dlog = np.zeros((len(y), 3))
    logits, backward = model.vjp(x_adv)
    other = logits.copy()
    other[rows, y] = -np.inf
    j = other.argmax(axis=1)
    margin = logits[rows, y] - logits[rows, j]
    active = margin > -cfg.cw_kappa
    dlog[rows, y] = cfg.cw_c * active
    dlog[rows, j] = -cfg.cw_c * active
    dx = 2 * (x_adv - x) + backward(dlog)
    return x_adv, logits, dx * (1 - np.tanh(w) ** 2) / 2


def cw_batch(model: Model, x, y, cfg: AttackConfig):
    """CW-L2 with a fixed trade-off constant, optimised with Adam in tanh space.

    Keeps the smallest-distortion misclassified iterate per sample; samples
    that never flip return their last iterate.
    """
    w = np.arctanh(np.clip(2 * x - 1, -1 + 1e-6, 1 - 1e-6))
    best = x.copy()
    best_l2 = np.full(len(x), np.inf)
    pred0 = model.predict(x)
    already = pred0 != y
    best_l2[already] = 0.0
    m_t, v_t = np.zeros_like(w), np.zeros_like(w)
    b1, b2, eps = 0.9, 0.999, 1e-8
    last = x.copy()
    for t in range(1, cfg.cw_steps + 1):
        x_adv, logits, gw = _cw_margin_grad(model, w, x, y, cfg)
        pred = logits.argmax(axis=1)
        l2 = np.sqrt(((x_adv - x) ** 2).sum(axis=(1, 2, 3)))
        better = (pred != y) & (l2 < best_l2) & ~already
        best[better], best_l2[better] = x_adv[better], l2[better]
        last = x_adv
        m_t = b1 * m_t + (1 - b1) * gw
        v_t = b2 * v_t + (1 - b2) * gw**2
        w = w - cfg.cw_lr * (m_t / (1 - b1**t)) / (np.sqrt(v_t / (1 - b2**t)) + eps)
    x_adv = (np.tanh(w) + 1) / 2
    pred = model.predict(x_adv)
    l2 = np.sqrt(((x_adv - x) ** 2).sum(axis=(1, 2, 3)))
    better = (pred != y) & (l2 < best_l2) & ~already
    best[better], best_l2[better] = x_adv[better], l2[better]
    failed = ~np.isfinite(best_l2)
    best[failed] = x_adv[failed]
    return best, cfg.cw_steps


_BATCH = {"fgsm": fgsm_batch, "pgd": pgd_batch, "cw": cw_batch, "ditimi": ditimi_batch}


def attack_batch(method: str, model: Model, x, y, cfg: AttackConfig, indices=None):
    """Adversarial images for a batch. Returns ``(x_adv, iterations_used)``."""
    if method not in _BATCH:
        raise ConfigError(f"unknown method {method!r}; valid: {', '.join(METHODS)}")
    x, y, _ = _as_batch(x, y)
    if method == "ditimi":
        return ditimi_batch(model, x, y, cfg, indices)
    return _BATCH[method](model, x, y, cfg)


def image_l2(clean, adv) -> float:
    """Euclidean distance over all pixels and channels, in 0-255 pixel units."""
    a = np.asarray(getattr(clean, "pixels", clean), dtype=np.float64)
    b = np.asarray(getattr(adv, "pixels", adv), dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum(((b - a) * 255) ** 2)))


def outcomes(model: Model, x, x_adv, method: str, iterations: int, label_clean=None):
    """Per-sample :class:`AttackOutcome` records judged by ``model``."""
    pred_clean = model.predict(x) if label_clean is None else np.asarray(label_clean)
    pred_adv = model.predict(x_adv)
    out = []
    for i in range(len(x)):
        noise = x_adv[i] - x[i]
        out.append(AttackOutcome(
            adv_image=TFImage(x_adv[i]), noise_image=noise,
            linf=float(np.abs(noise).max()), l2=image_l2(x[i], x_adv[i]),
            label_clean=int(pred_clean[i]), label_adv=int(pred_adv[i]),
            success=bool(pred_adv[i] != pred_clean[i]), iterations_used=iterations,
            method=method))
    return out


def run_attack(method: str, model: Model, images, labels, cfg: AttackConfig | None = None,
               indices=None):
    """Attack one image (returns an AttackOutcome) or a batch (returns a list)."""
    cfg = cfg or AttackConfig()
    x, y, single = _as_batch(images, labels)
    x_adv, iters = attack_batch(method, model, x, y, cfg, indices)
    res = outcomes(model, x, x_adv, method, iters)
    return res[0] if single else res


def fgsm(model, img, label, cfg=None):
    return run_attack("fgsm", model, img, label, cfg)


def pgd(model, img, label, cfg=None):
    return run_attack("pgd", model, img, label, cfg)


def cw(model, img, label, cfg=None):
    return run_attack("cw", model, img, label, cfg)


def ditimi_fgsm(model, img, label, cfg=None, index: int = 0):
    """DITIMI-FGSM for one image (or a batch); ``index`` keys the DI random stream."""
    x = np.asarray(getattr(img, "pixels", img))
    idx = [index] if x.ndim == 3 else index + np.arange(len(x))
    return run_attack("ditimi", model, img, label, cfg, indices=idx)


def bim(model, img, label, cfg=None):
    """Plain iterative FGSM: PGD with no random start."""
    return pgd(model, img, label, cfg)


def with_overrides(cfg: AttackConfig, **kw) -> AttackConfig:
    return replace(cfg, **kw)
