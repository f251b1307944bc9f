"""STFT-domain time-signal attack.

The attack perturbs the real and imaginary STFT planes of the received
signal, pushing the classification loss up through the differentiable
colormap render, then inverts the perturbed grid to a waveform. Because a
perturbed grid is generally not conjugate-symmetric, the inverse STFT is
complex; its real part is the transmitted waveform. Success is judged by
replaying that waveform through a fresh STFT and render, so the image the
victim sees uses its own min/max normalisation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attacks import image_l2
from .errors import ConfigError
from .nn import Model
from .render import IMAGE_SIZE, ColorLut, TFImage, parula, receive, render_backward, render_pixels
from .tfa import StftGrid, WindowSpec, istft_array, stft_array


@dataclass(frozen=True)
class StdsConfig:
    lr: float = 0.003
    iterations: int = 200
    early_stop: bool = True
    check_every: int = 10
    max_noise_l2: float | None = None  # bound on ||x_noise|| / ||x||
    # "l2": each step is rescaled to have Frobenius norm lr * ||clean grid||,
    # i.e. lr is a relative step size. None: raw gradient times lr.
    step_norm: str | None = "l2"

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.iterations < 1 or self.check_every < 1:
            raise ConfigError("iterations and check_every must be >= 1")
        if self.max_noise_l2 is not None and self.max_noise_l2 < 0:
            raise ConfigError("max_noise_l2 must be >= 0")
        if self.step_norm not in (None, "l2"):
            raise ConfigError(f"unknown step_norm {self.step_norm!r}")


@dataclass
class StdsOutcome:
    adv_signal: np.ndarray
    noise_signal: np.ndarray
    adv_grid: StftGrid
    tf_image_clean: TFImage
    tf_image_adv: TFImage
    l2_image: float
    l2_signal: float
    noise_ratio: float
    label_clean: int
    label_adv: int
    success_replay: bool
    success_inloop: bool
    iterations_used: int
    pred_clean: int = -1


def replay_verify(model: Model, adv_signal, clean_label, window: WindowSpec | None = None,
                  lut: ColorLut | None = None):
    """Fresh STFT -> render -> classify. Returns ``(predicted, success)``;
    vectorised over a leading batch axis."""
    pred = model.predict(receive(np.real(adv_signal), window, lut))
    success = pred != np.asarray(clean_label)
    if np.ndim(pred) == 0:
        return int(pred), bool(success)
    return pred, success


def plane_gradient(model: Model, real, imag, labels, lut: ColorLut | None = None,
                   out_size=IMAGE_SIZE):
    """Loss and its gradient w.r.t. both STFT planes (batched)."""
    px, _, _ = render_pixels(real, imag, lut, out_size)
    lg = model.loss_and_input_grad(px, labels)
    d_real, d_imag = render_backward((real, imag), lut, out_size, lg.d_input)
    return lg, d_real, d_imag


def _realize(x, d_real, d_imag, window, budget):
    """Waveform for a plane perturbation, scaled into the noise budget if set."""
    noise = istft_array(d_real + 1j * d_imag, window, x.shape[-1]).real
    if budget is not None:
        ratio = np.linalg.norm(noise, axis=-1) / np.linalg.norm(x, axis=-1)
        scale = np.where(ratio > budget, budget / np.maximum(ratio, 1e-300), 1.0)[:, None]
        return noise * scale, scale
    return noise, np.ones((len(x), 1))


def stds_batch(model: Model, signals, labels, cfg: StdsConfig | None = None,
               window: WindowSpec | None = None, lut: ColorLut | None = None):
    """Batched attack. Returns a dict of per-sample arrays."""
    cfg = cfg or StdsConfig()
    window = window or WindowSpec()
    lut = lut or parula()
    x = np.atleast_2d(np.asarray(signals, dtype=np.float64))
    y = np.atleast_1d(np.asarray(labels))
    grid0 = stft_array(x, window)
    r0, i0 = grid0.real.copy(), grid0.imag.copy()
    real, imag = r0.copy(), i0.copy()
    grid_norm = np.sqrt(np.sum(np.abs(grid0) ** 2, axis=(-2, -1)))
    n = len(x)
    active = np.ones(n, dtype=bool)
    used = np.full(n, cfg.iterations)
    inloop = np.zeros(n, dtype=bool)
    for t in range(cfg.iterations):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        lg, dr, di = plane_gradient(model, real[idx], imag[idx], y[idx], lut)
        inloop[idx] = lg.logits.argmax(axis=1) != y[idx]
        if cfg.step_norm == "l2":
            gn = np.sqrt(np.sum(dr**2 + di**2, axis=(-2, -1)))
            k = np.divide(grid_norm[idx], gn, out=np.zeros_like(gn), where=gn > 0)[:, None, None]
            dr, di = dr * k, di * k
        real[idx] += cfg.lr * dr
        imag[idx] += cfg.lr * di
        if cfg.max_noise_l2 is not None:
            _, scale = _realize(x[idx], real[idx] - r0[idx], imag[idx] - i0[idx], window,
                                cfg.max_noise_l2)
            real[idx] = r0[idx] + (real[idx] - r0[idx]) * scale[:, :, None]
            imag[idx] = i0[idx] + (imag[idx] - i0[idx]) * scale[:, :, None]
        if cfg.early_stop and (t + 1) % cfg.check_every == 0:
            adv = x[idx] + _realize(x[idx], real[idx] - r0[idx], imag[idx] - i0[idx],
                                    window, cfg.max_noise_l2)[0]
            done = model.predict(receive(adv, window, lut)) != y[idx]
            used[idx[done]] = t + 1
            active[idx[done]] = False
    noise, _ = _realize(x, real - r0, imag - i0, window, cfg.max_noise_l2)
    adv = x + noise
    return {
        "adv": adv, "noise": noise, "real": real, "imag": imag,
        "iterations_used": used, "success_inloop": inloop,
    }


def stds_attack(model: Model, sig, cfg: StdsConfig | None = None, window: WindowSpec | None = None,
                lut: ColorLut | None = None, label: int | None = None):
    """Attack one :class:`TimeSignal` (or a 1-D array with ``label``)."""
    out = stds_outcomes(model, np.asarray(getattr(sig, "samples", sig))[None],
                        [getattr(sig, "label", label)], cfg, window, lut)
    return out[0]


def stds_outcomes(model: Model, signals, labels, cfg=None, window=None, lut=None):
    window = window or WindowSpec()
    lut = lut or parula()
    x = np.atleast_2d(np.asarray(signals, dtype=np.float64))
    y = np.atleast_1d(np.asarray(labels))
    res = stds_batch(model, x, y, cfg, window, lut)
    clean_px = receive(x, window, lut)
    adv_px = receive(res["adv"], window, lut)
    clean_pred = model.predict(clean_px)
    adv_pred = model.predict(adv_px)
    out = []
    for i in range(len(x)):
        nrm = float(np.linalg.norm(res["noise"][i]))
        out.append(StdsOutcome(
            adv_signal=res["adv"][i], noise_signal=res["noise"][i],
            adv_grid=StftGrid(res["real"][i] + 1j * res["imag"][i], window, x.shape[1]),
            tf_image_clean=TFImage(clean_px[i]), tf_image_adv=TFImage(adv_px[i]),
            l2_image=image_l2(clean_px[i], adv_px[i]), l2_signal=nrm,
            noise_ratio=nrm / float(np.linalg.norm(x[i])),
            label_clean=int(y[i]), label_adv=int(adv_pred[i]),
            success_replay=bool(adv_pred[i] != y[i]),
            success_inloop=bool(res["success_inloop"][i]),
            iterations_used=int(res["iterations_used"][i]),
            pred_clean=int(clean_pred[i]),
        ))
    return out
