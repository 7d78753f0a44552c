"""Evaluation metrics: Gram-matrix style loss and content SSIM."""

from __future__ import annotations

import numpy as np
import torch
from scipy.signal import fftconvolve

from .encoder import Encoder, make_frozen_encoder
from .irstyle import make_thumbnail

METRIC_ENCODER_SEED = 20240101
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
LUMA = np.array([0.299, 0.587, 0.114])

_metric_encoder: Encoder | None = None


def metric_encoder() -> Encoder:
    """The fixed frozen encoder all Gram-loss numbers are measured with."""
    global _metric_encoder
    if _metric_encoder is None:
        _metric_encoder = make_frozen_encoder(METRIC_ENCODER_SEED)
    return _metric_encoder


def gram(features: torch.Tensor) -> torch.Tensor:
    """(N, C, H, W) -> (N, C, C) channel Gram matrices normalised by C*H*W."""
    n, c, h, w = features.shape
    flat = features.reshape(n, c, h * w)
    return flat @ flat.transpose(1, 2) / (c * h * w)


def gram_loss_from_features(fa, fb) -> torch.Tensor:
    return sum(((gram(a) - gram(b)) ** 2).mean(dim=(1, 2)) for a, b in zip(fa, fb))


def _batch(img: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(make_thumbnail(img)).permute(2, 0, 1)[None]


@torch.no_grad()
def gram_style_loss(a: np.ndarray, b: np.ndarray, encoder: Encoder | None = None) -> float:
    """Sum over pyramid levels of the MSE between Gram matrices of two images' features."""
    enc = encoder or metric_encoder()
    return float(gram_loss_from_features(enc(_batch(a)), enc(_batch(b)))[0])


def luma(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) @ LUMA


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim_map(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-window SSIM of two 2D arrays over every full 11x11 Gaussian window."""
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch {x.shape} vs {y.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    win = gaussian_window()

    def filt(z):
        return fftconvolve(z, win, mode="valid")

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return num / den


def content_ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM of the [0, 1] luma planes."""
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch {a.shape} vs {b.shape}")
    return float(np.clip(ssim_map(luma(a), luma(b)).mean(), -1.0, 1.0))
