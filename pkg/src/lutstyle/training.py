"""Paired/unpaired sample synthesis, losses and the combined training loop."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage
import torch
import torch.nn.functional as F

from . import nn as tnn
from .encoder import Encoder, make_frozen_encoder
from .irstyle import ArchVariant, IRStyleModel, concat_summaries, summarize
from .lut import DEFAULT_SIZE, Lut3d, _identity_grid, apply_lut, read_cube_file

log = logging.getLogger(__name__)

CROP = 256
LOSS_ENCODER_SEED = 20240101
STYLE_LEVELS = (0, 1)
CONTENT_LEVEL = 3


@dataclass
class TrainConfig:
    seed: int = 0
    lr: float = 5e-4
    steps: int = 500
    batch: int = 4
    lam: float = 1.0
    bins: int = 64
    variant: str = ArchVariant.INTERACTION_DUAL.value
    log_every: int = 50

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


# Full-scale settings (MS-COCO, 300 epochs at batch 24), kept for reference only.
PRESETS = {
    "desk": TrainConfig(),
    "full": TrainConfig(batch=24, steps=300 * math.ceil(118_287 / 24)),
}

_CONFIG_KEYS = {"seed": int, "lr": float, "steps": int, "batch": int, "lambda": float,
                "bins": int, "variant": str, "log_every": int}


class ConfigError(ValueError):
    def __init__(self, message: str, lineno: int):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


def parse_config(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key or not value:
            raise ConfigError(f"empty key or value in {raw.strip()!r}", lineno)
        out[key] = value
    return out


def config_from_mapping(values: dict[str, str], base: TrainConfig | None = None) -> TrainConfig:
    cfg = base or TrainConfig()
    kw = {}
    for key, raw in values.items():
        if key not in _CONFIG_KEYS:
            raise ValueError(f"unknown training config key {key!r}")
        try:
            kw["lam" if key == "lambda" else key] = _CONFIG_KEYS[key](raw)
        except ValueError:
            raise ValueError(f"bad value for {key}: {raw!r}") from None
    cfg = cfg.replace(**kw)
    ArchVariant(cfg.variant)
    return cfg


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    return config_from_mapping(parse_config(Path(path).read_text()), base)


# ---------------------------------------------------------------------------
# synthetic toy data


def _octave_noise(rng: np.random.Generator, height: int, width: int, channels: int) -> np.ndarray:
    """Zero-mean, unit-std multi-octave smooth noise, (height, width, channels)."""
    field = np.zeros((height, width, channels))
    for cells, amp in ((4, 1.0), (8, 0.6), (16, 0.35), (32, 0.2)):
        coarse = rng.normal(0.0, amp, (cells, cells, channels))
        field += ndimage.zoom(coarse, (height / cells, width / cells, 1), order=3)[:height, :width]
    field -= field.mean(axis=(0, 1))
    return field / (field.std(axis=(0, 1)) + 1e-12)


def synth_image(rng: np.random.Generator, height: int = 320, width: int = 320) -> np.ndarray:
    """Procedural photo stand-in: a neutral multi-octave color field with a few
    soft-edged objects and fine grain.

    Sources share similar color statistics, so the color style of a training
    image comes from the filter applied to it rather than from its content.
    """
    field = _octave_noise(rng, height, width, 3)
    mix = 0.5 * np.eye(3) + 0.5 * rng.uniform(0.3, 1.0, (3, 3))
    field = field @ mix.T
    field /= field.std(axis=(0, 1))
    img = rng.uniform(0.47, 0.53, 3) + rng.uniform(0.16, 0.2) * field
    yy, xx = np.mgrid[0:height, 0:width]
    yy = yy / height
    xx = xx / width
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0, 1, 2)
        r = rng.uniform(0.08, 0.25)
        mask = ndimage.gaussian_filter((((yy - cy) ** 2 + (xx - cx) ** 2) < r * r).astype(np.float64), 3.0)
        color = rng.uniform(0.3, 0.7, 3) + 0.1 * field
        img = img * (1 - mask[..., None]) + mask[..., None] * color
    grain = ndimage.gaussian_filter(rng.normal(0.0, 1.0, (height, width)), 1.0) * 0.03
    return np.clip(img + grain[..., None], 0, 1).astype(np.float32)


def random_filter(rng: np.random.Generator, size: int = DEFAULT_SIZE) -> Lut3d:
    """Smooth random color grade: gains, gammas, lift, saturation and channel mixing."""
    x = _identity_grid(size).astype(np.float64)
    gain = rng.uniform(0.5, 1.5, 3)
    gamma = np.exp(rng.uniform(-0.9, 0.9, 3))
    lift = rng.uniform(-0.16, 0.16, 3)
    y = np.clip(x * gain + lift, 0, 1) ** gamma
    mix = np.eye(3) + rng.uniform(-0.12, 0.12, (3, 3))
    mix /= mix.sum(axis=1, keepdims=True)
    y = y @ mix.T
    luma = y @ np.array([0.299, 0.587, 0.114])
    sat = rng.uniform(0.4, 1.5)
    y = luma[..., None] + sat * (y - luma[..., None])
    return Lut3d(np.clip(y, 0, 1).astype(np.float32))


def synth_corpus(seed: int, count: int = 32, size: int = 320) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [synth_image(rng, size, size) for _ in range(count)]


def synth_filters(seed: int, count: int = 50, size: int = DEFAULT_SIZE) -> list[Lut3d]:
    rng = np.random.default_rng(seed)
    return [random_filter(rng, size) for _ in range(count)]


def load_filter_dir(path) -> list[Lut3d]:
    files = sorted(Path(path).glob("*.cube"))
    if not files:
        raise FileNotFoundError(f"no .cube files in {path}")
    return [read_cube_file(f) for f in files]


# ---------------------------------------------------------------------------
# samples


@dataclass
class PairedSample:
    i1: np.ndarray
    i2: np.ndarray


@dataclass
class UnpairedSample:
    content: np.ndarray
    style: np.ndarray


def random_crop(image: np.ndarray, rng: np.random.Generator, size: int = CROP) -> np.ndarray:
    h, w = image.shape[:2]
    if h < size or w < size:
        raise ValueError(f"source {w}x{h} is smaller than the {size}x{size} crop")
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    return image[y:y + size, x:x + size]


def make_paired_sample(source: np.ndarray, filters: Sequence[Lut3d], rng: np.random.Generator,
                       size: int = CROP) -> PairedSample:
    crop = random_crop(source, rng, size)
    f1, f2 = filters
    return PairedSample(apply_lut(f1, crop), apply_lut(f2, crop))


class SampleStream:
    """Seeded stream of (paired, unpaired) samples drawn from a corpus and filter library."""

    def __init__(self, corpus: Sequence[np.ndarray], filters: Sequence[Lut3d], seed: int,
                 size: int = CROP):
        if len(corpus) < 2:
            raise ValueError("unpaired samples need at least two source images")
        if len(filters) < 2:
            raise ValueError("need at least two filters")
        self.corpus = corpus
        self.filters = filters
        self.size = size
        self.rng = np.random.default_rng(seed)

    def sample(self) -> tuple[PairedSample, UnpairedSample]:
        rng = self.rng
        i, j = rng.choice(len(self.corpus), 2, replace=False)
        a, b, c = rng.choice(len(self.filters), 3, replace=False if len(self.filters) >= 3 else True)
        paired = make_paired_sample(self.corpus[i], (self.filters[a], self.filters[b]), rng, self.size)
        style = apply_lut(self.filters[c], random_crop(self.corpus[j], rng, self.size))
        return paired, UnpairedSample(paired.i2, style)

    def batch(self, n: int) -> dict[str, torch.Tensor]:
        samples = [self.sample() for _ in range(n)]
        return {
            "i1": _stack([p.i1 for p, _ in samples]),
            "i2": _stack([p.i2 for p, _ in samples]),
            "i3": _stack([u.style for _, u in samples]),
        }


def _stack(images: list[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).contiguous()


# ---------------------------------------------------------------------------
# losses


def soft_histogram(images: torch.Tensor, bins: int = 64) -> torch.Tensor:
    """Differentiable per-channel color histogram, (N, 3, bins), each channel summing to 1.

    Bin centers sit at k / (bins - 1); every pixel splits its unit mass between
    the two nearest centers with a triangular kernel one bin spacing wide.
    """
    if bins < 2:
        raise ValueError("bins must be >= 2")
    if images.dim() == 3:
        images = images.unsqueeze(0)
    n, c = images.shape[:2]
    flat = images.reshape(n, c, -1)
    if flat.shape[-1] == 0:
        raise ValueError("empty image")
    t = flat.clamp(0, 1) * (bins - 1)
    lo = t.detach().floor().clamp(max=bins - 2).long()
    frac = t - lo
    hist = torch.zeros(n, c, bins, dtype=images.dtype, device=images.device)
    hist = hist.scatter_add(2, lo, 1.0 - frac).scatter_add(2, lo + 1, frac)
    return hist / flat.shape[-1]


def histogram_distance(h1: torch.Tensor, h2: torch.Tensor) -> torch.Tensor:
    """Per-sample Euclidean distance between (N, 3, B) histograms."""
    return torch.linalg.vector_norm(h1 - h2, dim=(-2, -1))


def loss_pair(y1: torch.Tensor, i2: torch.Tensor, mc1: torch.Tensor | None,
              mc2: torch.Tensor | None) -> dict[str, torch.Tensor]:
    if y1.shape != i2.shape:
        raise ValueError(f"shape mismatch {tuple(y1.shape)} vs {tuple(i2.shape)}")
    self_term = F.mse_loss(y1, i2)
    if mc1 is None:
        cm = torch.zeros((), dtype=y1.dtype)
    else:
        if mc1.shape != mc2.shape:
            raise ValueError(f"content map shape mismatch {tuple(mc1.shape)} vs {tuple(mc2.shape)}")
        cm = F.mse_loss(mc1, mc2)
    return {"self": self_term, "cm": cm, "pair": self_term + cm}


def style_moment_loss(fa: list[torch.Tensor], fb: list[torch.Tensor],
                      levels=STYLE_LEVELS) -> torch.Tensor:
    total = 0.0
    for lvl in levels:
        ma, sa = tnn.channel_moments(fa[lvl], tnn.ADAIN_EPS)
        mb, sb = tnn.channel_moments(fb[lvl], tnn.ADAIN_EPS)
        total = total + F.mse_loss(ma, mb) + F.mse_loss(sa, sb)
    return total


def loss_unpair(y2: torch.Tensor, i2: torch.Tensor, i3: torch.Tensor, encoder: Encoder,
                bins: int = 64) -> dict[str, torch.Tensor]:
    """Content (deep features vs i2), style (shallow moments vs i3) and histogram (vs i3) terms."""
    if y2.shape != i2.shape:
        raise ValueError(f"shape mismatch {tuple(y2.shape)} vs {tuple(i2.shape)}")
    fy = encoder(y2)
    with torch.no_grad():
        n = i2.shape[0]
        if i3.shape == i2.shape:
            ref = encoder(torch.cat([i2, i3]))
            f2, f3 = [r[:n] for r in ref], [r[n:] for r in ref]
        else:
            f2, f3 = encoder(i2), encoder(i3)
    content = F.mse_loss(fy[CONTENT_LEVEL], f2[CONTENT_LEVEL])
    style = style_moment_loss(fy, f3)
    hist = histogram_distance(soft_histogram(y2, bins), soft_histogram(i3, bins)).mean()
    return {"content": content, "style": style, "hist": hist, "unpair": content + style + hist}


def forward_losses(model: IRStyleModel, batch: dict[str, torch.Tensor], loss_encoder: Encoder,
                   lam: float = 1.0, bins: int = 64) -> dict[str, torch.Tensor]:
    """All loss terms for one (paired, unpaired) batch.

    Three predictions share one encoder pass: (I1 -> I2) gives Y1 and M_c1,
    (I2 -> I1) gives M_c2, (I2 -> I3) gives Y2. Direct mapping has no
    content maps, so its L_cm term is zero.
    """
    i1, i2, i3 = batch["i1"], batch["i2"], batch["i3"]
    n = i1.shape[0]
    summ = summarize(model.encoder(torch.cat([i1, i2, i3])))
    s1, s2, s3 = (summ.select(slice(k * n, (k + 1) * n)) for k in range(3))
    sc = concat_summaries([s1, s2, s2])
    ss = concat_summaries([s2, s1, s3])
    tables = model.tables(sc, ss)
    if model.dual:
        cmaps = tnn.apply_lut_tensor(tables["content"], torch.cat([i1, i2, i2]))
        mc1, mc2 = cmaps[:n], cmaps[n:2 * n]
        keep = torch.cat([torch.arange(n), torch.arange(2 * n, 3 * n)])
        out = tnn.apply_lut_tensor(tables["style"][keep], torch.cat([mc1, cmaps[2 * n:]]))
    else:
        mc1 = mc2 = None
        keep = torch.cat([torch.arange(n), torch.arange(2 * n, 3 * n)])
        out = tnn.apply_lut_tensor(tables["direct"][keep], torch.cat([i1, i2]))
    y1, y2 = out[:n], out[n:]
    terms = loss_pair(y1, i2, mc1, mc2)
    terms.update(loss_unpair(y2, i2, i3, loss_encoder, bins))
    terms["total"] = terms["pair"] + lam * terms["unpair"]
    return terms


def train_step(model: IRStyleModel, batch: dict[str, torch.Tensor], optimizer: torch.optim.Optimizer,
               loss_encoder: Encoder, lam: float = 1.0, bins: int = 64) -> dict[str, float]:
    model.train()
    optimizer.zero_grad(set_to_none=True)
    terms = forward_losses(model, batch, loss_encoder, lam, bins)
    record = {k: float(v.detach()) for k, v in terms.items()}
    if not all(math.isfinite(v) for v in record.values()):
        raise FloatingPointError(f"non-finite loss: {record}")
    terms["total"].backward()
    optimizer.step()
    return record


@torch.no_grad()
def evaluate_loss(model: IRStyleModel, batches: Sequence[dict[str, torch.Tensor]],
                  loss_encoder: Encoder, lam: float = 1.0, bins: int = 64) -> dict[str, float]:
    model.eval()
    sums: dict[str, float] = {}
    for b in batches:
        for k, v in forward_losses(model, b, loss_encoder, lam, bins).items():
            sums[k] = sums.get(k, 0.0) + float(v)
    return {k: v / len(batches) for k, v in sums.items()}


@torch.no_grad()
def content_map_consistency(model: IRStyleModel, pairs: Sequence[PairedSample]) -> tuple[float, float]:
    """(mean |M_c1 - M_c2|, mean |I1 - I2|) over held-out pairs; M_ci from (Ii, other) prediction."""
    i1 = _stack([p.i1 for p in pairs])
    i2 = _stack([p.i2 for p in pairs])
    n = i1.shape[0]
    f1, f2 = model.encoder(i1), model.encoder(i2)
    out = model.stylize(torch.cat([i1, i2]), [torch.cat([a, b]) for a, b in zip(f1, f2)],
                        [torch.cat([b, a]) for a, b in zip(f1, f2)])
    cm = out["content_map"]
    return float((cm[:n] - cm[n:]).abs().mean()), float((i1 - i2).abs().mean())


def make_trainer_state(config: TrainConfig, model: IRStyleModel | None = None):
    torch.manual_seed(config.seed)
    if model is None:
        model = IRStyleModel(config.variant)
    optimizer = tnn.build_optimizer(model.parameters(), lr=config.lr)
    return model, optimizer


def train(config: TrainConfig, corpus: Sequence[np.ndarray], filters: Sequence[Lut3d],
          model: IRStyleModel | None = None, loss_encoder: Encoder | None = None,
          callback: Callable[[int, dict], None] | None = None) -> tuple[IRStyleModel, list[dict]]:
    """Run ``config.steps`` combined-supervision steps; returns the model and per-step records."""
    model, optimizer = make_trainer_state(config, model)
    loss_encoder = loss_encoder or make_frozen_encoder(LOSS_ENCODER_SEED)
    stream = SampleStream(corpus, filters, config.seed)
    history = []
    for step in range(config.steps):
        rec = train_step(model, stream.batch(config.batch), optimizer, loss_encoder,
                         config.lam, config.bins)
        history.append(rec)
        if callback is not None:
            callback(step, rec)
        if config.log_every and step % config.log_every == 0:
            log.info("step %d total=%.5f pair=%.5f unpair=%.5f", step, rec["total"],
                     rec["pair"], rec["unpair"])
    return model.eval(), history
