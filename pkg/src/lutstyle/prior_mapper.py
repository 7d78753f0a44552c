"""Text-reference head: map external prior features into the style-feature space.

Prior features (one forward pass of a text-to-image model, four scales) arrive
as MRSF files. A small per-scale mapper projects them onto the encoder's
pyramid shapes so they can stand in for the style features of a reference
image. The mapper is trained by distillation against a frozen image-reference
model.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import nn as tnn
from .encoder import pyramid_shapes
from .irstyle import IRStyleModel, concat_summaries, make_thumbnail, summarize, transfer
from .nn import FormatError, _Reader

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"MRSF"
FEATURE_VERSION = 1
FEATURE_COUNT = 4
META_TAG = b"META"


@dataclass
class PriorFeatureFile:
    tensors: list[np.ndarray]
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.tensors) != FEATURE_COUNT:
            raise ValueError(f"expected {FEATURE_COUNT} tensors, got {len(self.tensors)}")
        self.tensors = [np.asarray(t, dtype=np.float32) for t in self.tensors]
        for i, t in enumerate(self.tensors):
            if not np.isfinite(t).all():
                raise ValueError(f"tensor {i} contains non-finite values")

    def as_batch(self) -> list[torch.Tensor]:
        """Tensors as (1, C, H, W)."""
        out = []
        for t in self.tensors:
            x = torch.from_numpy(np.array(t))
            while x.dim() < 4:
                x = x.unsqueeze(0)
            out.append(x)
        return out

    def shapes(self) -> list[tuple[int, int, int]]:
        return [tuple(t.shape[-3:]) for t in self.tensors]


def encode_feature_file(pf: PriorFeatureFile) -> bytes:
    out = [FEATURE_MAGIC, struct.pack("<II", FEATURE_VERSION, len(pf.tensors))]
    for t in pf.tensors:
        arr = np.ascontiguousarray(t, dtype="<f4")
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.tobytes())
    if pf.metadata:
        text = "".join(f"{k}={v}\n" for k, v in pf.metadata.items()).encode("utf-8")
        out.append(META_TAG + struct.pack("<I", len(text)) + text)
    return b"".join(out)


def decode_feature_file(data: bytes) -> PriorFeatureFile:
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != FEATURE_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {FEATURE_MAGIC!r}", 0)
    version = r.u32("version")
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    count = r.u32("tensor count")
    if count != FEATURE_COUNT:
        raise FormatError(f"tensor count must be {FEATURE_COUNT}, got {count}", 8)
    tensors = [r.tensor(f"tensor {i}") for i in range(count)]
    metadata = {}
    if r.pos < len(data):
        at = r.pos
        if r.take(4, "metadata tag") != META_TAG:
            raise FormatError("trailing bytes are not a metadata block", at)
        n = r.u32("metadata length")
        at = r.pos
        try:
            text = r.take(n, "metadata").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("metadata is not UTF-8", at) from None
        for line in text.splitlines():
            if line:
                key, _, value = line.partition("=")
                metadata[key] = value
        if r.pos != len(data):
            raise FormatError(f"{len(data) - r.pos} trailing bytes", r.pos)
    return PriorFeatureFile(tensors, metadata)


def write_feature_file(path, pf: PriorFeatureFile) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_feature_file(pf))


def read_feature_file(path) -> PriorFeatureFile:
    with open(path, "rb") as fh:
        return decode_feature_file(fh.read())


class PriorMapper(nn.Module):
    """Per scale: conv 3x3, ReLU, conv 3x3, then bilinear resize to the pyramid shape."""

    def __init__(self, in_shapes: Sequence[tuple[int, int, int]],
                 target_shapes: Sequence[tuple[int, int, int]] | None = None):
        super().__init__()
        self.in_shapes = [tuple(int(v) for v in s) for s in in_shapes]
        self.target_shapes = list(target_shapes or pyramid_shapes())
        if len(self.in_shapes) != FEATURE_COUNT or len(self.target_shapes) != FEATURE_COUNT:
            raise ValueError(f"mapper needs {FEATURE_COUNT} input and target shapes")
        blocks = []
        for (c_in, _, _), (c_out, _, _) in zip(self.in_shapes, self.target_shapes):
            block = nn.Sequential(
                nn.Conv2d(c_in, c_out, 3, padding=1), nn.ReLU(),
                nn.Conv2d(c_out, c_out, 3, padding=1),
            )
            for m in block:
                if isinstance(m, nn.Conv2d):
                    nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
                    nn.init.zeros_(m.bias)
            blocks.append(block)
        self.blocks = nn.ModuleList(blocks)

    def forward(self, priors: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        if len(priors) != FEATURE_COUNT:
            raise ValueError(f"expected {FEATURE_COUNT} prior tensors, got {len(priors)}")
        out = []
        for i, (x, block, (_, h, w)) in enumerate(zip(priors, self.blocks, self.target_shapes)):
            if tuple(x.shape[1:]) != self.in_shapes[i]:
                raise ValueError(f"prior {i} has shape {tuple(x.shape[1:])}, mapper expects {self.in_shapes[i]}")
            out.append(tnn.resize_bilinear(block(x), h, w))
        return out


def map_prior_features(priors: PriorFeatureFile, mapper: PriorMapper) -> list[torch.Tensor]:
    with torch.no_grad():
        return mapper(priors.as_batch())


def blend_style_features(f_image: Sequence[torch.Tensor], f_mapped: Sequence[torch.Tensor],
                         w: float) -> list[torch.Tensor]:
    """Convex mix per scale: w * image features + (1 - w) * mapped features."""
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"blend weight must be in [0, 1], got {w}")
    if len(f_image) != len(f_mapped):
        raise ValueError("feature pyramids have different depths")
    out = []
    for a, b in zip(f_image, f_mapped):
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
        out.append(w * a + (1.0 - w) * b)
    return out


def save_mapper(path, mapper: PriorMapper) -> None:
    meta = np.array([v for s in mapper.in_shapes for v in s]
                    + [v for s in mapper.target_shapes for v in s], dtype=np.float32)
    tnn.save_module(path, mapper, {"meta.mapper": meta})


def load_mapper(path) -> PriorMapper:
    tensors = tnn.load_checkpoint(path)
    if "meta.mapper" not in tensors:
        raise ValueError(f"{path}: not a mapper checkpoint (no meta.mapper)")
    dims = [int(v) for v in tensors["meta.mapper"]]
    shapes = [tuple(dims[i:i + 3]) for i in range(0, len(dims), 3)]
    mapper = PriorMapper(shapes[:FEATURE_COUNT], shapes[FEATURE_COUNT:])
    tnn.load_module_state(mapper, tensors)
    return mapper


# ---------------------------------------------------------------------------
# distillation


@dataclass
class Triplet:
    content: np.ndarray
    priors: PriorFeatureFile
    target: np.ndarray

    def __post_init__(self):
        if self.content.shape != self.target.shape:
            raise ValueError(f"target {self.target.shape} must match content {self.content.shape}")


@torch.no_grad()
def prior_features_from_image(model: IRStyleModel, style: np.ndarray, **metadata) -> PriorFeatureFile:
    """Self-distillation priors: the image model's own encoder pyramid of the style thumbnail."""
    thumb = torch.from_numpy(make_thumbnail(style)).permute(2, 0, 1)[None]
    levels = model.encoder(thumb)
    return PriorFeatureFile([lv[0].contiguous().numpy() for lv in levels],
                            {"source": "self-distill", **{k: str(v) for k, v in metadata.items()}})


def make_self_distill_triplets(model: IRStyleModel, contents: Sequence[np.ndarray],
                               styles: Sequence[np.ndarray]) -> list[Triplet]:
    triplets = []
    for k, (c, s) in enumerate(zip(contents, styles)):
        target = transfer(c, s, model).output
        triplets.append(Triplet(c, prior_features_from_image(model, s, index=k), target))
    return triplets


class MapperTrainer:
    """Owns the frozen image model, the mapper and its optimizer."""

    def __init__(self, mapper: PriorMapper, model: IRStyleModel, lr: float = 5e-4):
        self.mapper = mapper
        self.model = tnn.freeze(model).eval()
        self.optimizer = tnn.build_optimizer(mapper.parameters(), lr=lr)
        self._content_cache: dict[int, object] = {}

    @torch.no_grad()
    def _content_summary(self, triplet: Triplet):
        key = id(triplet)
        if key not in self._content_cache:
            thumb = torch.from_numpy(make_thumbnail(triplet.content)).permute(2, 0, 1)[None]
            self._content_cache[key] = (triplet, summarize(self.model.encoder(thumb)))
        return self._content_cache[key][1]

    def forward(self, triplets: Sequence[Triplet]) -> torch.Tensor:
        """L_teach = MSE between the mapped-feature transfer and the targets."""
        sc = concat_summaries([self._content_summary(t) for t in triplets])
        priors = [torch.cat(xs) for xs in zip(*(t.priors.as_batch() for t in triplets))]
        ss = summarize(self.mapper(priors))
        images = torch.from_numpy(np.stack([t.content for t in triplets])).permute(0, 3, 1, 2)
        targets = torch.from_numpy(np.stack([t.target for t in triplets])).permute(0, 3, 1, 2)
        tables = self.model.tables(sc, ss)
        if self.model.dual:
            y = tnn.apply_lut_tensor(tables["style"], tnn.apply_lut_tensor(tables["content"], images))
        else:
            y = tnn.apply_lut_tensor(tables["direct"], images)
        return F.mse_loss(y, targets)

    def step(self, triplets: Sequence[Triplet]) -> dict[str, float]:
        self.mapper.train()
        self.optimizer.zero_grad(set_to_none=True)
        loss = self.forward(triplets)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite L_teach: {value}")
        loss.backward()
        self.optimizer.step()
        return {"teach": value}

    @torch.no_grad()
    def evaluate(self, triplets: Sequence[Triplet], batch: int = 4) -> float:
        total = 0.0
        for i in range(0, len(triplets), batch):
            chunk = triplets[i:i + batch]
            total += float(self.forward(chunk)) * len(chunk)
        return total / len(triplets)


def train_mapper_step(trainer: MapperTrainer, triplets: Sequence[Triplet]) -> dict[str, float]:
    return trainer.step(triplets)


def train_mapper(trainer: MapperTrainer, triplets: Sequence[Triplet], steps: int, batch: int = 4,
                 seed: int = 0, log_every: int = 50) -> list[dict[str, float]]:
    rng = np.random.default_rng(seed)
    history = []
    for step in range(steps):
        idx = rng.choice(len(triplets), min(batch, len(triplets)), replace=False)
        rec = trainer.step([triplets[i] for i in idx])
        history.append(rec)
        if log_every and step % log_every == 0:
            log.info("mapper step %d L_teach=%.6f", step, rec["teach"])
    return history


def mapped_transfer(content: np.ndarray, priors: PriorFeatureFile, mapper: PriorMapper,
                    model: IRStyleModel, blend_image: np.ndarray | None = None, w: float = 0.0,
                    threads: int | None = None):
    """Text-reference transfer; optionally mixed with an image reference's features."""
    feats = map_prior_features(priors, mapper)
    if blend_image is not None:
        with torch.no_grad():
            thumb = torch.from_numpy(make_thumbnail(blend_image)).permute(2, 0, 1)[None]
            feats = blend_style_features(model.encoder(thumb), feats, w)
    return transfer(content, None, model, style_features=feats, threads=threads)
