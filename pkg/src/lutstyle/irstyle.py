"""Image-reference transfer: the three predictor architectures and the transfer pipeline."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import _kernels
from . import nn as tnn
from .encoder import CHANNELS, THUMB_SIZE, Encoder
from .lut import DEFAULT_SIZE, ClutBank, Lut3d, _identity_grid, apply_lut, compose_luts, materialize_clut

BASIS_COUNT = 20
HEAD_WIDTH = 64
# Peak residual of each initial basis table. Zero-initialized heads move only
# slowly under Adam, so the tables must already span strong grades.
BASIS_SCALE = 0.3
POOL_SIZE = 16


class ArchVariant(str, enum.Enum):
    DIRECT = "direct"
    NON_INTERACTION_DUAL = "dual"
    INTERACTION_DUAL = "interaction-dual"

    @property
    def code(self) -> int:
        return list(ArchVariant).index(self)


class PredictorHead(nn.Module):
    """Four conv blocks, global average pool, linear layer to K basis weights."""

    def __init__(self, in_channels: int, out_features: int = BASIS_COUNT, width: int = HEAD_WIDTH):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, stride=1, padding=1), nn.ReLU(),
            nn.Conv2d(width, width, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(width, width, 3, stride=1, padding=1), nn.ReLU(),
            nn.Conv2d(width, width, 3, stride=2, padding=1), nn.ReLU(),
        )
        for m in self.body:
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)
        self.fc = nn.Linear(width, out_features)
        nn.init.zeros_(self.fc.weight)
        nn.init.zeros_(self.fc.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.body(x).mean(dim=(2, 3)))


def smooth_basis(count: int, size: int, scale: float = 0.05) -> torch.Tensor:
    """Random low-frequency residual tables, (count, D, D, D, 3)."""
    coarse = torch.randn(count, 3, 3, 3, 3) * scale
    fine = F.interpolate(coarse, size=(size, size, size), mode="trilinear", align_corners=True)
    return fine.permute(0, 2, 3, 4, 1).contiguous()


def grading_basis(count: int, size: int, scale: float = BASIS_SCALE) -> torch.Tensor:
    """Residual basis whose leading tables are elementary color grades.

    Per output channel: offset, gain about mid-gray, a midtone bend and a pull
    toward luma; then one global saturation table. Any remaining slots are
    random smooth fields. Every table is scaled to a peak magnitude of ``scale``.
    """
    x = torch.from_numpy(np.array(_identity_grid(size), dtype=np.float32))
    luma = (x @ torch.tensor([0.299, 0.587, 0.114]))
    fixed = []
    for c in range(3):
        xc = x[..., c]
        for f in (torch.ones_like(xc), xc - 0.5, 4 * xc * (1 - xc), luma - xc):
            t = torch.zeros_like(x)
            t[..., c] = f
            fixed.append(t)
    fixed.append(x - luma[..., None])
    tables = fixed[:count]
    if count > len(tables):
        tables.extend(smooth_basis(count - len(tables), size, 1.0).unbind(0))
    out = torch.stack(tables)
    peak = out.flatten(1).abs().amax(dim=1).clamp_min(1e-12)
    return out / peak[:, None, None, None, None] * scale


@dataclass
class PyramidSummary:
    """Each level pooled to 16x16, plus its per-channel moments.

    AdaIN is a per-channel affine map, so pooling adain(a, b) equals applying
    the same affine map to the pooled ``a``; only the moments need full maps.
    """

    pooled: list[torch.Tensor]
    means: list[torch.Tensor]
    stds: list[torch.Tensor]

    def select(self, idx) -> "PyramidSummary":
        return PyramidSummary([p[idx] for p in self.pooled], [m[idx] for m in self.means],
                              [s[idx] for s in self.stds])


def summarize(levels: list[torch.Tensor], eps: float = tnn.ADAIN_EPS) -> PyramidSummary:
    pooled, means, stds = [], [], []
    for lv in levels:
        # One memory layout for every source, so reductions sum in the same order
        # whether features come from the encoder or from elsewhere.
        lv = lv.contiguous()
        m, s = tnn.channel_moments(lv, eps)
        pooled.append(F.adaptive_avg_pool2d(lv, POOL_SIZE))
        means.append(m)
        stds.append(s)
    return PyramidSummary(pooled, means, stds)


def concat_summaries(parts: list[PyramidSummary]) -> PyramidSummary:
    return PyramidSummary(*([torch.cat(xs) for xs in zip(*(getattr(p, f) for p in parts))]
                            for f in ("pooled", "means", "stds")))


def pooled_features(a: PyramidSummary, b: PyramidSummary | None = None) -> torch.Tensor:
    """Concatenate every pooled level of ``a`` (and adain(a, b) when ``b`` is given)."""
    parts = []
    for i, pa in enumerate(a.pooled):
        parts.append(pa)
        if b is not None:
            parts.append(b.stds[i] * (pa - a.means[i]) / a.stds[i] + b.means[i])
    return torch.cat(parts, dim=1)


class IRStyleModel(nn.Module):
    def __init__(self, variant: ArchVariant | str = ArchVariant.INTERACTION_DUAL,
                 lut_size: int = DEFAULT_SIZE, basis_count: int = BASIS_COUNT,
                 head_width: int = HEAD_WIDTH):
        super().__init__()
        self.variant = ArchVariant(variant)
        self.lut_size = lut_size
        self.basis_count = basis_count
        self.head_width = head_width
        self.encoder = Encoder()
        feat = sum(CHANNELS)
        if self.variant is ArchVariant.DIRECT:
            self.head_direct = PredictorHead(4 * feat, basis_count, head_width)
            self.bank_direct = nn.Parameter(grading_basis(basis_count, lut_size))
        else:
            in_ch = 2 * feat if self.variant is ArchVariant.INTERACTION_DUAL else feat
            self.head_content = PredictorHead(in_ch, basis_count, head_width)
            self.head_style = PredictorHead(in_ch, basis_count, head_width)
            self.bank_content = nn.Parameter(grading_basis(basis_count, lut_size))
            self.bank_style = nn.Parameter(grading_basis(basis_count, lut_size))

    @property
    def dual(self) -> bool:
        return self.variant is not ArchVariant.DIRECT

    def head_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("encoder.")]

    def weights(self, fc, fs) -> dict[str, torch.Tensor]:
        """LUT basis weights from content and style pyramids (level lists or summaries)."""
        if not isinstance(fc, PyramidSummary):
            fc = summarize(fc)
        if not isinstance(fs, PyramidSummary):
            fs = summarize(fs)
        if self.variant is ArchVariant.DIRECT:
            x = torch.cat([pooled_features(fc, fs), pooled_features(fs, fc)], dim=1)
            return {"direct": self.head_direct(x)}
        if self.variant is ArchVariant.INTERACTION_DUAL:
            xc, xs = pooled_features(fc, fs), pooled_features(fs, fc)
        else:
            xc, xs = pooled_features(fc), pooled_features(fs)
        return {"content": self.head_content(xc), "style": self.head_style(xs)}

    def tables(self, fc, fs) -> dict[str, torch.Tensor]:
        return {k: tnn.materialize_tables(getattr(self, f"bank_{k}"), w)
                for k, w in self.weights(fc, fs).items()}

    def stylize(self, images: torch.Tensor, fc, fs) -> dict[str, torch.Tensor]:
        """Differentiable forward: LUTs from the pyramids applied to ``images`` (N, 3, H, W)."""
        t = self.tables(fc, fs)
        if not self.dual:
            return {"output": tnn.apply_lut_tensor(t["direct"], images)}
        content_map = tnn.apply_lut_tensor(t["content"], images)
        return {"content_map": content_map, "output": tnn.apply_lut_tensor(t["style"], content_map)}

    def banks(self) -> dict[str, ClutBank]:
        names = ["direct"] if not self.dual else ["content", "style"]
        return {k: ClutBank(getattr(self, f"bank_{k}").detach().cpu().numpy()) for k in names}

    @torch.no_grad()
    def predict_luts(self, content_thumb, style_thumb=None, style_features=None) -> "LutSet":
        """Predict the LUT set from 256x256 thumbnails (or precomputed style features)."""
        xc = _as_batch(content_thumb)
        fc = self.encoder(xc)
        if style_features is None:
            if style_thumb is None:
                raise ValueError("need a style thumbnail or style features")
            fs = self.encoder(_as_batch(style_thumb))
        else:
            fs = [f if f.dim() == 4 else f.unsqueeze(0) for f in style_features]
        weights = {k: v[0].cpu().numpy() for k, v in self.weights(fc, fs).items()}
        banks = self.banks()
        luts = {k: materialize_clut(banks[k], w) for k, w in weights.items()}
        return LutSet(content=luts.get("content"), style=luts.get("style"),
                      direct=luts.get("direct"), weights=weights)


def _as_batch(img) -> torch.Tensor:
    if isinstance(img, np.ndarray):
        if img.ndim != 3 or img.shape[-1] != 3:
            raise ValueError(f"expected an (H, W, 3) image, got {img.shape}")
        if img.shape[:2] != (THUMB_SIZE, THUMB_SIZE):
            raise ValueError(f"thumbnails must be {THUMB_SIZE}x{THUMB_SIZE}, got {img.shape[:2]}")
        return torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32)).permute(2, 0, 1)[None]
    t = img if img.dim() == 4 else img.unsqueeze(0)
    return t.float()


@dataclass
class LutSet:
    content: Lut3d | None = None
    style: Lut3d | None = None
    direct: Lut3d | None = None
    weights: dict | None = None

    @property
    def count(self) -> int:
        return sum(x is not None for x in (self.content, self.style, self.direct))

    def apply(self, image: np.ndarray, threads: int | None = None) -> tuple[np.ndarray, np.ndarray | None]:
        """(output, content_map); content_map is None for direct mapping."""
        if self.direct is not None:
            return apply_lut(self.direct, image, threads=threads), None
        content_map = apply_lut(self.content, image, threads=threads)
        return apply_lut(self.style, content_map, threads=threads), content_map

    def composed(self) -> Lut3d:
        if self.direct is not None:
            return self.direct
        return compose_luts(self.content, self.style)


@dataclass
class TransferResult:
    output: np.ndarray
    luts: LutSet
    content_map: np.ndarray | None

    @property
    def content_lut(self) -> Lut3d | None:
        return self.luts.content

    @property
    def style_lut(self) -> Lut3d | None:
        return self.luts.style

    @property
    def direct_lut(self) -> Lut3d | None:
        return self.luts.direct


def make_thumbnail(image: np.ndarray, size: int = THUMB_SIZE) -> np.ndarray:
    """Bilinear downsample with half-pixel centers.

    Samples only the 4 source pixels under each output pixel, so the cost
    depends on the thumbnail size, not on the source resolution.
    """
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[-1] != 3 or img.shape[0] == 0 or img.shape[1] == 0:
        raise ValueError(f"expected a non-empty (H, W, 3) image, got {img.shape}")
    h, w = img.shape[:2]

    def axis(n_in):
        src = (np.arange(size, dtype=np.float64) + 0.5) * (n_in / size) - 0.5
        src = np.maximum(src, 0.0)
        i0 = np.minimum(np.floor(src).astype(np.intp), n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, (src - i0)

    y0, y1, fy = axis(h)
    x0, x1, fx = axis(w)
    out = np.empty((size, size, 3), dtype=np.float32)
    _kernels.bilinear_gather(img, y0, y1, fy, x0, x1, fx, out)
    return out


def predict_luts(content_thumb, style_thumb, model: IRStyleModel) -> LutSet:
    return model.predict_luts(content_thumb, style_thumb)


def transfer(content: np.ndarray, style: np.ndarray | None, model: IRStyleModel,
             style_features=None, threads: int | None = None) -> TransferResult:
    """Predict LUTs on thumbnails, then apply them to the full-resolution content image."""
    if content.size == 0 or (style is not None and style.size == 0):
        raise ValueError("empty image")
    thumb_c = make_thumbnail(content)
    thumb_s = make_thumbnail(style) if style is not None else None
    luts = model.predict_luts(thumb_c, thumb_s, style_features=style_features)
    output, content_map = luts.apply(content, threads=threads)
    return TransferResult(output=output, luts=luts, content_map=content_map)


def save_model(path, model: IRStyleModel) -> None:
    meta = np.array([model.variant.code, model.lut_size, model.basis_count, model.head_width],
                    dtype=np.float32)
    tnn.save_module(path, model, {"meta.irstyle": meta})


def load_model(path) -> IRStyleModel:
    tensors = tnn.load_checkpoint(path)
    if "meta.irstyle" not in tensors:
        raise ValueError(f"{path}: not an image-reference model checkpoint (no meta.irstyle)")
    code, lut_size, basis_count, width = (int(v) for v in tensors["meta.irstyle"])
    model = IRStyleModel(list(ArchVariant)[code], lut_size, basis_count, width)
    tnn.load_module_state(model, tensors)
    return model.eval()
