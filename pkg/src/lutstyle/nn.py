"""Tensor ops, differentiable LUT application, optimizer and the MRSW checkpoint format.

Autodiff, convolution and Adam come from torch; this module pins the exact
semantics the rest of the package relies on.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from typing import Iterable, Mapping

import numpy as np
import torch
import torch.nn.functional as F

from . import _kernels
from .lut import _identity_grid

ADAIN_EPS = 1e-5
CHECKPOINT_MAGIC = b"MRSW"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    """Malformed binary file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"offset {offset}: {message}")
        self.offset = offset


def conv2d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
           stride: int = 1, padding: int = 0) -> torch.Tensor:
    if x.dim() != 4 or weight.dim() != 4:
        raise ValueError("conv2d expects 4D input and weight")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"bias shape {tuple(bias.shape)} does not match {weight.shape[0]} outputs")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def resize_bilinear(x: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Bilinear resampling with half-pixel centers (align_corners=False, no antialias)."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be >= 1")
    if x.shape[-2:] == (out_h, out_w):
        return x
    return F.interpolate(x, size=(out_h, out_w), mode="bilinear", align_corners=False)


def channel_moments(x: torch.Tensor, eps: float = 0.0) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-sample, per-channel mean and sqrt(biased variance + eps), shaped (N, C, 1, 1)."""
    var, mean = torch.var_mean(x.flatten(2), dim=2, unbiased=False)
    return mean[..., None, None], torch.sqrt(var + eps)[..., None, None]


def adain(content: torch.Tensor, style: torch.Tensor, eps: float = ADAIN_EPS) -> torch.Tensor:
    if content.shape[:2] != style.shape[:2]:
        raise ValueError(f"adain channel mismatch: {tuple(content.shape[:2])} vs {tuple(style.shape[:2])}")
    c_mean, c_std = channel_moments(content, eps)
    s_mean, s_std = channel_moments(style, eps)
    return s_std * (content - c_mean) / c_std + s_mean


def identity_table(size: int, device=None) -> torch.Tensor:
    return torch.from_numpy(np.array(_identity_grid(size))).to(device)


class _ResidualLookup(torch.autograd.Function):
    @staticmethod
    def forward(ctx, res, images):
        img = images.detach().contiguous().reshape(images.shape[0], 3, -1).numpy()
        r = res.detach().contiguous().numpy()
        out = np.empty_like(img)
        _kernels.apply_ncp_forward(img, r, out)
        ctx.save_for_backward(res, images)
        return torch.from_numpy(out).reshape(images.shape)

    @staticmethod
    def backward(ctx, grad_out):
        res, images = ctx.saved_tensors
        img = images.detach().contiguous().reshape(images.shape[0], 3, -1).numpy()
        r = res.detach().contiguous().numpy()
        go = grad_out.detach().contiguous().reshape(img.shape).to(images.dtype).numpy()
        grad_img = np.empty_like(img)
        grad_res = np.zeros_like(r)
        _kernels.apply_ncp_backward(img, r, go, grad_img, grad_res)
        return torch.from_numpy(grad_res), torch.from_numpy(grad_img).reshape(images.shape)


def apply_lut_tensor(tables: torch.Tensor, images: torch.Tensor) -> torch.Tensor:
    """Differentiable trilinear lookup.

    tables: (N, D, D, D, 3) indexed [r, g, b]; images: (N, 3, H, W).
    Same kernel arithmetic as ``lut.apply_lut`` (residual against identity,
    input and output clamped to [0, 1]); differentiable in tables and pixels.
    """
    n = tables.shape[0]
    if images.shape[0] != n or images.shape[1] != 3:
        raise ValueError(f"images {tuple(images.shape)} do not match {n} tables")
    res = tables - identity_table(tables.shape[1]).to(tables.dtype)
    return _ResidualLookup.apply(res, images.to(tables.dtype))


def materialize_tables(basis: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """clamp(identity + weights @ basis) for a batch of weight vectors -> (N, D, D, D, 3)."""
    d = basis.shape[1]
    delta = torch.einsum("nk,kabcd->nabcd", weights, basis)
    return (identity_table(d, basis.device).to(basis.dtype) + delta).clamp(0.0, 1.0)


def freeze(module: torch.nn.Module) -> torch.nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def build_optimizer(params: Iterable[torch.nn.Parameter], lr: float = 5e-4,
                    betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> torch.optim.Adam:
    """Adam over the trainable (non-frozen) parameters only."""
    trainable = [p for p in params if p.requires_grad]
    if not trainable:
        raise ValueError("no trainable parameters")
    return torch.optim.Adam(trainable, lr=lr, betas=betas, eps=eps)


# ---------------------------------------------------------------------------
# MRSW checkpoints


def encode_tensors(tensors: Mapping[str, np.ndarray | torch.Tensor]) -> bytes:
    out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, value in tensors.items():
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        arr = np.asarray(value, dtype="<f4", order="C")  # keeps rank-0 shapes
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated while reading {what} (need {n} bytes, "
                              f"{len(self.data) - self.pos} left)", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def tensor(self, what: str) -> np.ndarray:
        rank = self.u32(f"{what} rank")
        if rank > 8:
            raise FormatError(f"{what} has implausible rank {rank}", self.pos - 4)
        dims = struct.unpack(f"<{rank}I", self.take(4 * rank, f"{what} dims"))
        count = int(np.prod(dims, dtype=np.int64))
        start = self.pos
        arr = np.frombuffer(self.take(4 * count, f"{what} data"), dtype="<f4").reshape(dims)
        if not np.isfinite(arr).all():
            raise FormatError(f"{what} contains non-finite values", start)
        return arr.astype(np.float32)


def decode_tensors(data: bytes) -> "OrderedDict[str, np.ndarray]":
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}", 0)
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    count = r.u32("count")
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    for i in range(count):
        n = r.u32(f"name length of entry {i}")
        at = r.pos
        try:
            name = r.take(n, f"name of entry {i}").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"entry {i} name is not UTF-8", at) from None
        tensors[name] = r.tensor(repr(name))
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes", r.pos)
    return tensors


def save_checkpoint(path, tensors: Mapping[str, np.ndarray | torch.Tensor]) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensors(tensors))


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as fh:
        return decode_tensors(fh.read())


def save_module(path, module: torch.nn.Module, extra: Mapping[str, np.ndarray] | None = None) -> None:
    tensors = OrderedDict((k, v) for k, v in module.state_dict().items())
    if extra:
        tensors.update(extra)
    save_checkpoint(path, tensors)


def load_module_state(module: torch.nn.Module, tensors: Mapping[str, np.ndarray]) -> None:
    state = module.state_dict()
    missing = [k for k in state if k not in tensors]
    if missing:
        raise KeyError(f"checkpoint is missing {missing[:3]}{'...' if len(missing) > 3 else ''}")
    loaded = {}
    for k, ref in state.items():
        arr = tensors[k]
        if tuple(arr.shape) != tuple(ref.shape):
            raise ValueError(f"{k}: checkpoint shape {arr.shape} != model shape {tuple(ref.shape)}")
        loaded[k] = torch.from_numpy(np.array(arr)).to(ref.dtype)
    module.load_state_dict(loaded)
