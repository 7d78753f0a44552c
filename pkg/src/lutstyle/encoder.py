"""Shared four-level feature encoder."""

from __future__ import annotations

import torch
from torch import nn

THUMB_SIZE = 256
CHANNELS = (16, 32, 64, 128)
STRIDES = (2, 4, 8, 16)


def pyramid_shapes(size: int = THUMB_SIZE) -> list[tuple[int, int, int]]:
    return [(c, size // s, size // s) for c, s in zip(CHANNELS, STRIDES)]


def kaiming_init_(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class Encoder(nn.Module):
    """Four (conv s2, ReLU, conv, ReLU) blocks; level i has stride 2**(i+1)."""

    def __init__(self, channels=CHANNELS):
        super().__init__()
        blocks = []
        c_in = 3
        for c in channels:
            blocks.append(nn.Sequential(
                nn.Conv2d(c_in, c, 3, stride=2, padding=1),
                nn.ReLU(),
                nn.Conv2d(c, c, 3, stride=1, padding=1),
                nn.ReLU(),
            ))
            c_in = c
        self.blocks = nn.ModuleList(blocks)
        kaiming_init_(self)
        # NHWC is markedly faster for these convolutions on CPU
        self.to(memory_format=torch.channels_last)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if x.dim() != 4 or x.shape[1] != 3 or x.shape[-2:] != (THUMB_SIZE, THUMB_SIZE):
            raise ValueError(f"encoder expects (N, 3, {THUMB_SIZE}, {THUMB_SIZE}) input, got {tuple(x.shape)}")
        x = x.contiguous(memory_format=torch.channels_last)
        levels = []
        for block in self.blocks:
            x = block(x)
            levels.append(x)
        return levels


def encode_multiscale(encoder: Encoder, thumbnail: torch.Tensor) -> list[torch.Tensor]:
    return encoder(thumbnail)


def make_frozen_encoder(seed: int) -> Encoder:
    """Seeded, frozen encoder used as the fixed feature space for losses and metrics."""
    gen_state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        enc = Encoder()
    finally:
        torch.random.set_rng_state(gen_state)
    for p in enc.parameters():
        p.requires_grad_(False)
    return enc.eval()
