"""Image synthesis head: fused character embeddings -> 32 px high word image."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .corpus import WORD_HEIGHT


@dataclass
class GeneratedWordImage:
    image: np.ndarray  # uint8 (32, 16*K), white = 255
    text: str
    writer: Optional[int] = None
    seed: Optional[int] = None


class ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        h = self.conv1(F.leaky_relu(x, 0.2))
        h = self.conv2(F.leaky_relu(h, 0.2))
        return x + h


class SynthesisHead(nn.Module):
    """Linear expansion to an ``8 x 2K`` grid, two x2 upsampling stages to ``32 x 8K``,
    then a transposed convolution that doubles the width to ``32 x 16K``.

    Each token owns a ``16``-px-wide column band of the output.
    """

    base_height = 8
    base_width = 2

    def __init__(self, d_model: int = 512, channels: int = 256, blocks_per_stage: int = 2):
        super().__init__()
        c0, c1, c2, c3 = channels, max(channels // 2, 1), max(channels // 4, 1), max(channels // 8, 1)
        self.channels = c0
        self.expand = nn.Linear(d_model, c0 * self.base_height * self.base_width)

        def stage(c):
            return nn.Sequential(*[ResBlock(c) for _ in range(blocks_per_stage)])

        self.stage0 = stage(c0)
        self.up1 = nn.Conv2d(c0, c1, 3, padding=1)
        self.stage1 = stage(c1)
        self.up2 = nn.Conv2d(c1, c2, 3, padding=1)
        self.stage2 = stage(c2)
        self.widen = nn.ConvTranspose2d(c2, c3, kernel_size=(1, 2), stride=(1, 2))
        self.stage3 = stage(c3)
        self.to_image = nn.Conv2d(c3, 1, 3, padding=1)

    @staticmethod
    def output_width(k: int) -> int:
        return 16 * k

    def forward(self, fused: torch.Tensor, padding_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        """``(K, B, D)`` -> ``(B, 1, 32, 16K)`` in [-1, 1]; padded columns are white."""
        if fused.ndim != 3 or fused.shape[0] < 1:
            raise ValueError(f"fused sequence must be (K>=1, B, D), got {tuple(fused.shape)}")
        if not torch.isfinite(fused).all():
            raise ValueError("fused sequence contains non-finite values")
        k = fused.shape[0]
        x = self.expand(fused)  # (K, B, C*8*2)
        if padding_mask is not None:
            x = x.masked_fill(padding_mask.t()[:, :, None], 0.0)
        x = rearrange(x, "k b (c h w) -> b c h (k w)", h=self.base_height, w=self.base_width)
        x = self.stage0(x)
        x = self.stage1(self.up1(F.interpolate(x, scale_factor=2, mode="nearest")))
        x = self.stage2(self.up2(F.interpolate(x, scale_factor=2, mode="nearest")))
        x = self.stage3(self.widen(F.leaky_relu(x, 0.2)))
        img = torch.tanh(self.to_image(F.leaky_relu(x, 0.2)))
        assert img.shape[-2] == WORD_HEIGHT and img.shape[-1] == self.output_width(k)
        if padding_mask is not None:
            cols = torch.repeat_interleave(padding_mask, 16, dim=1)  # (B, 16K)
            img = img.masked_fill(cols[:, None, None, :], 1.0)
        return img


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """[-1, 1] tensor -> uint8 array with white = 255."""
    arr = ((image.detach().cpu().double().clamp(-1, 1) + 1.0) * 127.5).round()
    return arr.numpy().astype(np.uint8)


def export_images(images: torch.Tensor, texts, lengths, writer=None, seed=None) -> list[GeneratedWordImage]:
    """Crop each image of a ``(B, 1, 32, W)`` batch to its true width and convert to uint8."""
    out = []
    for i, (text, k) in enumerate(zip(texts, lengths)):
        raster = to_uint8(images[i, 0, :, : 16 * k])
        w = writer[i] if isinstance(writer, (list, tuple)) else writer
        out.append(GeneratedWordImage(raster, text, w, seed))
    return out
