"""ViT style encoder: N style images -> Style Memory of shape (S_len, B, d_model)."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
from einops import rearrange

from .corpus import NUM_STYLE_IMAGES, STYLE_SIZE


@dataclass(frozen=True)
class PatchEmbeddingConfig:
    image_size: int = STYLE_SIZE
    patch_size: int = 16
    embed_dim: int = 384
    depth: int = 12
    heads: int = 6
    mlp_ratio: float = 4.0
    memory_dim: int = 512
    num_images: int = NUM_STYLE_IMAGES
    dropout: float = 0.0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches_per_image(self) -> int:
        return self.grid**2

    @property
    def num_tokens(self) -> int:
        return self.num_patches_per_image + 1

    @property
    def memory_length(self) -> int:
        return self.num_images * self.num_patches_per_image


@dataclass(frozen=True)
class PatchProvenance:
    """Maps a Style Memory row to the style image and patch it came from."""

    num_images: int = NUM_STYLE_IMAGES
    grid: int = 14

    @property
    def patches_per_image(self) -> int:
        return self.grid * self.grid

    def __len__(self) -> int:
        return self.num_images * self.patches_per_image

    def __call__(self, memory_index: int) -> tuple[int, int, int]:
        if not 0 <= memory_index < len(self):
            raise IndexError(f"memory index {memory_index} outside [0, {len(self)})")
        image, within = divmod(int(memory_index), self.patches_per_image)
        row, col = divmod(within, self.grid)
        return image, row, col

    def table(self) -> list[tuple[int, int, int]]:
        return [self(i) for i in range(len(self))]


def patch_provenance(memory_index: int, num_images: int = NUM_STYLE_IMAGES, grid: int = 14):
    return PatchProvenance(num_images, grid)(memory_index)


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0, dropout: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden), nn.GELU(), nn.Dropout(dropout), nn.Linear(hidden, dim), nn.Dropout(dropout)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class VisionTransformer(nn.Module):
    """Plain ViT trunk returning all tokens, CLS first."""

    def __init__(self, cfg: PatchEmbeddingConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Conv2d(3, cfg.embed_dim, cfg.patch_size, stride=cfg.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_tokens, cfg.embed_dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        self.blocks = nn.ModuleList(
            EncoderBlock(cfg.embed_dim, cfg.heads, cfg.mlp_ratio, cfg.dropout) for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(cfg.embed_dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = rearrange(self.patch_embed(images), "s c h w -> s (h w) c")
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


class StyleEncoder(nn.Module):
    """Encodes a batch of style sets into the Style Memory bank.

    Input is ``(B, N, 3, 224, 224)`` in [-1, 1]; output is ``(N * P, B, memory_dim)``
    where row ``i`` comes from the patch ``self.provenance(i)``.
    """

    def __init__(self, cfg: PatchEmbeddingConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or PatchEmbeddingConfig()
        self.vit = VisionTransformer(cfg)
        self.proj = nn.Linear(cfg.embed_dim, cfg.memory_dim)
        self.norm = nn.LayerNorm(cfg.memory_dim)
        self.provenance = PatchProvenance(cfg.num_images, cfg.grid)

    def forward(self, style: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        expected = (cfg.num_images, 3, cfg.image_size, cfg.image_size)
        if style.ndim != 5 or tuple(style.shape[1:]) != expected:
            raise ValueError(
                f"style batch must be (B, {cfg.num_images}, 3, {cfg.image_size}, {cfg.image_size}) "
                f"i.e. {cfg.image_size}x{cfg.image_size} images, got {tuple(style.shape)}"
            )
        b = style.shape[0]
        tokens = self.vit(style.flatten(0, 1))  # (B*N, Q, E)
        projected = self.norm(self.proj(tokens[:, 1:, :]))
        return rearrange(projected, "(b n) p d -> (n p) b d", b=b)


def load_pretrained(encoder: StyleEncoder, state_dict: dict, strict: bool = True):
    """Load externally supplied ViT weights into the encoder's trunk."""
    return encoder.vit.load_state_dict(state_dict, strict=strict)
