"""The full generator: style encoder + content encoder + fusion core + synthesis head."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .content_encoder import ContentEncoder, ContentQuery
from .corpus import CharsetTokenizer, StyleSampleSet
from .fusion import AttentionRecorder, FusionCore
from .style_encoder import PatchEmbeddingConfig, StyleEncoder
from .synthesis import SynthesisHead


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 16
    vit_dim: int = 384
    vit_depth: int = 12
    vit_heads: int = 6
    d_model: int = 512
    decoder_layers: int = 3
    decoder_heads: int = 8
    decoder_ff: int = 2048
    decoder_dropout: float = 0.1
    attention_scale: str = "model"
    synth_channels: int = 256
    synth_blocks: int = 2
    critic_channels: int = 64
    tr_hidden: int = 128
    max_text_length: int = 32

    def patch_config(self) -> PatchEmbeddingConfig:
        return PatchEmbeddingConfig(
            patch_size=self.patch_size, embed_dim=self.vit_dim, depth=self.vit_depth,
            heads=self.vit_heads, memory_dim=self.d_model,
        )

    def to_dict(self) -> dict:
        return asdict(self)


def style_tensor(style_sets: Sequence[StyleSampleSet] | np.ndarray) -> torch.Tensor:
    """Style sets -> ``(B, N, 3, 224, 224)`` float tensor in [-1, 1]."""
    if isinstance(style_sets, np.ndarray):
        arr = style_sets if style_sets.ndim == 5 else style_sets[None]
    else:
        arr = np.stack([s.images for s in style_sets])
    t = torch.from_numpy(np.ascontiguousarray(arr)).float() / 127.5 - 1.0
    return t.permute(0, 1, 4, 2, 3).contiguous()


class Generator(nn.Module):
    def __init__(self, cfg: ModelConfig, tokenizer: CharsetTokenizer):
        super().__init__()
        self.cfg = cfg
        self.tokenizer = tokenizer
        self.style_encoder = StyleEncoder(cfg.patch_config())
        self.content_encoder = ContentEncoder(tokenizer.num_classes, cfg.d_model, cfg.max_text_length)
        self.fusion_core = FusionCore(
            cfg.d_model, cfg.decoder_heads, cfg.decoder_layers, cfg.decoder_ff, cfg.decoder_dropout,
            cfg.attention_scale,
        )
        self.synthesis_head = SynthesisHead(cfg.d_model, cfg.synth_channels, cfg.synth_blocks)

    def forward(self, style: torch.Tensor, texts: Sequence[str], record_attention: bool = False):
        """Returns images ``(B, 1, 32, 16K)``, the content query and the recorder (or None)."""
        memory = self.style_encoder(style)
        content: ContentQuery = self.content_encoder.encode(texts, self.tokenizer)
        fused, recorder = self.fusion_core.fuse(
            content, memory, record_attention, provenance=self.style_encoder.provenance
        )
        if recorder is not None:
            recorder.texts = list(texts)
        images = self.synthesis_head(fused, content.padding_mask)
        return images, content, recorder

    def component_modules(self) -> dict[str, nn.Module]:
        return {
            "style_encoder": self.style_encoder,
            "content_encoder": self.content_encoder,
            "fusion_core": self.fusion_core,
            "synthesis_head": self.synthesis_head,
        }


def generate(generator: Generator, style_set: StyleSampleSet | np.ndarray, texts: Sequence[str],
             record_attention: bool = False):
    """Eval-mode generation of several words from one style set."""
    generator.eval()
    images = np.asarray(style_set.images if isinstance(style_set, StyleSampleSet) else style_set)
    style = style_tensor(np.repeat(images[None], len(texts), axis=0))
    with torch.no_grad():
        out, content, recorder = generator(style, list(texts), record_attention)
    return out, content, recorder


def build_critics(cfg: ModelConfig, tokenizer: CharsetTokenizer, num_writers: int) -> dict[str, nn.Module]:
    from .critics import Discriminator, TextRecognizer, WriterClassifier

    return {
        "discriminator": Discriminator(cfg.critic_channels),
        "recognizer": TextRecognizer(tokenizer.num_classes, cfg.critic_channels, cfg.tr_hidden),
        "writer_classifier": WriterClassifier(num_writers, cfg.critic_channels),
    }


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


__all__ = ["Generator", "ModelConfig", "build_critics", "generate", "style_tensor", "count_parameters"]
