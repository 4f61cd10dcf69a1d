"""Style-content fusion: a pre-norm transformer decoder whose queries are characters
and whose cross-attention keys/values are the Style Memory.

Cross-attention weights can be recorded per layer for attention analysis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .style_encoder import PatchProvenance


def scaled_dot_product(q, k, v, scale_dim: int, key_padding_mask=None):
    """``softmax(q k^T / sqrt(scale_dim)) v`` over the last two axes.

    Returns ``(output, weights)``.  ``key_padding_mask`` is ``(B, L)`` with
    True marking keys to ignore; it broadcasts over any head axis.
    """
    logits = q @ k.transpose(-1, -2) / math.sqrt(scale_dim)
    if key_padding_mask is not None:
        mask = key_padding_mask.view(key_padding_mask.shape[0], *([1] * (logits.ndim - 2)), -1)
        logits = logits.masked_fill(mask, float("-inf"))
    weights = torch.softmax(logits, dim=-1)
    return weights @ v, weights


class MultiHeadAttention(nn.Module):
    """Multi-head attention on sequence-first tensors.

    ``scale_by="model"`` divides logits by sqrt(d_model) in every head;
    ``"head"`` uses the usual sqrt(d_model / heads).
    """

    def __init__(self, d_model: int, heads: int, dropout: float = 0.0, scale_by: str = "model"):
        super().__init__()
        if d_model % heads:
            raise ValueError("d_model must be divisible by heads")
        if scale_by not in ("model", "head"):
            raise ValueError("scale_by must be 'model' or 'head'")
        self.d_model, self.heads = d_model, heads
        self.head_dim = d_model // heads
        self.scale_dim = d_model if scale_by == "model" else self.head_dim
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        n, b, _ = x.shape
        return x.reshape(n, b, self.heads, self.head_dim).permute(1, 2, 0, 3)  # (B, H, N, hd)

    def forward(self, query, key, value, key_padding_mask=None):
        """Returns output ``(K, B, D)`` and weights ``(B, H, K, L)`` (pre-dropout)."""
        if query.shape[-1] != self.d_model or key.shape[-1] != self.d_model:
            raise ValueError(
                f"feature dims must equal d_model={self.d_model}: query {query.shape[-1]}, key {key.shape[-1]}"
            )
        q, k, v = self._split(self.q_proj(query)), self._split(self.k_proj(key)), self._split(self.v_proj(value))
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.scale_dim)
        if key_padding_mask is not None:
            logits = logits.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
        weights = torch.softmax(logits, dim=-1)
        out = self.dropout(weights) @ v  # (B, H, K, hd)
        out = out.permute(2, 0, 1, 3).reshape(query.shape[0], query.shape[1], self.d_model)
        return self.out_proj(out), weights


class DecoderLayer(nn.Module):
    """Pre-norm: self-attention, cross-attention to memory, feed-forward; no causal mask."""

    def __init__(self, d_model: int = 512, heads: int = 8, ff_dim: int = 2048, dropout: float = 0.1,
                 scale_by: str = "model"):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, heads, dropout, scale_by)
        self.norm2 = nn.LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, heads, dropout, scale_by)
        self.norm3 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(nn.Linear(d_model, ff_dim), nn.ReLU(), nn.Dropout(dropout), nn.Linear(ff_dim, d_model))
        self.drop = nn.Dropout(dropout)

    def forward(self, x, memory, query_padding_mask=None):
        h = self.norm1(x)
        x = x + self.drop(self.self_attn(h, h, h, key_padding_mask=query_padding_mask)[0])
        attn_out, cross = self.cross_attn(self.norm2(x), memory, memory)
        x = x + self.drop(attn_out)
        x = x + self.drop(self.ff(self.norm3(x)))
        return x, cross


@dataclass
class AttentionRecord:
    """Cross-attention of one decoder layer for a batch.

    ``weights`` is ``(B, H, K, L)``; item ``i`` is valid up to ``lengths[i]`` queries.
    """

    weights: torch.Tensor
    lengths: list[int]
    layer: int
    texts: list[str] = field(default_factory=list)
    provenance: Optional[PatchProvenance] = None

    def item(self, i: int) -> np.ndarray:
        """``(H, K_i, L)`` array for batch item ``i`` without padded queries."""
        return self.weights[i, :, : self.lengths[i], :].detach().cpu().numpy()

    @property
    def shape(self):
        return tuple(self.weights.shape)


class AttentionRecorder:
    """Holds the cross-attention weights of the last recorded forward pass."""

    def __init__(self, num_layers: int):
        self.num_layers = num_layers
        self.layers: list[torch.Tensor] = []
        self.lengths: list[int] = []
        self.texts: list[str] = []
        self.provenance: Optional[PatchProvenance] = None

    def reset(self):
        self.layers = []

    def attention_of_layer(self, layer_index: int = -1) -> AttentionRecord:
        if not self.layers:
            raise RuntimeError("no attention recorded: run a forward pass with record_attention=True")
        idx = layer_index if layer_index >= 0 else self.num_layers + layer_index
        if not 0 <= idx < self.num_layers:
            raise IndexError(f"layer index {layer_index} out of range for {self.num_layers} layers")
        return AttentionRecord(self.layers[idx], list(self.lengths), idx, list(self.texts), self.provenance)


class FusionCore(nn.Module):
    def __init__(self, d_model: int = 512, heads: int = 8, num_layers: int = 3, ff_dim: int = 2048,
                 dropout: float = 0.1, scale_by: str = "model"):
        super().__init__()
        self.d_model, self.heads, self.num_layers = d_model, heads, num_layers
        self.layers = nn.ModuleList(
            DecoderLayer(d_model, heads, ff_dim, dropout, scale_by) for _ in range(num_layers)
        )
        self.norm = nn.LayerNorm(d_model)
        self.last_record: Optional[AttentionRecorder] = None

    def forward(self, query, memory, query_padding_mask=None, recorder: Optional[AttentionRecorder] = None):
        """``(K, B, D)`` queries and ``(L, B, D)`` memory -> fused ``(K, B, D)``."""
        if query.shape[-1] != self.d_model or memory.shape[-1] != self.d_model:
            raise ValueError(
                f"query dim {query.shape[-1]} and memory dim {memory.shape[-1]} must both be {self.d_model}"
            )
        if query.shape[1] != memory.shape[1]:
            raise ValueError(f"batch mismatch: query {query.shape[1]} vs memory {memory.shape[1]}")
        if recorder is not None:
            recorder.reset()
        x = query
        for layer in self.layers:
            x, cross = layer(x, memory, query_padding_mask)
            if recorder is not None:
                recorder.layers.append(cross.detach())
        return self.norm(x)

    def fuse(self, content, memory, record_attention: bool = False, provenance=None):
        """Fuse a :class:`ContentQuery` with memory; returns ``(fused, recorder or None)``."""
        recorder = AttentionRecorder(self.num_layers) if record_attention else None
        fused = self(content.query, memory, content.padding_mask, recorder)
        if recorder is not None:
            recorder.lengths = list(content.lengths)
            recorder.provenance = provenance
            self.last_record = recorder
        return fused, recorder

    def attention_of_layer(self, layer_index: int = -1) -> AttentionRecord:
        if self.last_record is None:
            raise RuntimeError("attention recording was disabled for the last pass")
        return self.last_record.attention_of_layer(layer_index)
