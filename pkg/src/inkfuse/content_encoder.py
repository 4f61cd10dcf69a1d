"""Character-token content queries with learnable absolute positions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn

from .corpus import CharsetTokenizer, CorpusError


@dataclass
class ContentQuery:
    query: torch.Tensor  # (K, B, D)
    token_ids: torch.Tensor  # (B, K), 0 = padding
    padding_mask: torch.Tensor  # (B, K), True = padding
    lengths: list[int]

    @property
    def shape(self):
        return tuple(self.query.shape)


def tokenize_batch(
    texts: Sequence[str], tokenizer: CharsetTokenizer, max_length: int = 32
) -> tuple[torch.Tensor, torch.Tensor, list[int]]:
    """Right-padded id matrix, padding mask and true lengths for a batch of words."""
    if not texts:
        raise CorpusError("empty text batch")
    encoded = []
    for t in texts:
        if not t:
            raise CorpusError("empty target text")
        if len(t) > max_length:
            raise CorpusError(f"text {t!r} longer than {max_length} characters")
        encoded.append(tokenizer.encode(t))
    lengths = [len(e) for e in encoded]
    k = max(lengths)
    ids = torch.zeros(len(texts), k, dtype=torch.long)
    for i, e in enumerate(encoded):
        ids[i, : len(e)] = torch.tensor(e, dtype=torch.long)
    mask = torch.arange(k)[None, :] >= torch.tensor(lengths)[:, None]
    return ids, mask, lengths


class ContentEncoder(nn.Module):
    def __init__(self, num_classes: int, d_model: int = 512, max_length: int = 32):
        super().__init__()
        self.max_length = max_length
        self.embed = nn.Embedding(num_classes, d_model, padding_idx=CharsetTokenizer.blank_index)
        self.pos = nn.Parameter(torch.randn(max_length, 1, d_model) * 0.02)

    def forward(self, token_ids: torch.Tensor) -> torch.Tensor:
        """``(B, K)`` ids -> ``(K, B, D)`` queries."""
        k = token_ids.shape[1]
        if k > self.max_length:
            raise ValueError(f"sequence length {k} exceeds max_length {self.max_length}")
        return self.embed(token_ids.t()) + self.pos[:k]

    def encode(self, texts: Sequence[str], tokenizer: CharsetTokenizer) -> ContentQuery:
        ids, mask, lengths = tokenize_batch(texts, tokenizer, self.max_length)
        ids = ids.to(self.pos.device)
        return ContentQuery(self(ids), ids, mask.to(self.pos.device), lengths)


def encode_content(texts: Sequence[str], tokenizer: CharsetTokenizer, encoder: ContentEncoder) -> ContentQuery:
    return encoder.encode(texts, tokenizer)
