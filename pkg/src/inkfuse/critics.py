"""Discriminator, text recognizer and writer classifier, with their losses.

All three networks take ``(B, 1, 32, W)`` images in [-1, 1] plus the true
width of each item, so ragged batches padded with white behave like the
items processed one by one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .corpus import WORD_HEIGHT, CharsetTokenizer

TR_WIDTH_STRIDE = 4


class CriticInputError(ValueError):
    pass


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def _nonempty(x: torch.Tensor, name: str) -> torch.Tensor:
    x = torch.as_tensor(x)
    if x.numel() == 0:
        raise ValueError(f"{name} is empty")
    return x


def hinge_generator_loss(d_fake: torch.Tensor) -> torch.Tensor:
    """Mean of the negated discriminator scores on generated images."""
    return -_nonempty(d_fake, "d_fake").mean()


def hinge_discriminator_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    d_real = _nonempty(d_real, "d_real")
    d_fake = _nonempty(d_fake, "d_fake")
    return F.relu(1.0 - d_real).mean() + F.relu(1.0 + d_fake).mean()


def ctc_min_frames(target: Sequence[int]) -> int:
    """Fewest frames that can emit ``target``: one per symbol plus a blank between repeats."""
    target = [int(t) for t in target]
    return len(target) + sum(1 for a, b in zip(target, target[1:]) if a == b)


def ctc_loss(
    logits: torch.Tensor,
    targets: Sequence[Sequence[int]],
    input_lengths: Sequence[int],
    blank: int = CharsetTokenizer.blank_index,
) -> torch.Tensor:
    """Mean over the batch of the CTC negative log-likelihood.

    ``logits`` is ``(T, B, C)`` (unnormalized); ``targets`` is a list of id
    lists.  The per-item loss is not divided by target length.
    """
    t_steps, b, _ = logits.shape
    if len(targets) != b or len(input_lengths) != b:
        raise ValueError("targets and input_lengths must have one entry per batch item")
    for tgt, n in zip(targets, input_lengths):
        if not len(tgt):
            raise ValueError("empty CTC target")
        if n > t_steps:
            raise ValueError(f"input length {n} exceeds {t_steps} frames")
        need = ctc_min_frames(tgt)
        if need > n:
            raise ValueError(f"target of length {len(tgt)} needs {need} frames, only {n} available")
    log_probs = F.log_softmax(logits, dim=-1)
    flat = torch.tensor([int(t) for tgt in targets for t in tgt], dtype=torch.long)
    target_lengths = torch.tensor([len(t) for t in targets], dtype=torch.long)
    per_item = F.ctc_loss(
        log_probs, flat, torch.as_tensor(list(input_lengths), dtype=torch.long), target_lengths,
        blank=blank, reduction="none", zero_infinity=False,
    )
    return per_item.mean()


def writer_ce_loss(logits: torch.Tensor, labels) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    logits = torch.as_tensor(logits)
    if logits.ndim == 1:
        logits = logits[None, :]
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[-1]):
        raise ValueError(f"writer label out of range [0, {logits.shape[-1]})")
    return F.cross_entropy(logits, labels)


def greedy_decode(logits: torch.Tensor, input_lengths: Sequence[int], tokenizer: CharsetTokenizer) -> list[str]:
    """Best-path decoding: argmax per frame, collapse repeats, drop blanks."""
    best = logits.argmax(dim=-1).t().tolist()  # (B, T)
    out = []
    for seq, n in zip(best, input_lengths):
        ids, prev = [], None
        for i in seq[:n]:
            if i != prev and i != tokenizer.blank_index:
                ids.append(i)
            prev = i
        out.append(tokenizer.decode(ids))
    return out


# --------------------------------------------------------------------------
# networks
# --------------------------------------------------------------------------


def check_images(images: torch.Tensor):
    if images.ndim != 4 or images.shape[1] != 1 or images.shape[2] != WORD_HEIGHT:
        raise CriticInputError(f"expected (B, 1, {WORD_HEIGHT}, W) images, got {tuple(images.shape)}")


def _widths(images: torch.Tensor, widths) -> torch.Tensor:
    if widths is None:
        return torch.full((images.shape[0],), images.shape[-1], dtype=torch.long)
    return torch.as_tensor(widths, dtype=torch.long)


class ConvTrunk(nn.Module):
    """Four stride-2 conv stages followed by masked global average pooling."""

    def __init__(self, channels: int = 64):
        super().__init__()
        c = channels
        layers, cin = [], 1
        for cout in (c // 2, c, c, c):
            layers += [nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            layers += [nn.Conv2d(cout, cout, 3, padding=1), nn.LeakyReLU(0.2)]
            cin = cout
        self.net = nn.Sequential(*layers)
        self.out_dim = c

    def forward(self, images: torch.Tensor, widths=None) -> torch.Tensor:
        check_images(images)
        feats = self.net(images)  # (B, C, 2, ceil(W/16))
        valid = (_widths(images, widths) + 15) // 16
        cols = torch.arange(feats.shape[-1])[None, :] < valid[:, None]
        mask = cols[:, None, None, :].to(feats.dtype)
        return (feats * mask).sum(dim=(2, 3)) / (mask.sum(dim=(2, 3)) * feats.shape[2])


class Discriminator(nn.Module):
    def __init__(self, channels: int = 64):
        super().__init__()
        self.trunk = ConvTrunk(channels)
        self.head = nn.Linear(self.trunk.out_dim, 1)

    def forward(self, images, widths=None) -> torch.Tensor:
        return self.head(self.trunk(images, widths)).squeeze(-1)


class WriterClassifier(nn.Module):
    def __init__(self, num_writers: int, channels: int = 64):
        super().__init__()
        self.num_writers = num_writers
        self.trunk = ConvTrunk(channels)
        self.head = nn.Linear(self.trunk.out_dim, num_writers)

    def features(self, images, widths=None) -> torch.Tensor:
        return self.trunk(images, widths)

    def forward(self, images, widths=None) -> torch.Tensor:
        return self.head(self.trunk(images, widths))


class TextRecognizer(nn.Module):
    """CRNN: conv features (width stride 4) -> BiLSTM -> per-frame charset+blank logits."""

    def __init__(self, num_classes: int, channels: int = 64, hidden: int = 128):
        super().__init__()
        c = channels

        def block(cin, cout, pool):
            return [nn.Conv2d(cin, cout, 3, padding=1), nn.LeakyReLU(0.2), nn.MaxPool2d(pool)]

        self.features = nn.Sequential(
            *block(1, c // 2, (2, 2)),
            *block(c // 2, c, (2, 2)),
            *block(c, c, (2, 1)),
            *block(c, c, (2, 1)),
        )  # (B, c, 2, W/4)
        self.rnn = nn.LSTM(2 * c, hidden, bidirectional=True)
        self.classifier = nn.Linear(2 * hidden, num_classes)

    @staticmethod
    def frames(width: int) -> int:
        return int(width) // TR_WIDTH_STRIDE

    def forward(self, images, widths=None) -> tuple[torch.Tensor, list[int]]:
        """Returns ``(T, B, C)`` logits and per-item frame counts."""
        check_images(images)
        pad = (-images.shape[-1]) % TR_WIDTH_STRIDE
        if pad:
            images = F.pad(images, (0, pad), value=1.0)
        w = _widths(images, widths)
        lengths = [max(1, -(-int(x) // TR_WIDTH_STRIDE)) for x in w]
        feats = self.features(images)
        seq = feats.flatten(1, 2).permute(2, 0, 1)  # (T, B, 2c)
        packed = pack_padded_sequence(seq, torch.tensor(lengths), enforce_sorted=False)
        out, _ = self.rnn(packed)
        out, _ = pad_packed_sequence(out, total_length=seq.shape[0])
        return self.classifier(out), lengths


@dataclass
class CriticScores:
    d_real: torch.Tensor
    d_fake: torch.Tensor
    tr_loss: torch.Tensor
    wcn_logits: torch.Tensor


def discriminate(net: Discriminator, images, widths=None):
    return net(images, widths)


def recognize(net: TextRecognizer, images, widths=None):
    return net(images, widths)


def classify_writer(net: WriterClassifier, images, widths=None):
    return net(images, widths)


def pad_batch(images: Sequence, multiple: int = TR_WIDTH_STRIDE) -> tuple[torch.Tensor, list[int]]:
    """Stack uint8 ``(32, W_i)`` arrays into a white-padded ``(B, 1, 32, W)`` tensor in [-1, 1]."""
    widths = [int(im.shape[-1]) for im in images]
    w = max(widths)
    w += (-w) % multiple
    batch = torch.ones(len(images), 1, WORD_HEIGHT, w)
    for i, im in enumerate(images):
        t = torch.from_numpy(np.array(im, dtype=np.float32)) / 127.5 - 1.0
        batch[i, 0, :, : t.shape[-1]] = t
    return batch, widths


def recognizer_decode(net: TextRecognizer, images: Sequence, tokenizer: CharsetTokenizer,
                      batch_size: int = 32) -> list[str]:
    """Greedy transcriptions of uint8 word images."""
    out: list[str] = []
    net.eval()
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            batch, widths = pad_batch(images[i : i + batch_size])
            logits, lengths = net(batch, widths)
            out.extend(greedy_decode(logits, lengths, tokenizer))
    return out


__all__ = [
    "CriticScores",
    "Discriminator",
    "TextRecognizer",
    "WriterClassifier",
    "classify_writer",
    "ctc_loss",
    "discriminate",
    "greedy_decode",
    "hinge_discriminator_loss",
    "hinge_generator_loss",
    "pad_batch",
    "recognize",
    "recognizer_decode",
    "writer_ce_loss",
]
