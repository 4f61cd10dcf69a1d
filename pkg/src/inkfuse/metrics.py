"""FID, KID and character-error-rate metrics over pluggable feature extractors."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

import numpy as np
import torch
import torch.nn as nn

from .critics import pad_batch

logger = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# edit distance / CER
# --------------------------------------------------------------------------


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Unit-cost insert/delete/substitute distance."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def character_error_rate(decoded: Sequence[str], targets: Sequence[str]) -> float:
    if len(decoded) != len(targets):
        raise ValueError("decoded and target lists differ in length")
    total = sum(len(t) for t in targets)
    if total == 0:
        raise ValueError("CER needs at least one target character")
    return sum(levenshtein(d, t) for d, t in zip(decoded, targets)) / total


class Recognizer(Protocol):
    def decode(self, images: Sequence[np.ndarray]) -> list[str]: ...


def delta_cer(generated: Sequence[tuple], reference: Sequence[tuple], recognizer) -> float:
    """``|CER(generated) - CER(reference)|`` for lists of ``(image, text)`` pairs."""
    if not generated or not reference:
        raise ValueError("delta_cer needs non-empty generated and reference lists")
    cer_gen = character_error_rate(recognizer.decode([g[0] for g in generated]), [g[1] for g in generated])
    cer_ref = character_error_rate(recognizer.decode([r[0] for r in reference]), [r[1] for r in reference])
    return abs(cer_gen - cer_ref)


# --------------------------------------------------------------------------
# FID
# --------------------------------------------------------------------------


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_distance(mu_a, sigma_a, mu_b, sigma_b, eps: float = 1e-6) -> float:
    """Frechet distance between Gaussians given means and covariances.

    The cross term uses ``Tr((S_a^1/2 S_b S_a^1/2)^1/2)``, which equals
    ``Tr((S_a S_b)^1/2)`` but stays symmetric.  ``eps * I`` is added to both
    covariances only when one of them is numerically singular.
    """
    mu_a, mu_b = np.atleast_1d(np.asarray(mu_a, np.float64)), np.atleast_1d(np.asarray(mu_b, np.float64))
    sigma_a, sigma_b = np.atleast_2d(np.asarray(sigma_a, np.float64)), np.atleast_2d(np.asarray(sigma_b, np.float64))
    if mu_a.shape != mu_b.shape or sigma_a.shape != sigma_b.shape:
        raise ValueError(f"feature dimension mismatch: {mu_a.shape} vs {mu_b.shape}")
    d = mu_a.shape[0]
    if min(np.linalg.eigvalsh(sigma_a).min(), np.linalg.eigvalsh(sigma_b).min()) < eps * 1e-3:
        sigma_a = sigma_a + eps * np.eye(d)
        sigma_b = sigma_b + eps * np.eye(d)
    root_a = _sqrtm_psd(sigma_a)
    cross = _sqrtm_psd(root_a @ sigma_b @ root_a)
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(sigma_a) + np.trace(sigma_b) - 2.0 * np.trace(cross))
    return max(value, 0.0)


def feature_statistics(features) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(features, np.float64)
    if x.ndim != 2:
        raise ValueError("features must be (n, d)")
    return x.mean(axis=0), np.atleast_2d(np.cov(x, rowvar=False))


def fid(features_a, features_b) -> float:
    a, b = np.asarray(features_a, np.float64), np.asarray(features_b, np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dimension mismatch: {a.shape} vs {b.shape}")
    if min(len(a), len(b)) <= a.shape[1]:
        warnings.warn(f"FID with {min(len(a), len(b))} samples in {a.shape[1]} dims: covariance is rank deficient",
                      stacklevel=2)
    return frechet_distance(*feature_statistics(a), *feature_statistics(b))


# --------------------------------------------------------------------------
# KID
# --------------------------------------------------------------------------


def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    m, n = len(x), len(y)
    kxx, kyy, kxy = polynomial_kernel(x, x), polynomial_kernel(y, y), polynomial_kernel(x, y)
    sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sxx + syy - 2.0 * kxy.mean())


def kid(features_a, features_b, subset_size: int = 100, num_subsets: int = 100, seed: int = 0) -> float:
    """Mean unbiased MMD^2 over random subsets (cubic polynomial kernel).

    ``subset_size`` is clamped to the smaller set size.
    """
    a, b = np.asarray(features_a, np.float64), np.asarray(features_b, np.float64)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    size = min(subset_size, len(a), len(b))
    if size < 2:
        raise ValueError("KID subsets need at least 2 samples")
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(num_subsets):
        ia = rng.choice(len(a), size, replace=False)
        ib = rng.choice(len(b), size, replace=False)
        vals.append(mmd2_unbiased(a[ia], b[ib]))
    return float(np.mean(vals))


# --------------------------------------------------------------------------
# feature extractors
# --------------------------------------------------------------------------


class FeatureExtractor:
    name = "base"
    feature_dim = 0
    deterministic = True

    def __call__(self, images: Sequence[np.ndarray]) -> np.ndarray:
        raise NotImplementedError


class _TorchExtractor(FeatureExtractor):
    def __init__(self, net: Callable, feature_dim: int, batch_size: int = 32):
        self.net = net
        self.feature_dim = feature_dim
        self.batch_size = batch_size

    def __call__(self, images):
        out = []
        with torch.no_grad():
            for i in range(0, len(images), self.batch_size):
                batch, widths = pad_batch(images[i : i + self.batch_size])
                out.append(self.net(batch, widths).double().numpy())
        return np.concatenate(out) if out else np.zeros((0, self.feature_dim))


class WriterTrunkExtractor(_TorchExtractor):
    """Pooled features of a trained writer classifier's convolutional trunk."""

    name = "wcn"

    def __init__(self, writer_classifier):
        writer_classifier.eval()
        super().__init__(writer_classifier.features, writer_classifier.trunk.out_dim)


class RandomConvExtractor(_TorchExtractor):
    """Fixed-seed random convolutional projector for pipeline tests."""

    name = "random-conv"

    def __init__(self, feature_dim: int = 64, seed: int = 0):
        from .critics import ConvTrunk

        gen = torch.Generator().manual_seed(seed)
        trunk = ConvTrunk(feature_dim)
        with torch.no_grad():
            for p in trunk.parameters():
                fan_in = p[0].numel() if p.ndim > 1 else 1
                p.copy_(torch.randn(p.shape, generator=gen) * (fan_in**-0.5 if p.ndim > 1 else 0.0))
        trunk.eval()
        super().__init__(trunk, feature_dim)


class PrecomputedExtractor(FeatureExtractor):
    """Features ingested from a tensor container (``real`` and ``generated`` entries)."""

    name = "file"

    def __init__(self, container: str | Path):
        from .ssaa import load_tensors

        self.tensors, _ = load_tensors(container)
        self.feature_dim = int(self.tensors["real"].shape[1])

    def __call__(self, images):
        raise TypeError("precomputed features are looked up by name, not computed from images")


EXTRACTORS = ("wcn", "random-conv", "file")


def make_extractor(name: str, critics: dict | None = None, path: str | Path | None = None) -> FeatureExtractor:
    if name == "wcn":
        if critics is None:
            raise ValueError("the wcn extractor needs a checkpoint with a writer classifier")
        return WriterTrunkExtractor(critics["writer_classifier"])
    if name == "random-conv":
        return RandomConvExtractor()
    if name == "file":
        if path is None:
            raise ValueError("the file extractor needs --features <container>")
        return PrecomputedExtractor(path)
    raise ValueError(f"unknown extractor {name!r}; available: {', '.join(EXTRACTORS)}")


class NetworkRecognizer:
    """Greedy CTC decoding with a trained text recognizer."""

    name = "tr-greedy"

    def __init__(self, net, tokenizer):
        self.net, self.tokenizer = net, tokenizer

    def decode(self, images):
        from .critics import recognizer_decode

        return recognizer_decode(self.net, list(images), self.tokenizer)


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------


@dataclass
class MetricReport:
    fid: float
    kid: float  # x 1e3
    delta_cer: float
    cer_generated: float
    cer_real: float
    num_generated: int
    num_real: int
    extractor: str
    recognizer: str
    kid_subset_size: int = 100
    kid_num_subsets: int = 100
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def compute_report(real_feats, fake_feats, real_pairs, fake_pairs, recognizer, extractor_name: str,
                   kid_subset_size: int = 100, kid_num_subsets: int = 100, seed: int = 0) -> MetricReport:
    decode = recognizer.decode
    real_dec = decode([p[0] for p in real_pairs])
    fake_dec = decode([p[0] for p in fake_pairs])
    cer_real = character_error_rate(real_dec, [p[1] for p in real_pairs])
    cer_fake = character_error_rate(fake_dec, [p[1] for p in fake_pairs])
    size = min(kid_subset_size, len(real_feats), len(fake_feats))
    return MetricReport(
        fid=fid(real_feats, fake_feats),
        kid=kid(real_feats, fake_feats, size, kid_num_subsets, seed) * 1e3,
        delta_cer=abs(cer_fake - cer_real),
        cer_generated=cer_fake,
        cer_real=cer_real,
        num_generated=len(fake_pairs),
        num_real=len(real_pairs),
        extractor=extractor_name,
        recognizer=getattr(recognizer, "name", type(recognizer).__name__),
        kid_subset_size=size,
        kid_num_subsets=kid_num_subsets,
        extra={"decoded_generated": fake_dec, "decoded_real": real_dec},
    )


def evaluate(checkpoint: str | Path, root: str | Path, split: str = "test", extractor: str = "wcn",
             seed: int = 0, features: str | Path | None = None, kid_subset_size: int = 100,
             kid_num_subsets: int = 100):
    """Generate one image per split sample (its writer's style set, its transcription)
    and compare against the real images.

    Returns the report, the ``(real_image, fake_image, text)`` triples and the
    ``(real, generated)`` feature matrices.
    """
    from .corpus import load_iam_words, sample_style_set
    from .generator import generate
    from .synthesis import export_images
    from .trainer import critics_from_checkpoint, generator_from_checkpoint, load_checkpoint

    if extractor not in EXTRACTORS:
        raise ValueError(f"unknown extractor {extractor!r}; available: {', '.join(EXTRACTORS)}")
    ckpt = load_checkpoint(checkpoint)
    gen = generator_from_checkpoint(ckpt)
    critics = critics_from_checkpoint(ckpt)
    data = load_iam_words(root, split, gen.tokenizer)
    if not len(data):
        raise ValueError(f"split {split!r} of {root} is empty")
    groups = data.by_writer()
    styles = {w: sample_style_set(s, seed=seed + w) for w, s in groups.items()}
    triples = []
    for w in sorted(groups):
        texts = [s.transcription for s in groups[w]]
        images, content, _ = generate(gen, styles[w], texts)
        for s, g in zip(groups[w], export_images(images, texts, content.lengths, w, seed)):
            triples.append((s.image, g.image, s.transcription))
    recognizer = NetworkRecognizer(critics["recognizer"], gen.tokenizer)
    if extractor == "file":
        ext = make_extractor("file", path=features)
        real_feats, fake_feats = ext.tensors["real"], ext.tensors["generated"]
    else:
        ext = make_extractor(extractor, critics)
        real_feats = ext([t[0] for t in triples])
        fake_feats = ext([t[1] for t in triples])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        report = compute_report(real_feats, fake_feats, [(t[0], t[2]) for t in triples],
                                [(t[1], t[2]) for t in triples], recognizer, ext.name,
                                kid_subset_size, kid_num_subsets, seed)
    report.extra["split"] = split
    report.extra["writers"] = len(groups)
    return report, triples, (np.asarray(real_feats), np.asarray(fake_feats))
