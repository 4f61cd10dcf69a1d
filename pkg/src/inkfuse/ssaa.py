"""Salient stroke attention analysis.

Projects the decoder's final-layer cross-attention back onto the ink of the
style images:

1. average the ``(H, K, L)`` attention over heads and characters;
2. split the length-``L`` vector per style image, reshape to the patch grid,
   upsample bilinearly to 224 x 224 and min-max normalize;
3. mask with an Otsu + median-filtered ink mask;
4. threshold at a percentile of the nonzero masked values and keep the
   strongest 8-connected components;
5. draw semi-transparent highlights over the style images.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw, ImageFont
from scipy import ndimage

from .corpus import NUM_STYLE_IMAGES, STYLE_SIZE
from .style_encoder import PatchProvenance

logger = logging.getLogger(__name__)

HIGHLIGHT = (255, 40, 0)


@dataclass(frozen=True)
class SSAAConfig:
    percentile: float = 90.0
    min_area: int = 20
    top_k: int = 5
    alpha: float = 0.45
    median_size: int = 3
    image_size: int = STYLE_SIZE


@dataclass
class WordAttentionVector:
    a_word: np.ndarray  # (L,)
    word: str
    provenance: PatchProvenance


@dataclass
class InkMask:
    mask: np.ndarray  # uint8 0/1, (224, 224)
    threshold: Optional[int]
    median_size: int


@dataclass
class SalientStroke:
    pixels: np.ndarray  # (n, 2) row, col
    bbox: tuple[int, int, int, int]  # row0, col0, row1, col1 (exclusive)
    mean_attention: float

    @property
    def area(self) -> int:
        return len(self.pixels)


@dataclass
class SalientStrokeSet:
    strokes: list[SalientStroke]
    threshold: Optional[float]
    percentile: float

    def __len__(self) -> int:
        return len(self.strokes)

    def __iter__(self):
        return iter(self.strokes)


# --------------------------------------------------------------------------
# stage 1-2
# --------------------------------------------------------------------------


def average_attention(A, word: str = "", provenance: PatchProvenance | None = None) -> WordAttentionVector:
    """``a_word[l] = mean over heads h and characters k of A[h, k, l]``."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 3:
        raise ValueError(f"attention must be (H, K, L), got shape {A.shape}")
    if not np.isfinite(A).all():
        raise ValueError("attention tensor contains NaN or inf")
    a_word = A.mean(axis=(0, 1))
    if provenance is None:
        provenance = PatchProvenance(NUM_STYLE_IMAGES, 14)
    return WordAttentionVector(a_word, word, provenance)


def upsample_bilinear(grid: np.ndarray, size: int) -> np.ndarray:
    """Half-pixel-centred bilinear upsampling of a square grid, edges clamped."""
    t = torch.as_tensor(np.asarray(grid, dtype=np.float64))[None, None]
    return F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)[0, 0].numpy()


def reconstruct_maps(a_word, provenance: PatchProvenance | None = None,
                     image_size: int = STYLE_SIZE) -> np.ndarray:
    """``(N, image_size, image_size)`` maps in [0, 1], one per style image.

    A constant map carries no signal and becomes all zeros.
    """
    vec = a_word.a_word if isinstance(a_word, WordAttentionVector) else np.asarray(a_word, np.float64)
    if provenance is None:
        provenance = a_word.provenance if isinstance(a_word, WordAttentionVector) else PatchProvenance()
    if vec.ndim != 1 or len(vec) != len(provenance):
        raise ValueError(f"attention vector length {vec.shape} does not match provenance length {len(provenance)}")
    n, g = provenance.num_images, provenance.grid
    maps = []
    for i, grid in enumerate(vec.reshape(n, g, g)):
        up = upsample_bilinear(grid, image_size)
        lo, hi = up.min(), up.max()
        if hi - lo <= 0:
            warnings.warn(f"attention map of style image {i} is constant; using zeros", stacklevel=2)
            maps.append(np.zeros_like(up))
        else:
            maps.append((up - lo) / (hi - lo))
    return np.stack(maps)


# --------------------------------------------------------------------------
# stage 3
# --------------------------------------------------------------------------


def to_gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim == 2:
        return image.astype(np.uint8)
    return np.asarray(Image.fromarray(image.astype(np.uint8)).convert("L"), dtype=np.uint8)


def otsu_threshold(gray: np.ndarray) -> Optional[int]:
    """Threshold ``t`` maximizing between-class variance of ``{v <= t}`` vs ``{v > t}``.

    Among tied maxima (runs of empty bins) the middle of the first run is
    returned.  ``None`` when the image has a single intensity.
    """
    hist = np.bincount(np.asarray(gray, dtype=np.uint8).ravel(), minlength=256).astype(np.float64)
    return otsu_from_histogram(hist)


def otsu_from_histogram(hist) -> Optional[int]:
    hist = np.asarray(hist, dtype=np.float64)
    p = hist / hist.sum()
    levels = np.arange(len(p), dtype=np.float64)
    omega = np.cumsum(p)
    mu = np.cumsum(p * levels)
    mu_total = mu[-1]
    denom = omega * (1.0 - omega)
    valid = denom > 1e-15
    if not valid.any():
        return None
    between = np.full(len(p), -np.inf)
    between[valid] = (mu_total * omega[valid] - mu[valid]) ** 2 / denom[valid]
    best = between.max()
    first = int(np.argmax(between))
    last = first
    while last + 1 < len(between) and between[last + 1] == best:
        last += 1
    return (first + last) // 2


def ink_mask(style_image: np.ndarray, median_size: int = 3) -> InkMask:
    """Dark-class Otsu mask of a style image, cleaned with a median filter."""
    gray = to_gray(style_image)
    if gray.shape != (STYLE_SIZE, STYLE_SIZE):
        raise ValueError(f"style image must be {STYLE_SIZE}x{STYLE_SIZE}, got {gray.shape}")
    t = otsu_threshold(gray)
    if t is None:
        warnings.warn("blank style image: ink mask is empty", stacklevel=2)
        return InkMask(np.zeros(gray.shape, np.uint8), None, median_size)
    binary = (gray <= t).astype(np.uint8)
    cleaned = ndimage.median_filter(binary, size=median_size, mode="constant", cval=0)
    return InkMask(cleaned.astype(np.uint8), t, median_size)


def masked_attention(attention_map: np.ndarray, mask) -> np.ndarray:
    m = mask.mask if isinstance(mask, InkMask) else np.asarray(mask)
    attention_map = np.asarray(attention_map)
    if attention_map.shape != m.shape:
        raise ValueError(f"map {attention_map.shape} and mask {m.shape} differ in shape")
    return attention_map * m


# --------------------------------------------------------------------------
# stage 4
# --------------------------------------------------------------------------

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


def label_components(binary: np.ndarray) -> tuple[np.ndarray, int]:
    return ndimage.label(np.asarray(binary, dtype=bool), structure=EIGHT_CONNECTED)


def salient_strokes(mai_map: np.ndarray, percentile: float = 90.0, min_area: int = 20,
                    top_k: int = 5) -> SalientStrokeSet:
    """Strongest 8-connected regions of ``mai_map >= percentile(nonzero values)``.

    Regions smaller than ``min_area`` are dropped; the rest are ranked by mean
    attention (ties: larger area first) and the first ``top_k`` kept.
    """
    mai_map = np.asarray(mai_map, dtype=np.float64)
    nonzero = mai_map[mai_map > 0]
    if nonzero.size == 0:
        return SalientStrokeSet([], None, percentile)
    thr = float(np.percentile(nonzero, percentile))
    labels, count = label_components((mai_map >= thr) & (mai_map > 0))
    strokes = []
    for idx, sl in enumerate(ndimage.find_objects(labels), 1):
        if sl is None:
            continue
        local = labels[sl] == idx
        area = int(local.sum())
        if area < min_area:
            continue
        rows, cols = np.nonzero(local)
        rows, cols = rows + sl[0].start, cols + sl[1].start
        mean = float(mai_map[rows, cols].mean())
        bbox = (sl[0].start, sl[1].start, sl[0].stop, sl[1].stop)
        strokes.append(SalientStroke(np.stack([rows, cols], axis=1), bbox, mean))
    strokes.sort(key=lambda s: (-s.mean_attention, -s.area, s.bbox))
    return SalientStrokeSet(strokes[:top_k], thr, percentile)


# --------------------------------------------------------------------------
# stage 5
# --------------------------------------------------------------------------

GRID_GAP = 8
CAPTION_HEIGHT = 28


def blend(pixels: np.ndarray, color=HIGHLIGHT, alpha: float = 0.45) -> np.ndarray:
    """``(1 - alpha) * pixels + alpha * color``, rounded to uint8."""
    out = (1.0 - alpha) * pixels.astype(np.float64) + alpha * np.asarray(color, np.float64)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def highlight_strokes(image: np.ndarray, strokes: SalientStrokeSet, alpha: float = 0.45,
                      color=HIGHLIGHT) -> np.ndarray:
    out = np.array(image, dtype=np.uint8, copy=True)
    if out.ndim == 2:
        out = np.repeat(out[:, :, None], 3, axis=2)
    for s in strokes:
        r, c = s.pixels[:, 0], s.pixels[:, 1]
        out[r, c] = blend(out[r, c], color, alpha)
    return out


def compose_grid(images: Sequence[np.ndarray], caption: str) -> np.ndarray:
    """Images side by side on white with ``caption`` in a strip above them."""
    size = images[0].shape[0]
    n = len(images)
    width = n * size + (n + 1) * GRID_GAP
    height = CAPTION_HEIGHT + size + GRID_GAP
    canvas = Image.new("RGB", (width, height), (255, 255, 255))
    ImageDraw.Draw(canvas).text((GRID_GAP, 4), caption, fill=(0, 0, 0), font=ImageFont.load_default(size=18))
    grid = np.array(canvas)
    for i, im in enumerate(images):
        im = np.asarray(im, dtype=np.uint8)
        if im.ndim == 2:
            im = np.repeat(im[:, :, None], 3, axis=2)
        x = GRID_GAP + i * (size + GRID_GAP)
        grid[CAPTION_HEIGHT : CAPTION_HEIGHT + size, x : x + size] = im
    return grid


def grid_origin(index: int, size: int = STYLE_SIZE) -> tuple[int, int]:
    """Top-left (row, col) of style image ``index`` inside the rendered grid."""
    return CAPTION_HEIGHT, GRID_GAP + index * (size + GRID_GAP)


def render_grid(style_images: Sequence[np.ndarray], stroke_sets: Sequence[SalientStrokeSet], word: str,
                alpha: float = 0.45, color=HIGHLIGHT) -> np.ndarray:
    if len(style_images) != len(stroke_sets):
        raise ValueError(f"{len(style_images)} style images but {len(stroke_sets)} stroke sets")
    annotated = [highlight_strokes(im, st, alpha, color) for im, st in zip(style_images, stroke_sets)]
    return compose_grid(annotated, f"generated: {word}")


# --------------------------------------------------------------------------
# full pipeline
# --------------------------------------------------------------------------


@dataclass
class SSAAResult:
    word: str
    a_word: np.ndarray
    maps: np.ndarray  # (N, 224, 224)
    masks: list[InkMask]
    mai: np.ndarray  # (N, 224, 224)
    strokes: list[SalientStrokeSet]
    grid: np.ndarray  # uint8 RGB

    def stroke_rows(self) -> list[dict]:
        rows = []
        for i, st in enumerate(self.strokes):
            for rank, s in enumerate(st):
                rows.append({"image": i, "rank": rank, "area": s.area, "mean_attention": f"{s.mean_attention:.6f}",
                             "row0": s.bbox[0], "col0": s.bbox[1], "row1": s.bbox[2], "col1": s.bbox[3],
                             "threshold": f"{st.threshold:.6f}"})
        return rows


def run_ssaa(A, style_images: Sequence[np.ndarray], word: str, cfg: SSAAConfig | None = None,
             provenance: PatchProvenance | None = None) -> SSAAResult:
    """All five stages for one word: ``A`` is ``(H, K, L)``, images are 224 x 224 RGB."""
    cfg = cfg or SSAAConfig()
    vec = average_attention(A, word, provenance)
    if len(style_images) != vec.provenance.num_images:
        raise ValueError(f"expected {vec.provenance.num_images} style images, got {len(style_images)}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        maps = reconstruct_maps(vec, image_size=cfg.image_size)
        masks = [ink_mask(im, cfg.median_size) for im in style_images]
    mai = np.stack([masked_attention(m, k) for m, k in zip(maps, masks)])
    strokes = [salient_strokes(m, cfg.percentile, cfg.min_area, cfg.top_k) for m in mai]
    grid = render_grid(style_images, strokes, word, cfg.alpha)
    return SSAAResult(word, vec.a_word, maps, masks, mai, strokes, grid)


# --------------------------------------------------------------------------
# tensor container
# --------------------------------------------------------------------------

CONTAINER_MANIFEST = "manifest.json"


def save_tensors(directory: str | Path, tensors: dict, **meta) -> Path:
    """Write each array as little-endian float32 ``<name>.f32`` plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4")
        fname = f"{name}.f32"
        (directory / fname).write_bytes(np.ascontiguousarray(arr).tobytes())
        entries.append({"name": name, "file": fname, "shape": list(arr.shape), "dtype": "float32"})
    manifest = {"byte_order": "little", "tensors": entries, **meta}
    path = directory / CONTAINER_MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_tensors(directory: str | Path) -> tuple[dict, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / CONTAINER_MANIFEST).read_text(encoding="utf-8"))
    if manifest.get("byte_order") != "little":
        raise ValueError("only little-endian containers are supported")
    tensors = {}
    for e in manifest["tensors"]:
        if e["dtype"] != "float32":
            raise ValueError(f"unsupported element type {e['dtype']}")
        data = np.frombuffer((directory / e["file"]).read_bytes(), dtype="<f4")
        tensors[e["name"]] = data.reshape(e["shape"])
    meta = {k: v for k, v in manifest.items() if k not in ("tensors", "byte_order")}
    return tensors, meta


def save_attention(directory: str | Path, A: np.ndarray, word: str, provenance: PatchProvenance,
                   layer: int = -1, **extra) -> Path:
    return save_tensors(
        directory, {"attention": A, **extra}, word=word, layer=layer,
        provenance={"num_images": provenance.num_images, "grid": provenance.grid,
                    "columns": ["image_index", "patch_row", "patch_col"], "table": provenance.table()},
    )


def load_attention(directory: str | Path) -> tuple[np.ndarray, str, PatchProvenance]:
    tensors, meta = load_tensors(directory)
    prov = meta["provenance"]
    return tensors["attention"], meta["word"], PatchProvenance(prov["num_images"], prov["grid"])
