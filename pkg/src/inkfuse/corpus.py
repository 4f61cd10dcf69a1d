"""Word-image data model, tokenizer, preprocessing and corpus loaders.

Images are kept as ``uint8`` numpy arrays with white = 255 (dark ink on a
light page).  Word images are always 32 px high; style images are padded,
never resized, onto a white 224 x 224 canvas.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image, ImageDraw, ImageFont
from scipy import ndimage

logger = logging.getLogger(__name__)

WORD_HEIGHT = 32
STYLE_SIZE = 224
NUM_STYLE_IMAGES = 5
WHITE = 255

MANIFEST_NAME = "manifest.tsv"
MANIFEST_COLUMNS = ("relative_path", "transcription", "writer_key", "split")


class CorpusError(ValueError):
    """Raised for malformed datasets or inputs that violate corpus contracts."""


class OversizeError(CorpusError):
    """A word image does not fit the style canvas without cropping."""


class CharsetError(CorpusError):
    """Text contains a character outside the tokenizer's symbol set."""

    def __init__(self, char: str, text: str):
        super().__init__(f"character {char!r} in {text!r} is not in the charset")
        self.char = char
        self.text = text


# --------------------------------------------------------------------------
# tokenizer
# --------------------------------------------------------------------------

DEFAULT_SYMBOLS = "".join(chr(c) for c in range(32, 127))  # 95 printable ASCII


class CharsetTokenizer:
    """Bijection between characters and integer ids, with id 0 reserved for the CTC blank."""

    blank_index = 0

    def __init__(self, symbols: str = DEFAULT_SYMBOLS):
        if len(set(symbols)) != len(symbols):
            raise CorpusError("charset symbols must be unique")
        self.symbols = str(symbols)
        self._index = {c: i + 1 for i, c in enumerate(self.symbols)}

    def __len__(self) -> int:
        return len(self.symbols)

    @property
    def num_classes(self) -> int:
        """Symbols plus the blank."""
        return len(self.symbols) + 1

    def __contains__(self, char: str) -> bool:
        return char in self._index

    def __eq__(self, other) -> bool:
        return isinstance(other, CharsetTokenizer) and other.symbols == self.symbols

    def __hash__(self) -> int:
        return hash(self.symbols)

    def validate(self, text: str) -> None:
        for c in text:
            if c not in self._index:
                raise CharsetError(c, text)

    def encode(self, text: str) -> list[int]:
        self.validate(text)
        return [self._index[c] for c in text]

    def decode(self, ids: Sequence[int]) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == self.blank_index or not 0 < i <= len(self.symbols):
                raise CorpusError(f"id {i} is not a printable symbol id")
            out.append(self.symbols[i - 1])
        return "".join(out)


# --------------------------------------------------------------------------
# data model
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class WordSample:
    image: np.ndarray  # uint8, (32, W)
    transcription: str
    writer: int

    def __post_init__(self):
        if self.image.ndim != 2 or self.image.shape[0] != WORD_HEIGHT:
            raise CorpusError(f"word image must be ({WORD_HEIGHT}, W), got {self.image.shape}")
        if not self.transcription:
            raise CorpusError("transcription must be non-empty")
        self.image.setflags(write=False)


@dataclass(frozen=True)
class StyleSampleSet:
    images: np.ndarray  # uint8, (5, 224, 224, 3)
    writer: int
    indices: tuple[int, ...] = ()

    def __post_init__(self):
        if self.images.shape != (NUM_STYLE_IMAGES, STYLE_SIZE, STYLE_SIZE, 3):
            raise CorpusError(f"style set must have shape (5, 224, 224, 3), got {self.images.shape}")
        self.images.setflags(write=False)


@dataclass
class WordDataset:
    """Samples loaded from one split of a manifest, plus load bookkeeping."""

    samples: list[WordSample]
    writer_keys: list[str] = field(default_factory=list)
    split: str = "train"
    skipped: int = 0
    rejected: int = 0

    def __iter__(self) -> Iterator[WordSample]:
        return iter(self.samples)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def num_writers(self) -> int:
        return len(self.writer_keys) if self.writer_keys else len({s.writer for s in self.samples})

    def by_writer(self) -> dict[int, list[WordSample]]:
        groups: dict[int, list[WordSample]] = {}
        for s in self.samples:
            groups.setdefault(s.writer, []).append(s)
        return groups


# --------------------------------------------------------------------------
# preprocessing
# --------------------------------------------------------------------------


def to_word_height(image: np.ndarray, height: int = WORD_HEIGHT) -> np.ndarray:
    """Aspect-preserving resize of a grayscale raster to a fixed height."""
    image = np.asarray(image)
    if image.ndim == 3:
        image = np.asarray(Image.fromarray(image.astype(np.uint8)).convert("L"))
    if image.shape[0] == height:
        return image.astype(np.uint8)
    width = max(1, round(image.shape[1] * height / image.shape[0]))
    pil = Image.fromarray(image.astype(np.uint8)).resize((width, height), Image.BILINEAR)
    return np.asarray(pil, dtype=np.uint8)


def preprocess_style_image(raw: np.ndarray, target: int = STYLE_SIZE) -> np.ndarray:
    """Paste a word image top-left onto a white ``target`` x ``target`` canvas.

    The result has three identical channels.  Nothing is resized or cropped;
    an image that does not fit raises :class:`OversizeError`.
    """
    raw = np.asarray(raw)
    if raw.ndim != 2:
        raise CorpusError(f"expected a grayscale raster, got shape {raw.shape}")
    h, w = raw.shape
    if h > target or w > target:
        raise OversizeError(f"word image {h}x{w} does not fit a {target}x{target} canvas")
    canvas = np.full((target, target), WHITE, dtype=np.uint8)
    canvas[:h, :w] = raw
    return np.repeat(canvas[:, :, None], 3, axis=2)


def fits_style_canvas(sample: WordSample, target: int = STYLE_SIZE) -> bool:
    return sample.image.shape[1] <= target


def sample_style_set(
    samples: Sequence[WordSample], n: int = NUM_STYLE_IMAGES, seed: int = 0
) -> StyleSampleSet:
    """Draw ``n`` style images of one writer, with replacement when fewer than ``n`` exist.

    Words too wide for the style canvas are not eligible.
    """
    if not samples:
        raise CorpusError("writer has no word images")
    writers = {s.writer for s in samples}
    if len(writers) != 1:
        raise CorpusError(f"style samples span several writers: {sorted(writers)}")
    eligible = [i for i, s in enumerate(samples) if fits_style_canvas(s)]
    if not eligible:
        raise CorpusError("writer has no word image narrow enough for the style canvas")
    rng = np.random.default_rng(seed)
    replace = len(eligible) < n
    picks = rng.choice(len(eligible), size=n, replace=replace)
    indices = tuple(int(eligible[p]) for p in picks)
    images = np.stack([preprocess_style_image(samples[i].image) for i in indices])
    return StyleSampleSet(images=images, writer=samples[0].writer, indices=indices)


# --------------------------------------------------------------------------
# manifest layout
# --------------------------------------------------------------------------


def _read_manifest(root: Path) -> list[tuple[str, str, str, str]]:
    path = root / MANIFEST_NAME
    if not root.is_dir():
        raise CorpusError(f"dataset root {root} is not a directory")
    if not path.is_file():
        raise CorpusError(f"missing manifest: {path}")
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        for lineno, row in enumerate(reader, 1):
            if not row or (lineno == 1 and tuple(row) == MANIFEST_COLUMNS):
                continue
            if len(row) != 4:
                raise CorpusError(f"{path}:{lineno}: expected 4 tab-separated columns, got {len(row)}")
            rows.append(tuple(row))
    return rows


def load_iam_words(
    root: str | Path, split: str = "train", tokenizer: CharsetTokenizer | None = None
) -> WordDataset:
    """Load one split of a dataset laid out as ``root/manifest.tsv`` plus image files.

    Writer keys of the split are remapped to contiguous ids in sorted key
    order.  Unreadable images are skipped and counted in ``skipped``;
    transcriptions outside the charset are counted in ``rejected``.
    """
    root = Path(root)
    tokenizer = tokenizer or CharsetTokenizer()
    rows = [r for r in _read_manifest(root) if r[3] == split]
    keys = sorted({r[2] for r in rows})
    writer_ids = {k: i for i, k in enumerate(keys)}
    samples, skipped, rejected = [], 0, 0
    for rel, text, key, _ in rows:
        if not text or any(c not in tokenizer for c in text):
            rejected += 1
            continue
        try:
            with Image.open(root / rel) as im:
                image = np.asarray(im.convert("L"), dtype=np.uint8)
        except (OSError, SyntaxError, ValueError) as exc:
            logger.warning("skipping unreadable image %s: %s", rel, exc)
            skipped += 1
            continue
        samples.append(WordSample(to_word_height(image), text, writer_ids[key]))
    logger.info("split %s: %d samples, %d writers, %d skipped, %d rejected",
                split, len(samples), len(keys), skipped, rejected)
    return WordDataset(samples, keys, split, skipped, rejected)


def write_corpus(
    root: str | Path, samples: Sequence[WordSample], splits: Sequence[str] | None = None
) -> Path:
    """Write samples as PNG files plus ``manifest.tsv``; writer keys are ``w###``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    splits = list(splits) if splits is not None else ["train"] * len(samples)
    with open(root / MANIFEST_NAME, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter="\t", quoting=csv.QUOTE_NONE, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for i, (s, split) in enumerate(zip(samples, splits)):
            rel = f"images/{i:06d}.png"
            Image.fromarray(s.image).save(root / rel, optimize=False)
            writer.writerow((rel, s.transcription, f"w{s.writer:03d}", split))
    return root / MANIFEST_NAME


# --------------------------------------------------------------------------
# synthetic glyph corpus
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class WriterStyle:
    shear_deg: float = 0.0  # positive leans the top of strokes to the right
    thickness: int = 1  # square dilation size of the dark strokes, 1 = none
    jitter: float = 0.0  # baseline jitter std-dev in px
    font_size: int = 20

    def __post_init__(self):
        if not -20.0 <= self.shear_deg <= 20.0:
            raise CorpusError("shear must be in [-20, 20] degrees")
        if self.thickness not in (1, 2, 3):
            raise CorpusError("thickness must be 1, 2 or 3")
        if not 0.0 <= self.jitter <= 1.5:
            raise CorpusError("jitter must be in [0, 1.5] px")


def random_writer_styles(num_writers: int, rng: np.random.Generator) -> list[WriterStyle]:
    styles: list[WriterStyle] = []
    while len(styles) < num_writers:
        style = WriterStyle(
            shear_deg=round(float(rng.uniform(-20.0, 20.0)), 3),
            thickness=int(rng.integers(1, 4)),
            jitter=round(float(rng.uniform(0.0, 1.5)), 3),
        )
        if style not in styles:
            styles.append(style)
    return styles


def _font(size: int) -> ImageFont.FreeTypeFont:
    return ImageFont.load_default(size=size)


def render_word(text: str, style: WriterStyle, rng: np.random.Generator) -> np.ndarray:
    """Render ``text`` as a 32 px high dark-on-white word image in the given style."""
    font = _font(style.font_size)
    advances = [max(1, math.ceil(font.getlength(c))) for c in text]
    margin = 4
    width = sum(advances) + 2 * margin
    canvas = Image.new("L", (width, WORD_HEIGHT), WHITE)
    draw = ImageDraw.Draw(canvas)
    x = margin
    for c, adv in zip(text, advances):
        dy = int(np.clip(np.rint(rng.normal(0.0, style.jitter)), -3, 3)) if style.jitter > 0 else 0
        draw.text((x, 1 + dy), c, fill=0, font=font)
        x += adv
    image = np.asarray(canvas, dtype=np.uint8)

    if style.thickness > 1:
        image = ndimage.grey_erosion(image, size=(style.thickness, style.thickness), mode="nearest")

    if style.shear_deg != 0.0:
        image = shear_image(image, style.shear_deg)
    return np.ascontiguousarray(image, dtype=np.uint8)


def shear_image(image: np.ndarray, shear_deg: float, baseline: int = 24) -> np.ndarray:
    """Horizontal shear about ``baseline``; the canvas widens so no ink is lost."""
    h, w = image.shape
    t = math.tan(math.radians(shear_deg))
    extra = math.ceil(abs(t) * h)
    out_w = w + extra
    # output (x, y) samples input (x - t * (baseline - y) - offset, y)
    offset = t * (h - baseline) if t > 0 else -t * baseline
    coeffs = (1.0, t, -t * baseline - offset, 0.0, 1.0, 0.0)
    pil = Image.fromarray(image).transform(
        (out_w, h), Image.AFFINE, coeffs, resample=Image.BILINEAR, fillcolor=WHITE
    )
    return np.asarray(pil, dtype=np.uint8)


def generate_synthetic_corpus(
    num_writers: int,
    words: Sequence[str],
    seed: int,
    styles: Sequence[WriterStyle] | None = None,
    tokenizer: CharsetTokenizer | None = None,
) -> Iterator[WordSample]:
    """Yield one rendering of every word for every writer, writer-major.

    Output is a pure function of the arguments.  Writer styles are drawn from
    ``seed`` unless given explicitly.
    """
    if num_writers < 1:
        raise CorpusError("num_writers must be >= 1")
    if not words:
        raise CorpusError("word list is empty")
    tokenizer = tokenizer or CharsetTokenizer()
    for w in words:
        if not w or any(c.isspace() for c in w):
            raise CorpusError(f"invalid word {w!r}")
        tokenizer.validate(w)
    rng = np.random.default_rng(seed)
    if styles is None:
        styles = random_writer_styles(num_writers, rng)
    elif len(styles) != num_writers:
        raise CorpusError(f"got {len(styles)} styles for {num_writers} writers")
    for writer, style in enumerate(styles):
        wrng = np.random.default_rng([seed, writer])
        for word in words:
            yield WordSample(render_word(word, style, wrng), word, writer)


def synthetic_writer_styles(num_writers: int, seed: int) -> list[WriterStyle]:
    """The styles :func:`generate_synthetic_corpus` draws for ``seed``."""
    return random_writer_styles(num_writers, np.random.default_rng(seed))


def read_words(path: str | Path) -> list[str]:
    """One word per whitespace-separated token; blank lines ignored."""
    return Path(path).read_text(encoding="utf-8").split()


__all__ = [
    "CharsetError",
    "CharsetTokenizer",
    "CorpusError",
    "OversizeError",
    "StyleSampleSet",
    "WordDataset",
    "WordSample",
    "WriterStyle",
    "generate_synthetic_corpus",
    "load_iam_words",
    "preprocess_style_image",
    "read_words",
    "render_word",
    "sample_style_set",
    "shear_image",
    "to_word_height",
    "write_corpus",
]
