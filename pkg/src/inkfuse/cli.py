"""Command-line entry point: ``inkfuse {synth-data,train,generate,ssaa,evaluate}``."""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from . import __version__

logger = logging.getLogger("inkfuse")

STYLE_SUFFIXES = {".png", ".bmp", ".tif", ".tiff", ".pgm", ".ppm"}


class CommandError(Exception):
    """A user-facing failure; reported on stderr with exit status 1."""


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    argv: list
    seed: Optional[int]
    config: dict = field(default_factory=dict)
    checkpoint: Optional[str] = None
    checkpoint_sha256: Optional[str] = None
    artifacts: dict = field(default_factory=dict)
    started: str = ""
    finished: str = ""
    version: str = __version__

    def add(self, path: Path, base: Path):
        path = Path(path)
        for p in sorted(path.rglob("*")) if path.is_dir() else [path]:
            if p.is_file():
                self.artifacts[str(p.relative_to(base))] = sha256_file(p)

    def write(self, path: Path) -> Path:
        self.finished = _now()
        path.write_text(json.dumps(self.__dict__, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
        return path


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _save_png(array: np.ndarray, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(array, dtype=np.uint8)).save(path, optimize=False)
    return path


def _write_tsv(path: Path, rows: list[dict], columns) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, columns, delimiter="\t", lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    return path


# --------------------------------------------------------------------------
# synth-data
# --------------------------------------------------------------------------


def cmd_synth_data(args) -> RunManifest:
    from .corpus import (NUM_STYLE_IMAGES, WordSample, generate_synthetic_corpus, read_words, sample_style_set,
                         synthetic_writer_styles, write_corpus)

    if args.writers < 1:
        raise CommandError("--writers must be at least 1")
    words_path = Path(args.words)
    if not words_path.is_file():
        raise CommandError(f"words file not found: {words_path}")
    words = read_words(words_path)
    if not words:
        raise CommandError(f"words file {words_path} is empty")
    if not 0.0 <= args.test_fraction < 1.0:
        raise CommandError("--test-fraction must be in [0, 1)")
    seed = args.seed if args.seed is not None else 0
    out = Path(args.out)
    styles = synthetic_writer_styles(args.writers, seed)
    samples: list[WordSample] = list(generate_synthetic_corpus(args.writers, words, seed, styles=styles))
    n_test = int(round(len(words) * args.test_fraction))
    splits = ["test" if (i % len(words)) >= len(words) - n_test else "train" for i in range(len(samples))]
    write_corpus(out, samples, splits)
    _write_tsv(out / "writer_styles.tsv",
               [{"writer_key": f"w{i:03d}", **s.__dict__} for i, s in enumerate(styles)],
               ["writer_key", "shear_deg", "thickness", "jitter", "font_size"])
    for w in range(args.writers):
        own = [s for s in samples if s.writer == w]
        style = sample_style_set(own, NUM_STYLE_IMAGES, seed=seed + w)
        for j, im in enumerate(style.images):
            _save_png(im, out / "styles" / f"w{w:03d}" / f"style_{j}.png")
    manifest = RunManifest("synth-data", sys.argv[1:], seed,
                           {"writers": args.writers, "words": words, "test_fraction": args.test_fraction})
    manifest.add(out / "manifest.tsv", out)
    manifest.add(out / "images", out)
    manifest.add(out / "styles", out)
    manifest.add(out / "writer_styles.tsv", out)
    return _finish(manifest, out / "run_manifest.json")


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------


def cmd_train(args) -> RunManifest:
    from .corpus import load_iam_words
    from .plotting import plot_loss_curves
    from .trainer import TrainConfig, Trainer, desk_config, load_train_config, read_loss_log, save_train_config

    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.max_iterations is not None:
        overrides["max_iterations"] = args.max_iterations
    if args.config:
        cfg = load_train_config(args.config, **overrides)
    else:
        cfg = desk_config(**overrides) if args.preset == "desk" else TrainConfig.from_flat(overrides)
    data = load_iam_words(args.data, "train")
    if not len(data):
        raise CommandError(f"no training samples in {args.data}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_train_config(cfg, out / "config.json")
    trainer = Trainer(data.samples, cfg, writer_keys=data.writer_keys)
    trainer.fit(out, resume=args.resume)
    plot_loss_curves(read_loss_log(out / "losses.tsv"), out / "loss_curves.png")
    diag = trainer.critic_accuracy()
    (out / "critic_report.json").write_text(json.dumps(
        {"train_cer": diag["cer"], "train_wcn_accuracy": diag["wcn_accuracy"], **trainer.state.counters()},
        indent=2, sort_keys=True) + "\n", encoding="utf-8")
    manifest = RunManifest("train", sys.argv[1:], cfg.seed, cfg.to_flat())
    for name in ("config.json", "losses.tsv", "loss_curves.png", "critic_report.json"):
        manifest.add(out / name, out)
    for ckpt in sorted(out.glob("epoch_*.ckpt")):
        manifest.add(ckpt, out)
    latest = latest_checkpoint(out)
    manifest.checkpoint, manifest.checkpoint_sha256 = str(latest), sha256_file(latest)
    return _finish(manifest, out / "run_manifest.json")


def latest_checkpoint(directory: Path) -> Path:
    ckpts = sorted(Path(directory).glob("epoch_*.ckpt"), key=lambda p: int(p.stem.split("_")[1]))
    if not ckpts:
        raise CommandError(f"no epoch_<n>.ckpt in {directory}")
    return ckpts[-1]


# --------------------------------------------------------------------------
# generate / ssaa helpers
# --------------------------------------------------------------------------


def load_style_dir(directory: str | Path) -> np.ndarray:
    """First five images (sorted by name) of a directory as a ``(5, 224, 224, 3)`` style set."""
    from .corpus import NUM_STYLE_IMAGES, STYLE_SIZE, preprocess_style_image, to_word_height

    directory = Path(directory)
    if not directory.is_dir():
        raise CommandError(f"style directory not found: {directory}")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in STYLE_SUFFIXES)
    if len(files) < NUM_STYLE_IMAGES:
        raise CommandError(f"{directory} holds {len(files)} style images, {NUM_STYLE_IMAGES} required")
    images = []
    for p in files[:NUM_STYLE_IMAGES]:
        with Image.open(p) as im:
            gray = np.asarray(im.convert("L"), dtype=np.uint8)
        if gray.shape == (STYLE_SIZE, STYLE_SIZE):
            images.append(np.repeat(gray[:, :, None], 3, axis=2))
        else:
            images.append(preprocess_style_image(to_word_height(gray)))
    return np.stack(images)


def _load_generator(path):
    from .trainer import generator_from_checkpoint, load_checkpoint

    path = Path(path)
    if path.is_dir():
        path = latest_checkpoint(path)
    if not path.is_file():
        raise CommandError(f"checkpoint not found: {path}")
    try:
        ckpt = load_checkpoint(path)
    except Exception as exc:  # torch raises a variety of unpickling errors
        raise CommandError(f"cannot load checkpoint {path}: {exc}") from exc
    return ckpt, generator_from_checkpoint(ckpt), path


def _seed_everything(seed: int):
    import torch

    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def _safe(word: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in word)


def cmd_generate(args) -> RunManifest:
    from .generator import generate
    from .plotting import save_word_strip
    from .ssaa import save_attention
    from .synthesis import export_images

    words = args.text.split()
    if not words:
        raise CommandError("--text is empty")
    ckpt, gen, ckpt_path = _load_generator(args.checkpoint)
    for w in words:
        gen.tokenizer.validate(w)
    style = load_style_dir(args.style_dir)
    seed = args.seed if args.seed is not None else 0
    _seed_everything(seed)
    images, content, recorder = generate(gen, style, words, record_attention=args.save_attention)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    manifest = RunManifest("generate", sys.argv[1:], seed, {"text": args.text, "style_dir": str(args.style_dir)},
                           str(ckpt_path), sha256_file(ckpt_path))
    exported = export_images(images, words, content.lengths, seed=seed)
    for i, g in enumerate(exported):
        name = f"word_{i:02d}_{_safe(g.text)}.png"
        _save_png(g.image, out / name)
        manifest.add(out / name, out)
        rows.append({"index": i, "word": g.text, "file": name, "height": g.image.shape[0], "width": g.image.shape[1]})
        if recorder is not None:
            rec = recorder.attention_of_layer(-1)
            d = out / f"attention_{i:02d}_{_safe(g.text)}"
            save_attention(d, rec.item(i), g.text, rec.provenance, layer=rec.layer)
            manifest.add(d, out)
    _write_tsv(out / "generated.tsv", rows, ["index", "word", "file", "height", "width"])
    save_word_strip([g.image for g in exported], out / "words.png", words)
    manifest.add(out / "generated.tsv", out)
    manifest.add(out / "words.png", out)
    return _finish(manifest, out / "run_manifest.json")


def cmd_ssaa(args) -> RunManifest:
    from .generator import generate
    from .plotting import plot_attention_maps
    from .ssaa import SSAAConfig, run_ssaa, save_attention

    word = args.text.strip()
    if not word or any(c.isspace() for c in word):
        raise CommandError("--text must be a single non-empty word")
    ckpt, gen, ckpt_path = _load_generator(args.checkpoint)
    gen.tokenizer.validate(word)
    style = load_style_dir(args.style_dir)
    seed = args.seed if args.seed is not None else 0
    _seed_everything(seed)
    _, content, recorder = generate(gen, style, [word], record_attention=True)
    rec = recorder.attention_of_layer(-1)
    A = rec.item(0)
    cfg = SSAAConfig(percentile=args.percentile, min_area=args.min_area, top_k=args.top_k)
    result = run_ssaa(A, list(style), word, cfg, rec.provenance)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _save_png(result.grid, out / "grid.png")
    save_attention(out / "attention", A, word, rec.provenance, layer=rec.layer, a_word=result.a_word,
                   maps=result.maps, mai=result.mai)
    _write_tsv(out / "strokes.tsv", result.stroke_rows(),
               ["image", "rank", "area", "mean_attention", "row0", "col0", "row1", "col1", "threshold"])
    plot_attention_maps(list(style), result.maps, result.mai, word, out / "attention_maps.png")
    manifest = RunManifest("ssaa", sys.argv[1:], seed, {"text": word, **cfg.__dict__},
                           str(ckpt_path), sha256_file(ckpt_path))
    for name in ("grid.png", "attention", "strokes.tsv", "attention_maps.png"):
        manifest.add(out / name, out)
    return _finish(manifest, out / "run_manifest.json")


def cmd_evaluate(args) -> RunManifest:
    from .metrics import EXTRACTORS, evaluate
    from .plotting import plot_feature_scatter

    if args.extractor not in EXTRACTORS:
        raise CommandError(f"unknown extractor {args.extractor!r}; available: {', '.join(EXTRACTORS)}")
    ckpt_path = Path(args.checkpoint)
    if ckpt_path.is_dir():
        ckpt_path = latest_checkpoint(ckpt_path)
    if not ckpt_path.is_file():
        raise CommandError(f"checkpoint not found: {ckpt_path}")
    seed = args.seed if args.seed is not None else 0
    _seed_everything(seed)
    report, triples, (real_f, fake_f) = evaluate(
        ckpt_path, args.data, args.split, args.extractor, seed=seed, features=args.features,
        kid_subset_size=args.kid_subset_size, kid_num_subsets=args.kid_subsets,
    )
    out = Path(args.out)
    if out.suffix.lower() != ".json":
        out = out / "report.json"
    base = out.parent
    base.mkdir(parents=True, exist_ok=True)
    decoded_fake = report.extra.pop("decoded_generated")
    decoded_real = report.extra.pop("decoded_real")
    report.write(out)
    rows = [{"index": i, "text": t[2], "decoded_real": dr, "decoded_generated": df}
            for i, (t, dr, df) in enumerate(zip(triples, decoded_real, decoded_fake))]
    samples_path = base / f"{out.stem}_samples.tsv"
    _write_tsv(samples_path, rows, ["index", "text", "decoded_real", "decoded_generated"])
    fig_path = plot_feature_scatter(real_f, fake_f, base / f"{out.stem}_features.png",
                                    f"{report.extractor}: FID {report.fid:.3f}")
    manifest = RunManifest("evaluate", sys.argv[1:], seed,
                           {"split": args.split, "extractor": args.extractor, "data": str(args.data)},
                           str(ckpt_path), sha256_file(ckpt_path))
    for p in (out, samples_path, fig_path):
        manifest.add(p, base)
    return _finish(manifest, base / f"{out.stem}_run_manifest.json")


def _finish(manifest: RunManifest, path: Path) -> RunManifest:
    manifest.write(path)
    logger.info("%s: wrote %d artifacts, manifest %s", manifest.command, len(manifest.artifacts), path)
    return manifest


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    common.add_argument("--config", default=None, help="flat JSON config file")
    common.add_argument("--out", required=True, help="output directory (evaluate: report path)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="inkfuse", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", parents=[common], help="render a synthetic multi-writer corpus")
    p.add_argument("--writers", type=int, required=True)
    p.add_argument("--words", required=True, help="text file of whitespace-separated words")
    p.add_argument("--test-fraction", type=float, default=0.0)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", parents=[common], help="adversarial training")
    p.add_argument("--data", required=True)
    p.add_argument("--preset", choices=("full", "desk"), default="desk",
                   help="used when no --config is given")
    p.add_argument("--max-iterations", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    for name, func, text_help, cmd_help in (
        ("generate", cmd_generate, "words to write", "write words in the style of five reference images"),
        ("ssaa", cmd_ssaa, "single generated word to analyse", "salient stroke attention analysis of one word"),
    ):
        p = sub.add_parser(name, parents=[common], help=cmd_help)
        p.add_argument("--text", required=True, help=text_help)
        p.add_argument("--style-dir", required=True)
        p.add_argument("--checkpoint", "--ckpt", required=True)
        p.set_defaults(func=func)
    sub.choices["generate"].add_argument("--save-attention", action="store_true")
    for flag, typ, default in (("--percentile", float, 90.0), ("--min-area", int, 20), ("--top-k", int, 5)):
        sub.choices["ssaa"].add_argument(flag, type=typ, default=default)

    p = sub.add_parser("evaluate", parents=[common], help="FID / KID / delta-CER report")
    p.add_argument("--checkpoint", "--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--extractor", default="wcn")
    p.add_argument("--features", default=None, help="tensor container for --extractor file")
    p.add_argument("--kid-subset-size", type=int, default=100)
    p.add_argument("--kid-subsets", type=int, default=100)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    from .corpus import CorpusError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command != "train" and args.config:
        # shared flag; only training reads a config file
        logger.info("ignoring --config for %s", args.command)
    try:
        args.func(args)
    except (CommandError, CorpusError, FileNotFoundError, ValueError) as exc:
        print(f"inkfuse {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
