"""Staggered adversarial training.

Every iteration updates the discriminator, recognizer and writer classifier
on ``L_D + L_TR(real) + L_WCN(real)``; every ``g_update_period``-th iteration
(0, 2, 4, ... by default) also updates the generator on
``L_G + L_TR(fake) + L_WCN(fake)`` with the critics frozen.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .corpus import CharsetTokenizer, CorpusError, StyleSampleSet, WordSample, sample_style_set
from .critics import ctc_loss, hinge_discriminator_loss, hinge_generator_loss, pad_batch, recognizer_decode, writer_ce_loss
from .generator import Generator, ModelConfig, build_critics, style_tensor

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "inkfuse-ckpt/1"
GENERATOR_PARTS = ("style_encoder", "content_encoder", "fusion_core", "synthesis_head")
CRITIC_PARTS = ("discriminator", "recognizer", "writer_classifier")
LOG_COLUMNS = ("iteration", "epoch", "g_update", "d_loss", "tr_real", "wcn_real",
               "g_adv", "tr_fake", "wcn_fake", "g_total")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component: str, value: float):
        super().__init__(f"non-finite {component} loss ({value}); step aborted")
        self.component = component


@dataclass(frozen=True)
class TrainConfig:
    lr_g: float = 5e-5
    lr_d: float = 5e-5
    lr_wcn: float = 5e-5
    lr_tr: float = 5e-5
    adam_beta1: float = 0.0
    adam_beta2: float = 0.999
    batch_size: int = 16
    epochs: int = 30
    g_update_period: int = 2
    seed: int = 0
    max_iterations: Optional[int] = None
    checkpoint_every: int = 1
    grad_clip: Optional[float] = None
    weight_adv: float = 1.0
    weight_tr: float = 1.0
    weight_wcn: float = 1.0
    style_sampling: str = "per_batch"
    history_size: int = 10000
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.g_update_period < 1:
            raise ValueError("g_update_period must be >= 1")
        if min(self.lr_g, self.lr_d, self.lr_wcn, self.lr_tr) <= 0:
            raise ValueError("learning rates must be positive")
        if self.style_sampling not in ("per_batch", "fixed"):
            raise ValueError("style_sampling must be 'per_batch' or 'fixed'")
        if self.batch_size < 1 or self.checkpoint_every < 1:
            raise ValueError("batch_size and checkpoint_every must be >= 1")

    def to_flat(self) -> dict:
        flat = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "model"}
        flat.update(self.model.to_dict())
        return flat

    @classmethod
    def from_flat(cls, values: dict) -> "TrainConfig":
        values = dict(values)
        preset = values.pop("preset", "full")
        base = PRESETS[preset]() if preset in PRESETS else None
        if base is None:
            raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        train_keys = {f.name for f in dataclasses.fields(cls)} - {"model"}
        model_keys = {f.name for f in dataclasses.fields(ModelConfig)}
        unknown = set(values) - train_keys - model_keys
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        model = dataclasses.replace(base.model, **{k: v for k, v in values.items() if k in model_keys})
        return dataclasses.replace(base, model=model, **{k: v for k, v in values.items() if k in train_keys})


def desk_config(**overrides) -> TrainConfig:
    """Small CPU-friendly geometry; keeps 224 px inputs, 16 px patches and 3 decoder layers."""
    model = ModelConfig(
        vit_dim=64, vit_depth=1, vit_heads=4, d_model=64, decoder_heads=8, decoder_ff=128,
        decoder_dropout=0.0, synth_channels=32, critic_channels=32, tr_hidden=64,
    )
    cfg = TrainConfig(lr_g=2e-4, lr_d=2e-4, lr_wcn=2e-4, lr_tr=1e-3, batch_size=8, epochs=1000,
                      grad_clip=5.0, model=model)
    return TrainConfig.from_flat({**cfg.to_flat(), **overrides}) if overrides else cfg


PRESETS = {"full": TrainConfig, "desk": desk_config}


def load_train_config(path: str | Path, **overrides) -> TrainConfig:
    """Read a flat JSON object of config keys (plus an optional ``preset``)."""
    values = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(values, dict) or any(isinstance(v, (dict, list)) for v in values.values()):
        raise ValueError(f"{path}: config must be a flat key/value object")
    values.update(overrides)
    return TrainConfig.from_flat(values)


def save_train_config(cfg: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_flat(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


@dataclass
class Batch:
    real: torch.Tensor  # (B, 1, 32, W)
    real_widths: list[int]
    real_texts: list[str]
    writers: torch.Tensor  # (B,)
    style: torch.Tensor  # (B, 5, 3, 224, 224)
    targets: list[str]


@dataclass
class TrainState:
    iteration: int = 0
    epoch: int = 0
    g_updates: int = 0
    critic_updates: int = 0
    history: deque = field(default_factory=lambda: deque(maxlen=10000))

    def counters(self) -> dict:
        return {"iteration": self.iteration, "epoch": self.epoch,
                "g_updates": self.g_updates, "critic_updates": self.critic_updates}


def make_adam(params, lr: float, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=(cfg.adam_beta1, cfg.adam_beta2))


def _set_requires_grad(module: nn.Module, flag: bool):
    for p in module.parameters():
        p.requires_grad_(flag)


def _check_finite(component: str, loss: torch.Tensor):
    value = float(loss.detach())
    if not math.isfinite(value):
        raise NonFiniteLossError(component, value)


class Trainer:
    """Owns the four networks, their Adam optimizers and the data sampling RNG."""

    def __init__(self, samples: Sequence[WordSample], cfg: TrainConfig,
                 tokenizer: CharsetTokenizer | None = None, writer_keys: Sequence[str] | None = None):
        samples = list(samples)
        if not samples:
            raise CorpusError("training corpus is empty")
        self.tokenizer = tokenizer or CharsetTokenizer()
        for s in samples:
            self.tokenizer.validate(s.transcription)
            if len(s.transcription) > cfg.model.max_text_length:
                raise CorpusError(f"transcription {s.transcription!r} exceeds max_text_length")
        self.cfg = cfg
        self.samples = samples
        self.num_writers = max(s.writer for s in samples) + 1
        self.writer_keys = list(writer_keys) if writer_keys else [f"w{i:03d}" for i in range(self.num_writers)]
        self.by_writer: dict[int, list[WordSample]] = {}
        for s in samples:
            self.by_writer.setdefault(s.writer, []).append(s)
        self.lexicon = sorted({s.transcription for s in samples})

        torch.manual_seed(cfg.seed)
        self.generator = Generator(cfg.model, self.tokenizer)
        critics = build_critics(cfg.model, self.tokenizer, self.num_writers)
        self.discriminator = critics["discriminator"]
        self.recognizer = critics["recognizer"]
        self.writer_classifier = critics["writer_classifier"]
        self.optimizers = {
            "generator": make_adam(self.generator.parameters(), cfg.lr_g, cfg),
            "discriminator": make_adam(self.discriminator.parameters(), cfg.lr_d, cfg),
            "recognizer": make_adam(self.recognizer.parameters(), cfg.lr_tr, cfg),
            "writer_classifier": make_adam(self.writer_classifier.parameters(), cfg.lr_wcn, cfg),
        }
        self.rng = np.random.default_rng(cfg.seed)
        self.state = TrainState(history=deque(maxlen=cfg.history_size))
        self._fixed_styles: dict[int, StyleSampleSet] = {}

    # ------------------------------------------------------------------ data

    def networks(self) -> dict[str, nn.Module]:
        nets = dict(self.generator.component_modules())
        nets.update(discriminator=self.discriminator, recognizer=self.recognizer,
                    writer_classifier=self.writer_classifier)
        return nets

    def critics(self) -> list[nn.Module]:
        return [self.discriminator, self.recognizer, self.writer_classifier]

    def style_set_for(self, writer: int) -> StyleSampleSet:
        if self.cfg.style_sampling == "fixed":
            if writer not in self._fixed_styles:
                self._fixed_styles[writer] = sample_style_set(self.by_writer[writer], seed=self.cfg.seed + writer)
            return self._fixed_styles[writer]
        return sample_style_set(self.by_writer[writer], seed=int(self.rng.integers(2**31)))

    def make_batch(self, indices: Sequence[int]) -> Batch:
        chosen = [self.samples[i] for i in indices]
        real, widths = pad_batch([s.image for s in chosen])
        styles = [self.style_set_for(s.writer) for s in chosen]
        targets = [self.lexicon[int(j)] for j in self.rng.integers(len(self.lexicon), size=len(chosen))]
        return Batch(real, widths, [s.transcription for s in chosen],
                     torch.tensor([s.writer for s in chosen], dtype=torch.long), style_tensor(styles), targets)

    def epoch_batches(self) -> Iterable[Batch]:
        order = self.rng.permutation(len(self.samples))
        bs = self.cfg.batch_size
        for start in range(0, len(order), bs):
            yield self.make_batch(order[start : start + bs])

    # -------------------------------------------------------------- training

    def _encode_targets(self, texts: Sequence[str]) -> list[list[int]]:
        return [self.tokenizer.encode(t) for t in texts]

    def critic_losses(self, batch: Batch, fake: torch.Tensor, fake_widths: Sequence[int]) -> dict:
        d_real = self.discriminator(batch.real, batch.real_widths)
        d_fake = self.discriminator(fake.detach(), fake_widths)
        tr_logits, tr_lengths = self.recognizer(batch.real, batch.real_widths)
        return {
            "d_loss": hinge_discriminator_loss(d_real, d_fake),
            "tr_real": ctc_loss(tr_logits, self._encode_targets(batch.real_texts), tr_lengths),
            "wcn_real": writer_ce_loss(self.writer_classifier(batch.real, batch.real_widths), batch.writers),
        }

    def generator_losses(self, batch: Batch, fake: torch.Tensor, fake_widths: Sequence[int]) -> dict:
        tr_logits, tr_lengths = self.recognizer(fake, fake_widths)
        return {
            "g_adv": hinge_generator_loss(self.discriminator(fake, fake_widths)),
            "tr_fake": ctc_loss(tr_logits, self._encode_targets(batch.targets), tr_lengths),
            "wcn_fake": writer_ce_loss(self.writer_classifier(fake, fake_widths), batch.writers),
        }

    def _clip(self, params):
        if self.cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(list(params), self.cfg.grad_clip)

    def critic_step(self, batch: Batch, fake: torch.Tensor, fake_widths: Sequence[int]) -> dict:
        cfg = self.cfg
        losses = self.critic_losses(batch, fake, fake_widths)
        total = cfg.weight_adv * losses["d_loss"] + cfg.weight_tr * losses["tr_real"] + cfg.weight_wcn * losses["wcn_real"]
        for name, value in losses.items():
            _check_finite(name, value)
        names = ("discriminator", "recognizer", "writer_classifier")
        for n in names:
            self.optimizers[n].zero_grad(set_to_none=True)
        total.backward()
        for net in self.critics():
            self._clip(net.parameters())
        for n in names:
            self.optimizers[n].step()
        self.state.critic_updates += 1
        return {k: float(v.detach()) for k, v in losses.items()}

    def generator_step(self, batch: Batch, fake: torch.Tensor, fake_widths: Sequence[int]) -> dict:
        """Update G only; critic parameters are frozen so fake-image losses never reach them."""
        cfg = self.cfg
        for net in self.critics():
            net.zero_grad(set_to_none=True)
            _set_requires_grad(net, False)
        try:
            losses = self.generator_losses(batch, fake, fake_widths)
            total = cfg.weight_adv * losses["g_adv"] + cfg.weight_tr * losses["tr_fake"] + cfg.weight_wcn * losses["wcn_fake"]
            for name, value in losses.items():
                _check_finite(name, value)
            self.optimizers["generator"].zero_grad(set_to_none=True)
            total.backward()
            for net in self.critics():
                for p in net.parameters():
                    assert p.grad is None, "fake-image loss leaked into a critic"
            self._clip(self.generator.parameters())
            self.optimizers["generator"].step()
        finally:
            for net in self.critics():
                _set_requires_grad(net, True)
        self.state.g_updates += 1
        out = {k: float(v.detach()) for k, v in losses.items()}
        out["g_total"] = float(total.detach())
        return out

    def is_generator_iteration(self, iteration: int | None = None) -> bool:
        it = self.state.iteration if iteration is None else iteration
        return it % self.cfg.g_update_period == 0

    def train_step(self, batch: Batch) -> dict:
        self.generator.train()
        for net in self.critics():
            net.train()
        g_turn = self.is_generator_iteration()
        with torch.set_grad_enabled(g_turn):
            fake, content, _ = self.generator(batch.style, batch.targets)
        fake_widths = [16 * k for k in content.lengths]
        report = {"iteration": self.state.iteration, "epoch": self.state.epoch, "g_update": int(g_turn)}
        report.update(self.critic_step(batch, fake, fake_widths))
        if g_turn:
            report.update(self.generator_step(batch, fake, fake_widths))
        self.state.iteration += 1
        self.state.history.append(report)
        return report

    # ----------------------------------------------------------- checkpoint

    def checkpoint(self) -> dict:
        ckpt = {
            "format": CHECKPOINT_FORMAT,
            "train_config": self.cfg.to_flat(),
            "charset": self.tokenizer.symbols,
            "writer_keys": list(self.writer_keys),
            "num_writers": self.num_writers,
            "state": self.state.counters(),
            "optimizers": {k: o.state_dict() for k, o in self.optimizers.items()},
            "rng": {"torch": torch.get_rng_state(), "numpy": self.rng.bit_generator.state},
        }
        for name, net in self.networks().items():
            ckpt[name] = net.state_dict()
        return ckpt

    def save_checkpoint(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.checkpoint(), path)
        return path

    def restore(self, ckpt: dict) -> None:
        for name, net in self.networks().items():
            net.load_state_dict(ckpt[name])
        for k, o in self.optimizers.items():
            o.load_state_dict(ckpt["optimizers"][k])
        torch.set_rng_state(ckpt["rng"]["torch"])
        self.rng.bit_generator.state = ckpt["rng"]["numpy"]
        for k, v in ckpt["state"].items():
            setattr(self.state, k, v)

    # ----------------------------------------------------------------- fit

    def fit(self, out_dir: str | Path | None = None, resume: str | Path | None = None,
            log_name: str = "losses.tsv") -> list[dict]:
        """Run epochs until ``cfg.epochs`` or ``cfg.max_iterations``.

        Writes ``epoch_<n>.ckpt`` every ``checkpoint_every`` epochs and at the
        end, and appends one row per iteration to ``losses.tsv``.
        """
        cfg = self.cfg
        out = Path(out_dir) if out_dir is not None else None
        if resume is not None:
            self.restore(load_checkpoint(resume))
        reports: list[dict] = []
        log_fh = None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            log_path = out / log_name
            kept = _read_log(log_path, before=self.state.iteration) if resume is not None and log_path.exists() else []
            log_fh = open(log_path, "w", newline="", encoding="utf-8")
            writer = csv.DictWriter(log_fh, LOG_COLUMNS, delimiter="\t", lineterminator="\n", restval="")
            writer.writeheader()
            writer.writerows(kept)
        try:
            while self.state.epoch < cfg.epochs and not self._done():
                for batch in self.epoch_batches():
                    report = self.train_step(batch)
                    reports.append(report)
                    if log_fh is not None:
                        writer.writerow(_format_row(report))
                    if self._done():
                        break
                self.state.epoch += 1
                finished = self.state.epoch >= cfg.epochs or self._done()
                if out is not None and (self.state.epoch % cfg.checkpoint_every == 0 or finished):
                    self.save_checkpoint(out / f"epoch_{self.state.epoch}.ckpt")
                if self.state.epoch % 50 == 0 or finished:
                    logger.info("epoch %d iteration %d: %s", self.state.epoch, self.state.iteration, reports[-1])
        finally:
            if log_fh is not None:
                log_fh.close()
        return reports

    def _done(self) -> bool:
        return self.cfg.max_iterations is not None and self.state.iteration >= self.cfg.max_iterations

    # ---------------------------------------------------------- diagnostics

    def critic_accuracy(self, samples: Sequence[WordSample] | None = None) -> dict:
        """Recognizer CER and writer-classifier accuracy on real images."""
        from .metrics import character_error_rate

        samples = list(samples if samples is not None else self.samples)
        images = [s.image for s in samples]
        decoded = recognizer_decode(self.recognizer, images, self.tokenizer)
        cer = character_error_rate(decoded, [s.transcription for s in samples])
        self.writer_classifier.eval()
        with torch.no_grad():
            batch, widths = pad_batch(images)
            pred = self.writer_classifier(batch, widths).argmax(-1)
        acc = float((pred == torch.tensor([s.writer for s in samples])).float().mean())
        return {"cer": cer, "wcn_accuracy": acc, "decoded": decoded}


def _format_row(report: dict) -> dict:
    return {k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in report.items() if k in LOG_COLUMNS}


def _read_log(path: Path, before: int) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [row for row in csv.DictReader(fh, delimiter="\t") if int(row["iteration"]) < before]


def read_loss_log(path: str | Path) -> list[dict]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            rows.append({k: (float(v) if v not in ("", None) else None) for k, v in row.items()})
    return rows


def load_checkpoint(path: str | Path) -> dict:
    ckpt = torch.load(Path(path), map_location="cpu", weights_only=True)
    if not isinstance(ckpt, dict) or ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not an {CHECKPOINT_FORMAT} checkpoint")
    return ckpt


def generator_from_checkpoint(ckpt: dict) -> Generator:
    cfg = TrainConfig.from_flat(ckpt["train_config"])
    gen = Generator(cfg.model, CharsetTokenizer(ckpt["charset"]))
    for name, module in gen.component_modules().items():
        module.load_state_dict(ckpt[name])
    gen.eval()
    return gen


def critics_from_checkpoint(ckpt: dict) -> dict[str, nn.Module]:
    cfg = TrainConfig.from_flat(ckpt["train_config"])
    critics = build_critics(cfg.model, CharsetTokenizer(ckpt["charset"]), ckpt["num_writers"])
    for name, net in critics.items():
        net.load_state_dict(ckpt[name])
        net.eval()
    return critics


def fit(samples: Sequence[WordSample], cfg: TrainConfig, out_dir: str | Path | None = None,
        resume: str | Path | None = None, writer_keys=None) -> Trainer:
    trainer = Trainer(samples, cfg, writer_keys=writer_keys)
    trainer.fit(out_dir, resume)
    return trainer
