"""Minibatch training of fusion heads with balanced sampling, cosine LR and early stopping."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

from .core import LABELS, DatasetManifest, EventLabel, Instance, inverse_frequency_weights
from .encoders import EncoderSpec, encode_image, encode_text
from .errors import ConfigurationError, NumericError
from .evaluation import score
from .fusion import FusionConfig, FusionParams, get_head, gradient_of, init_params, predict_proba

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs_max: int = 30
    batch_size: int = 32
    lr_peak: float = 1e-2
    warmup_fraction: float = 0.1
    patience: int = 3
    seed: int = 0
    balanced_sampling: bool = True
    val_fraction: float = 0.1
    frozen: tuple[str, ...] = ()
    freeze_encoders: bool = True

    def __post_init__(self):
        if self.epochs_max < 1 or self.batch_size < 1 or self.patience < 1:
            raise ConfigurationError("epochs_max, batch_size and patience must be >= 1")
        if self.lr_peak <= 0:
            raise ConfigurationError("lr_peak must be positive")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ConfigurationError("warmup_fraction must lie in [0, 1]")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigurationError("val_fraction must lie in (0, 1)")
        if not self.freeze_encoders:
            raise ConfigurationError("encoder fine-tuning is not supported; only heads are trained")
        object.__setattr__(self, "frozen", tuple(self.frozen))


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    val_f1: float
    lr: float


@dataclass
class TrainReport:
    epochs_run: int
    best_val_f1: float
    best_epoch: int
    history: list[EpochRecord] = field(default_factory=list)
    stopped_early: bool = False

    def to_dict(self) -> dict:
        return {"epochs_run": self.epochs_run, "best_val_f1": self.best_val_f1,
                "best_epoch": self.best_epoch, "stopped_early": self.stopped_early,
                "history": [asdict(h) for h in self.history]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def balanced_sampler(manifest: DatasetManifest | Sequence[Instance],
                     weights: Mapping[EventLabel, float], seed: int,
                     chunk: int = 1024) -> Iterator[Instance]:
    """Endless with-replacement stream over train rows, each row weighted by its class weight.

    With inverse-frequency class weights every class is drawn equally often
    in expectation.
    """
    rows = manifest.split("train") if isinstance(manifest, DatasetManifest) else list(manifest)
    if not rows:
        raise ConfigurationError("balanced sampler needs a nonempty train split")
    try:
        w = np.array([weights[r.label] for r in rows], dtype=np.float64)
    except KeyError as exc:
        raise ConfigurationError(f"no sampling weight for label {exc.args[0]}") from None
    p = w / w.sum()
    rng = np.random.default_rng(seed)
    while True:
        for i in rng.choice(len(rows), size=chunk, replace=True, p=p):
            yield rows[i]


def cosine_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr_peak`` followed by half-cosine decay to zero at ``total_steps``."""
    warmup = cfg.warmup_fraction * total_steps
    if step < warmup:
        return cfg.lr_peak * step / warmup
    if total_steps <= warmup:
        return cfg.lr_peak
    progress = min(1.0, (step - warmup) / (total_steps - warmup))
    return cfg.lr_peak * (1.0 + math.cos(math.pi * progress)) / 2.0


def validation_split(rows: Sequence[Instance], val_fraction: float, seed: int):
    """Stratified hold-out: the last ``val_fraction`` of a seeded shuffle of each label's rows."""
    rng = np.random.default_rng(seed)
    by_label: dict = {}
    for r in rows:
        by_label.setdefault(r.label, []).append(r)
    train, val = [], []
    for lab in sorted(by_label, key=lambda x: x.index):
        group = [by_label[lab][i] for i in rng.permutation(len(by_label[lab]))]
        n_val = int(round(val_fraction * len(group)))
        if len(group) >= 2:
            n_val = min(max(n_val, 1), len(group) - 1)
        else:
            n_val = 0
        train += group[:len(group) - n_val]
        val += group[len(group) - n_val:]
    return train, val


class EmbeddingCache:
    """Encodes each instance once per modality; embeddings are reused across epochs."""

    def __init__(self, manifest: DatasetManifest, text_spec: EncoderSpec | None,
                 vision_spec: EncoderSpec | None):
        self.manifest = manifest
        self.text_spec = text_spec
        self.vision_spec = vision_spec
        self._text: dict[str, np.ndarray] = {}
        self._vision: dict[str, np.ndarray] = {}

    def matrices(self, rows: Sequence[Instance]):
        v = w = None
        if self.vision_spec is not None:
            for r in rows:
                if r.id not in self._vision:
                    img = self.manifest.resolve_image(r)
                    self._vision[r.id] = encode_image(self.vision_spec, img).values
            v = np.stack([self._vision[r.id] for r in rows]) if rows else None
        if self.text_spec is not None:
            for r in rows:
                if r.id not in self._text:
                    self._text[r.id] = encode_text(self.text_spec, r.text).values
            w = np.stack([self._text[r.id] for r in rows]) if rows else None
        return v, w


def head_encoders(head: str, text_spec: EncoderSpec | None, vision_spec: EncoderSpec | None):
    h = get_head(head)
    if h.uses_text and (text_spec is None or text_spec.modality != "text"):
        raise ConfigurationError(f"{head} needs a text encoder")
    if h.uses_vision and (vision_spec is None or vision_spec.modality != "vision"):
        raise ConfigurationError(f"{head} needs a vision encoder")
    return (text_spec if h.uses_text else None), (vision_spec if h.uses_vision else None)


def fusion_config_for(text_spec: EncoderSpec | None, vision_spec: EncoderSpec | None,
                      base: FusionConfig | None = None) -> FusionConfig:
    base = base or FusionConfig()
    return FusionConfig(
        d_text=text_spec.output_dim if text_spec else base.d_text,
        d_vision=vision_spec.output_dim if vision_spec else base.d_vision,
        d_attn=base.d_attn, d_model=base.d_model, n_chunks=base.n_chunks,
        n_classes=base.n_classes,
    )


def predict_rows(params: FusionParams, cache: EmbeddingCache, rows: Sequence[Instance],
                 batch_size: int = 256) -> np.ndarray:
    out = []
    for i in range(0, len(rows), batch_size):
        v, w = cache.matrices(rows[i:i + batch_size])
        out.append(predict_proba(params, v, w))
    return np.concatenate(out) if out else np.zeros((0, params.config.n_classes))


def _weighted_f1(params, cache, rows) -> float:
    probs = predict_rows(params, cache, rows)
    return score([(LABELS[int(i)], r.label) for i, r in zip(probs.argmax(1), rows)]).f1


def train(head: str, encoders: tuple[EncoderSpec | None, EncoderSpec | None],
          manifest: DatasetManifest, cfg: TrainConfig | None = None,
          fusion_config: FusionConfig | None = None,
          cache: EmbeddingCache | None = None) -> tuple[FusionParams, TrainReport]:
    """Train ``head`` on the manifest's train split and return the best-validation parameters.

    ``encoders`` is ``(text_spec, vision_spec)``; the spec for a modality the
    head ignores may be ``None``.
    """
    cfg = cfg or TrainConfig()
    text_spec, vision_spec = head_encoders(head, *encoders)
    rows = manifest.split("train")
    if not rows:
        raise ConfigurationError("manifest has no train rows")
    train_rows, val_rows = validation_split(rows, cfg.val_fraction, cfg.seed)
    if not val_rows:
        raise ConfigurationError("validation split is empty; need at least two rows of some label")
    cache = cache or EmbeddingCache(manifest, text_spec, vision_spec)

    params = init_params(head, fusion_config_for(text_spec, vision_spec, fusion_config), cfg.seed)
    unknown = set(cfg.frozen) - set(params.tensors)
    if unknown:
        raise ConfigurationError(f"cannot freeze unknown tensors {sorted(unknown)}")
    targets = {r.id: r.label.index for r in train_rows}

    if cfg.balanced_sampling:
        counts: dict = {}
        for r in train_rows:
            counts[r.label] = counts.get(r.label, 0) + 1
        stream = balanced_sampler(train_rows, inverse_frequency_weights(counts), cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)

    steps_per_epoch = math.ceil(len(train_rows) / cfg.batch_size)
    total_steps = cfg.epochs_max * steps_per_epoch
    step = 0
    best, best_epoch, bad_epochs = -1.0, 0, 0
    best_params = params.copy()
    report = TrainReport(0, 0.0, 0)

    for epoch in range(1, cfg.epochs_max + 1):
        if cfg.balanced_sampling:
            order = [next(stream) for _ in range(len(train_rows))]
        else:
            order = [train_rows[i] for i in rng.permutation(len(train_rows))]
        losses = []
        for b in range(steps_per_epoch):
            batch = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            lr = cosine_lr(step, total_steps, cfg)
            v, w = cache.matrices(batch)
            try:
                loss, grads = gradient_of(params, v, w, [targets[r.id] for r in batch])
            except NumericError as exc:
                raise NumericError("non-finite loss during training", step=step, lr=lr,
                                   batch_ids=[r.id for r in batch]) from exc
            for k, g in grads.items():
                if k not in cfg.frozen:
                    params.tensors[k] -= lr * g
            losses.append(loss)
            step += 1
        val_f1 = _weighted_f1(params, cache, val_rows)
        report.history.append(EpochRecord(epoch, float(np.mean(losses)), val_f1,
                                          cosine_lr(step, total_steps, cfg)))
        log.info("epoch %d loss %.4f val_f1 %.4f", epoch, np.mean(losses), val_f1)
        if val_f1 > best:
            best, best_epoch, bad_epochs = val_f1, epoch, 0
            best_params = params.copy()
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                report.stopped_early = epoch < cfg.epochs_max
                break

    report.epochs_run = len(report.history)
    report.best_val_f1 = best
    report.best_epoch = best_epoch
    best_params.meta.update({"best_epoch": best_epoch, "best_val_f1": best})
    return best_params, report
