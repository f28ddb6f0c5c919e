"""Text and vision encoders producing fixed-dimension embeddings.

Two families of backend are available:

* ``toy-text`` / ``toy-vision``: deterministic, dependency-light encoders built
  from hashing and a seeded random projection. They exist so the fusion heads
  can be trained and tested at desk scale.
* ``pretrained-transformer-text`` / ``pretrained-cnn-vision``: wrappers around
  Hugging Face ``transformers`` and ``torchvision`` models, imported lazily.
"""
from __future__ import annotations

import hashlib
import io
import threading
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Mapping, Union

import numpy as np

from .errors import BackendError, ConfigurationError, InputError

MODALITIES = ("text", "vision")
BACKENDS = {
    "pretrained-transformer-text": "text",
    "pretrained-cnn-vision": "vision",
    "toy-text": "text",
    "toy-vision": "vision",
}
DEFAULT_TOY_DIM = 64
TOY_VOCAB_BUCKETS = 4096
_GRID = 8


@dataclass(frozen=True)
class Embedding:
    values: np.ndarray
    modality: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or v.size == 0:
            raise ValueError("embedding must be a nonempty 1-d vector")
        if not np.all(np.isfinite(v)):
            raise ValueError("embedding contains non-finite entries")
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True)
class EncoderSpec:
    modality: str
    backend: str
    output_dim: int = DEFAULT_TOY_DIM
    backend_options: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ConfigurationError(f"unknown encoder backend {self.backend!r}; "
                                     f"expected one of {sorted(BACKENDS)}")
        if BACKENDS[self.backend] != self.modality:
            raise ConfigurationError(f"backend {self.backend!r} does not produce "
                                     f"{self.modality} embeddings")
        if int(self.output_dim) <= 0:
            raise ConfigurationError("output_dim must be positive")
        if self.backend.startswith("toy") and "seed" not in self.backend_options:
            raise ConfigurationError("toy backends require a 'seed' option")
        object.__setattr__(self, "backend_options", dict(self.backend_options))

    @property
    def seed(self) -> int:
        return int(self.backend_options.get("seed", 0))

    def to_dict(self) -> dict:
        return {"modality": self.modality, "backend": self.backend,
                "output_dim": int(self.output_dim),
                "backend_options": {k: str(v) for k, v in sorted(self.backend_options.items())}}

    @classmethod
    def from_dict(cls, d: Mapping) -> "EncoderSpec":
        return cls(d["modality"], d["backend"], int(d["output_dim"]),
                   dict(d.get("backend_options", {})))

    @classmethod
    def toy_text(cls, dim: int = DEFAULT_TOY_DIM, seed: int = 0) -> "EncoderSpec":
        return cls("text", "toy-text", dim, {"seed": str(seed)})

    @classmethod
    def toy_vision(cls, dim: int = DEFAULT_TOY_DIM, seed: int = 0) -> "EncoderSpec":
        return cls("vision", "toy-vision", dim, {"seed": str(seed)})


# --- toy backends -------------------------------------------------------------

def _seeded_rng(seed: int, tag: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{tag}:{seed}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


@lru_cache(maxsize=32)
def _toy_projection(tag: str, seed: int, rows: int, dim: int) -> np.ndarray:
    m = _seeded_rng(seed, tag).standard_normal((rows, dim)) / np.sqrt(dim)
    m.setflags(write=False)
    return m


def _token_bucket(token: str) -> int:
    h = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(h, "little") % TOY_VOCAB_BUCKETS


def _l2_normalize(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x)
    return x / n if n > 0 else x


def _toy_text(spec: EncoderSpec, text: str) -> np.ndarray:
    proj = _toy_projection("toy-text", spec.seed, TOY_VOCAB_BUCKETS, spec.output_dim)
    counts = np.zeros(TOY_VOCAB_BUCKETS)
    for tok in text.lower().split():
        counts[_token_bucket(tok)] += 1.0
    return _l2_normalize(counts @ proj)


def _load_image(image_ref):
    from PIL import Image, UnidentifiedImageError

    try:
        if isinstance(image_ref, (bytes, bytearray)):
            img = Image.open(io.BytesIO(image_ref))
        else:
            img = Image.open(Path(image_ref))
        img.load()
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        where = "<bytes>" if isinstance(image_ref, (bytes, bytearray)) else str(image_ref)
        raise InputError(f"cannot read image {where}: {exc}") from exc
    return img.convert("RGB")


def toy_image_features(img) -> np.ndarray:
    """Per-channel mean and variance followed by an 8x8 luminance grid, all in [0, 1]."""
    rgb = np.asarray(img, dtype=np.float64) / 255.0
    stats = np.concatenate([rgb.mean(axis=(0, 1)), rgb.var(axis=(0, 1))])
    lum = img.convert("L").resize((_GRID, _GRID), resample=2)  # bilinear
    grid = np.asarray(lum, dtype=np.float64).ravel() / 255.0
    return np.concatenate([stats, grid])


def _toy_vision(spec: EncoderSpec, image_ref) -> np.ndarray:
    feats = toy_image_features(_load_image(image_ref))
    proj = _toy_projection("toy-vision", spec.seed, feats.size, spec.output_dim)
    # centre so that uniform mid-grey does not dominate every embedding
    return (feats - 0.5) @ proj


# --- pretrained backends --------------------------------------------------------

_load_lock = threading.Lock()
_loaded: dict = {}


def _pretrained(spec: EncoderSpec):
    key = (spec.backend, tuple(sorted(spec.backend_options.items())))
    with _load_lock:
        if key not in _loaded:
            try:
                _loaded[key] = _build_pretrained(spec)
            except BackendError:
                raise
            except Exception as exc:  # import errors, missing weights, bad ids
                raise BackendError(f"failed to load {spec.backend} "
                                   f"{spec.backend_options.get('model', '')!r}: {exc}") from exc
        return _loaded[key]


def _build_pretrained(spec: EncoderSpec):
    import torch

    opts = spec.backend_options
    local_only = opts.get("local_files_only", "false").lower() == "true"
    if spec.backend == "pretrained-transformer-text":
        from transformers import AutoModel, AutoTokenizer

        name = opts.get("model", "answerdotai/ModernBERT-base")
        tok = AutoTokenizer.from_pretrained(name, local_files_only=local_only)
        model = AutoModel.from_pretrained(name, local_files_only=local_only).eval()

        def run(text: str) -> np.ndarray:
            with torch.no_grad():
                batch = tok(text, return_tensors="pt", truncation=True)
                hidden = model(**batch).last_hidden_state[0]
            if opts.get("pooling", "first") == "mean":
                return hidden.mean(dim=0).double().numpy()
            return hidden[0].double().numpy()
        return run

    import torchvision

    name = opts.get("model", "convnext_base")
    available = torchvision.models.get_model_weights(name)
    weights = opts.get("weights", "DEFAULT")
    w = available.DEFAULT if weights == "DEFAULT" else available[weights]
    model = torchvision.models.get_model(name, weights=w).eval()
    transform = w.transforms()
    # drop the classifier so the penultimate pooled features come out
    if hasattr(model, "classifier"):
        model.classifier[-1] = torch.nn.Identity()
    elif hasattr(model, "fc"):
        model.fc = torch.nn.Identity()

    def run(img) -> np.ndarray:
        with torch.no_grad():
            return model(transform(img).unsqueeze(0))[0].double().numpy()
    return run


# --- public API ----------------------------------------------------------------

def _finish(spec: EncoderSpec, values: np.ndarray) -> Embedding:
    if values.shape != (spec.output_dim,):
        raise BackendError(f"{spec.backend} produced dim {values.shape[-1]}, "
                           f"spec expects {spec.output_dim}")
    return Embedding(values, spec.modality)


def encode_text(spec: EncoderSpec, text: str) -> Embedding:
    if spec.modality != "text":
        raise ConfigurationError(f"encode_text needs a text encoder, got {spec.modality}")
    text = text or ""
    if spec.backend == "toy-text":
        return _finish(spec, _toy_text(spec, text))
    return _finish(spec, _pretrained(spec)(text))


def encode_image(spec: EncoderSpec, image_ref: Union[str, Path, bytes]) -> Embedding:
    if spec.modality != "vision":
        raise ConfigurationError(f"encode_image needs a vision encoder, got {spec.modality}")
    if image_ref is None:
        raise InputError("no image provided")
    if spec.backend == "toy-vision":
        return _finish(spec, _toy_vision(spec, image_ref))
    runner = _pretrained(spec)
    return _finish(spec, runner(_load_image(image_ref)))
