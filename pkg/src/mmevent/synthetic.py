"""Synthetic manifests for desk-scale experiments.

``make_cue_dataset`` builds a task where each post carries its class cue in
exactly one modality: either the tweet names the event and the image is a
blank grey frame, or the image shows a class-specific pattern and the text is
filler. A model needs both modalities to get everything right.
"""
from __future__ import annotations

import io
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .core import LABELS, EventLabel, Instance, write_manifest

# per-label (test, train) counts of the published disaster tweet/image corpus
BENCHMARK_COUNTS = {
    EventLabel.NonDamage: (888, 2069),
    EventLabel.DamagedInfrastructure: (417, 973),
    EventLabel.DamagedNature: (155, 359),
    EventLabel.Flood: (116, 268),
    EventLabel.Fires: (104, 242),
    EventLabel.HumanDamage: (72, 168),
}

CUE_WORDS = {
    EventLabel.NonDamage: "calm",
    EventLabel.DamagedInfrastructure: "collapsed",
    EventLabel.DamagedNature: "uprooted",
    EventLabel.Flood: "flood",
    EventLabel.Fires: "wildfire",
    EventLabel.HumanDamage: "injured",
}
FILLER = ("today", "news", "update", "photo", "city", "please", "share", "live", "people",
          "look", "here", "this", "morning", "video", "report", "local", "now", "see")

IMAGE_SIZE = 16
_PALETTE = [(230, 40, 40), (40, 200, 60), (50, 80, 230), (230, 200, 40), (200, 60, 220),
            (40, 210, 210)]


def _png(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr.astype(np.uint8), "RGB").save(buf, format="PNG")
    return buf.getvalue()


def cue_image(label_index: int | None, rng: np.random.Generator, noise: float = 8.0) -> bytes:
    """A 16x16 PNG: grey background plus, when labelled, a coloured block in a class-specific quadrant."""
    arr = np.full((IMAGE_SIZE, IMAGE_SIZE, 3), 128.0)
    if label_index is not None:
        h = IMAGE_SIZE // 2
        r0, c0 = divmod(label_index % 4, 2)
        arr[r0 * h:(r0 + 1) * h, c0 * h:(c0 + 1) * h] = _PALETTE[label_index % len(_PALETTE)]
    arr += rng.normal(0.0, noise, size=arr.shape)
    return _png(np.clip(arr, 0, 255))


def cue_text(label: EventLabel | None, rng: np.random.Generator, n_filler: int = 4) -> str:
    words = list(rng.choice(FILLER, size=n_filler, replace=False))
    if label is not None:
        words.insert(int(rng.integers(0, len(words) + 1)), CUE_WORDS[label])
    return " ".join(words)


def make_cue_dataset(out_dir: str | Path, n_train: int = 1200, n_test: int = 300, seed: int = 0,
                     labels: Sequence[EventLabel] = LABELS, noise: float = 8.0) -> Path:
    """Write images and ``manifest.csv`` under ``out_dir``; returns the manifest path.

    Labels are balanced; for each row a fair coin decides whether the cue goes
    into the text or into the image.
    """
    out_dir = Path(out_dir)
    (out_dir / "img").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = []
    for split, n in (("train", n_train), ("test", n_test)):
        for i in range(n):
            lab = labels[i % len(labels)]
            text_has_cue = bool(rng.integers(0, 2))
            text = cue_text(lab if text_has_cue else None, rng)
            png = cue_image(None if text_has_cue else lab.index, rng, noise)
            rel = f"img/{split}_{i:05d}.png"
            (out_dir / rel).write_bytes(png)
            rows.append(Instance(f"{split}-{i:05d}", text, rel, lab, split))
    path = out_dir / "manifest.csv"
    write_manifest(rows, path)
    return path


def benchmark_count_manifest(path: str | Path) -> Path:
    """A text-only manifest whose per-label split counts replicate the published statistics."""
    rows = []
    for lab, (n_test, n_train) in BENCHMARK_COUNTS.items():
        for split, n in (("test", n_test), ("train", n_train)):
            for i in range(n):
                rows.append(Instance(f"{lab.name}-{split}-{i}", f"{lab.display} post {i}",
                                     f"img/{lab.name}_{split}_{i}.jpg", lab, split))
    write_manifest(rows, path)
    return Path(path)


def repeated_manifest(path: str | Path, n: int = 20, label: EventLabel = EventLabel.Flood,
                      image: bytes | None = None, out_dir: str | Path | None = None) -> Path:
    """``n`` copies of the same post under distinct ids (all in train)."""
    path = Path(path)
    img_rel = "img/same.png"
    root = Path(out_dir) if out_dir else path.parent
    (root / "img").mkdir(parents=True, exist_ok=True)
    (root / img_rel).write_bytes(image or cue_image(label.index, np.random.default_rng(0), 0.0))
    rows = [Instance(f"r{i}", "water everywhere flood", img_rel, label, "train") for i in range(n)]
    write_manifest(rows, path)
    return path

