"""Domain types, the disaster label taxonomy and manifest ingestion."""
from __future__ import annotations

import csv
import enum
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

from .errors import ConfigurationError, IntegrityError, ManifestFormatError, ManifestRowError

REQUIRED_COLUMNS = ("id", "text", "image_path", "label")
OPTIONAL_COLUMNS = ("split",)
SPLITS = ("train", "test", "infer")

_NORMALIZE_DROP = re.compile(r"[\s\-_]+")


def _label_key(s: str) -> str:
    return _NORMALIZE_DROP.sub("", s.strip().lower())


class EventLabel(enum.Enum):
    NonDamage = "Non-damage"
    DamagedInfrastructure = "Damaged Infrastructure"
    DamagedNature = "Damaged Nature"
    Flood = "Flood"
    Fires = "Fires"
    HumanDamage = "Human Damage"

    @property
    def display(self) -> str:
        return self.value

    @property
    def index(self) -> int:
        return LABELS.index(self)

    @classmethod
    def parse(cls, s: str) -> "EventLabel":
        """Parse a label string, tolerating case, whitespace and hyphen variants.

        ``"Non-Damage"``, ``"non damage"`` and ``"NonDamage"`` all map to
        :attr:`NonDamage`. Raises ``ValueError`` for anything else.
        """
        if isinstance(s, cls):
            return s
        label = _LOOKUP.get(_label_key(str(s)))
        if label is None:
            raise ValueError(f"unknown event label: {s!r}")
        return label

    @classmethod
    def try_parse(cls, s: str) -> "EventLabel | None":
        try:
            return cls.parse(s)
        except ValueError:
            return None

    def __str__(self) -> str:
        return self.value


LABELS: tuple[EventLabel, ...] = tuple(EventLabel)
NUM_CLASSES = len(LABELS)
_LOOKUP = {}
for _lab in LABELS:
    _LOOKUP[_label_key(_lab.value)] = _lab
    _LOOKUP[_label_key(_lab.name)] = _lab


ImageRef = Union[str, bytes, None]


@dataclass(frozen=True)
class Instance:
    id: str
    text: str
    image_ref: ImageRef = None
    label: EventLabel | None = None
    split: str = "train"

    def __post_init__(self):
        if not self.id:
            raise ValueError("instance id must be nonempty")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.label is None and self.split != "infer":
            raise ValueError(f"instance {self.id!r} in split {self.split!r} needs a label")


@dataclass(frozen=True)
class DatasetManifest:
    rows: tuple[Instance, ...]
    source_path: str = ""
    _by_id: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        rows = tuple(self.rows)
        object.__setattr__(self, "rows", rows)
        seen = {}
        for r in rows:
            if r.id in seen:
                raise IntegrityError(f"duplicate instance id {r.id!r}")
            seen[r.id] = r
        object.__setattr__(self, "_by_id", seen)

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def get(self, instance_id: str) -> Instance:
        return self._by_id[instance_id]

    def split(self, name: str) -> list[Instance]:
        return [r for r in self.rows if r.split == name]

    @property
    def base_dir(self) -> Path:
        return Path(self.source_path).parent if self.source_path else Path(".")

    def resolve_image(self, instance: Instance) -> ImageRef:
        """Return raw bytes as-is, or the image path resolved against the manifest directory."""
        ref = instance.image_ref
        if ref is None or isinstance(ref, bytes):
            return ref
        p = Path(ref)
        return str(p if p.is_absolute() else self.base_dir / p)


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestFormatError(f"{path}: empty file, header required") from None
        header = [h.strip() for h in header]
        dupes = [h for h, n in Counter(header).items() if n > 1]
        if dupes:
            raise ManifestFormatError(f"{path}: duplicate header column(s) {dupes}")
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise ManifestFormatError(f"{path}: missing header column(s) {missing}")
        col = {h: i for i, h in enumerate(header)}
        has_split = "split" in col

        rows = []
        seen = set()
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise ManifestRowError(lineno, f"expected {len(header)} fields, got {len(rec)}")
            iid = rec[col["id"]].strip()
            if not iid:
                raise ManifestRowError(lineno, "empty id")
            if iid in seen:
                raise IntegrityError(f"{path}: duplicate id {iid!r} at row {lineno}")
            seen.add(iid)
            split = rec[col["split"]].strip().lower() if has_split else "infer"
            if split not in SPLITS:
                raise ManifestRowError(lineno, f"unknown split {split!r}")
            raw_label = rec[col["label"]].strip()
            if raw_label:
                label = EventLabel.try_parse(raw_label)
                if label is None:
                    raise ManifestRowError(lineno, f"unparseable label {raw_label!r}")
            elif split == "infer":
                label = None
            else:
                raise ManifestRowError(lineno, f"missing label for split {split!r}")
            image = rec[col["image_path"]].strip() or None
            rows.append(Instance(iid, rec[col["text"]], image, label, split))
    return DatasetManifest(tuple(rows), str(path))


def write_manifest(manifest: DatasetManifest | Iterable[Instance], path: str | Path,
                   extra_columns: Mapping[str, Sequence[str]] | None = None) -> None:
    """Write instances back to CSV; ``extra_columns`` are appended per row in order."""
    rows = list(manifest.rows if isinstance(manifest, DatasetManifest) else manifest)
    extra_columns = dict(extra_columns or {})
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "text", "image_path", "label", "split", *extra_columns])
        for i, r in enumerate(rows):
            image = r.image_ref if isinstance(r.image_ref, str) else ""
            w.writerow([r.id, r.text, image, r.label.display if r.label else "", r.split,
                        *(vals[i] for vals in extra_columns.values())])


@dataclass(frozen=True)
class StatsRow:
    label: str
    test: int
    train: int
    total: int


def dataset_stats(manifest: DatasetManifest) -> list[StatsRow]:
    """Per-label test/train/total counts sorted by descending total, plus a Total row."""
    counts = Counter((r.label, r.split) for r in manifest.rows if r.label is not None)
    rows = []
    for lab in LABELS:
        te, tr = counts[(lab, "test")], counts[(lab, "train")]
        rows.append(StatsRow(lab.display, te, tr, te + tr))
    order = {lab.display: i for i, lab in enumerate(LABELS)}
    rows.sort(key=lambda r: (-r.total, order[r.label]))
    rows.append(StatsRow("Total", sum(r.test for r in rows), sum(r.train for r in rows),
                         sum(r.total for r in rows)))
    return rows


def format_stats(rows: Sequence[StatsRow]) -> str:
    width = max(len(r.label) for r in rows)
    lines = [f"{'Label':<{width}} {'Test':>5} {'Train':>5} {'Total':>5}"]
    lines += [f"{r.label:<{width}} {r.test:>5} {r.train:>5} {r.total:>5}" for r in rows]
    return "\n".join(lines)


def inverse_frequency_weights(counts: Mapping) -> dict:
    """weight(c) = N / count(c), normalized to sum to one."""
    if any(n <= 0 for n in counts.values()):
        absent = [str(k) for k, n in counts.items() if n <= 0]
        raise ConfigurationError(f"classes absent from train split: {absent}")
    total = sum(counts.values())
    raw = {c: total / n for c, n in counts.items()}
    z = sum(raw.values())
    return {c: w / z for c, w in raw.items()}


def class_weights(manifest: DatasetManifest,
                  labels: Sequence[EventLabel] | None = None) -> dict[EventLabel, float]:
    """Inverse-frequency class weights over the train split.

    ``labels`` restricts the taxonomy (e.g. for two-class toy tasks); by
    default every one of the six labels must occur in train.
    """
    labels = tuple(LABELS if labels is None else labels)
    counts = Counter(r.label for r in manifest.rows if r.split == "train")
    return inverse_frequency_weights({lab: counts.get(lab, 0) for lab in labels})
