"""Five-shot prompt assembly for generative event classifiers."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..core import LABELS, DatasetManifest, EventLabel, ImageRef, Instance
from ..errors import ContractError

MODES = ("text-only", "image-only", "multimodal")
N_EXEMPLARS = 5

CLASS_DEFINITIONS = {
    EventLabel.NonDamage: "no disaster damage is shown or described",
    EventLabel.DamagedInfrastructure: "damage to buildings, roads, bridges or other man-made structures",
    EventLabel.DamagedNature: "damage to trees, land, vegetation or other natural surroundings",
    EventLabel.Flood: "flooding or standing water caused by a disaster",
    EventLabel.Fires: "fire, wildfire or smoke from burning",
    EventLabel.HumanDamage: "injured, trapped, displaced or deceased people",
}

DEFAULT_INSTRUCTION = (
    "You are an expert in disaster response. Each post below pairs a tweet with an image. "
    "Classify the disaster event the post reports into exactly one of the following classes.\n"
    + "\n".join(f"- {lab.display}: {d}" for lab, d in CLASS_DEFINITIONS.items())
)

OUTPUT_SCHEMA = {
    "type": "object",
    "properties": {"event_class": {"type": "string", "enum": [lab.display for lab in LABELS]}},
    "required": ["event_class"],
}
OUTPUT_DIRECTIVE = 'Respond with JSON: {"event_class": "<one of 6 labels>"}'


@dataclass(frozen=True)
class Exemplar:
    image_ref: ImageRef
    text: str | None
    label: EventLabel


@dataclass(frozen=True)
class TestInstance:
    text: str | None = None
    image_ref: ImageRef = None

    __test__ = False  # keep pytest from collecting this class


def _escape(text: str) -> str:
    # injective single-line rendering
    return text.replace("\\", "\\\\").replace("\r", "\\r").replace("\n", "\\n")


def _needs(mode: str) -> tuple[bool, bool]:
    """(needs text, needs image) for a modality mode."""
    return mode != "image-only", mode != "text-only"


@dataclass(frozen=True)
class PromptBundle:
    task_instruction: str
    exemplars: tuple[Exemplar, ...]
    test_instance: TestInstance
    modality_mode: str
    output_schema: dict = field(default_factory=lambda: dict(OUTPUT_SCHEMA))

    @property
    def attachments(self) -> list[ImageRef]:
        """Images in the order their ``<attachment-k>`` markers appear."""
        if not _needs(self.modality_mode)[1]:
            return []
        return [e.image_ref for e in self.exemplars] + [self.test_instance.image_ref]

    def serialize(self) -> str:
        want_text, want_image = _needs(self.modality_mode)
        parts = [self.task_instruction.strip(), ""]
        k = 0

        def block(title, text, label):
            nonlocal k
            lines = [title]
            if want_text:
                lines.append(f"Text: {_escape(text)}")
            if want_image:
                k += 1
                lines.append(f"Image: <attachment-{k}>")
            lines.append(f"Event: {label.display}" if label else "Event:")
            return lines + [""]

        for i, ex in enumerate(self.exemplars, start=1):
            parts += block(f"Example {i}", ex.text, ex.label)
        parts += block("Test", self.test_instance.text, None)
        parts.append(OUTPUT_DIRECTIVE)
        return "\n".join(parts) + "\n"

    @property
    def sha256(self) -> str:
        h = hashlib.sha256(self.serialize().encode("utf-8"))
        for ref in self.attachments:
            h.update(b"\0")
            h.update(ref if isinstance(ref, bytes) else str(ref).encode("utf-8"))
        return h.hexdigest()


def build_prompt(instruction: str, exemplars: Sequence[Exemplar | tuple], test: TestInstance,
                 mode: str = "multimodal") -> PromptBundle:
    """Validate inputs and assemble a :class:`PromptBundle`; ``bundle.serialize()`` gives the text.

    Exemplars may be :class:`Exemplar` or ``(image_ref, text, label)`` tuples.
    Every exemplar must carry the modalities the mode uses, and the test
    instance must carry exactly those modalities.
    """
    if mode not in MODES:
        raise ContractError(f"mode must be one of {MODES}, got {mode!r}")
    exemplars = tuple(e if isinstance(e, Exemplar) else Exemplar(*e) for e in exemplars)
    if len(exemplars) != N_EXEMPLARS:
        raise ContractError(f"expected exactly {N_EXEMPLARS} exemplars, got {len(exemplars)}")
    want_text, want_image = _needs(mode)
    for i, ex in enumerate(exemplars, start=1):
        if not isinstance(ex.label, EventLabel):
            raise ContractError(f"exemplar {i} needs an EventLabel")
        if want_text and ex.text is None:
            raise ContractError(f"exemplar {i} has no text but mode is {mode}")
        if want_image and ex.image_ref is None:
            raise ContractError(f"exemplar {i} has no image but mode is {mode}")
    has_text, has_image = test.text is not None, test.image_ref is not None
    if (has_text, has_image) != (want_text, want_image):
        raise ContractError(f"test instance modalities (text={has_text}, image={has_image}) "
                            f"do not match mode {mode}")
    return PromptBundle(instruction, exemplars, test, mode)


def query_for_mode(instance: Instance, mode: str, image_ref: ImageRef = None) -> TestInstance:
    """Project an instance onto the modalities a mode uses."""
    want_text, want_image = _needs(mode)
    return TestInstance(instance.text if want_text else None,
                        (image_ref if image_ref is not None else instance.image_ref)
                        if want_image else None)


def select_exemplars(manifest: DatasetManifest, seed: int, mode: str = "multimodal",
                     k: int = N_EXEMPLARS) -> list[Exemplar]:
    """One seeded exemplar from each of the ``k`` most frequent train labels.

    Labels are ranked by train count (ties by taxonomy order) and the chosen
    exemplars are emitted in taxonomy order. Only rows that carry the
    modalities the mode needs are eligible. If fewer than ``k`` labels are
    available the remainder is filled from the unused rows.
    """
    want_text, want_image = _needs(mode)
    rows = [r for r in manifest.split("train")
            if (not want_image or r.image_ref is not None) and (not want_text or r.text)]
    if len(rows) < k:
        raise ContractError(f"need {k} eligible train rows for exemplars, found {len(rows)}")
    rng = np.random.default_rng(seed)
    by_label: dict = {}
    for r in rows:
        by_label.setdefault(r.label, []).append(r)
    ranked = sorted(by_label, key=lambda lab: (-len(by_label[lab]), lab.index))
    chosen = [by_label[lab][int(rng.integers(len(by_label[lab])))] for lab in ranked[:k]]
    if len(chosen) < k:
        rest = [r for r in rows if r not in chosen]
        chosen += [rest[i] for i in rng.choice(len(rest), size=k - len(chosen), replace=False)]
    chosen.sort(key=lambda r: (r.label.index, r.id))
    return [Exemplar(manifest.resolve_image(r) if want_image else None,
                     r.text if want_text else None, r.label) for r in chosen]
