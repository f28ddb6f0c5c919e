"""Answer extraction from generative output and error categorization."""
from __future__ import annotations

import enum
import json
import re
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..core import LABELS, EventLabel
from ..errors import ContractError


class Outcome(enum.Enum):
    clean = "clean"
    recovered = "recovered"
    unparseable = "unparseable"


class ErrorCategory(enum.Enum):
    ImageCueError = "image-cue error"
    TextMisinterpretation = "text misinterpretation"
    UndefinedClass = "undefined class"
    InformationFabrication = "information fabrication"


@dataclass(frozen=True)
class GenerationResult:
    raw_text: str
    parsed_label: EventLabel | None
    outcome: Outcome
    error_category: ErrorCategory | None = None
    tier: int = 0
    delivery_error: str | None = None

    def to_dict(self) -> dict:
        return {
            "raw_text": self.raw_text,
            "parsed_label": self.parsed_label.display if self.parsed_label else None,
            "outcome": self.outcome.value,
            "error_category": self.error_category.value if self.error_category else None,
            "tier": self.tier,
            "delivery_error": self.delivery_error,
        }


# surface forms accepted when a label is mentioned in free text
_MENTIONS = {
    EventLabel.NonDamage: r"non[\s_-]?damage",
    EventLabel.DamagedInfrastructure: r"damaged[\s_-]+infrastructure",
    EventLabel.DamagedNature: r"damaged[\s_-]+nature",
    EventLabel.Flood: r"flood(?:s|ed|ing)?",
    EventLabel.Fires: r"fires?",
    EventLabel.HumanDamage: r"human[\s_-]+damage",
}
_MENTION_RES = {lab: re.compile(rf"\b{pat}\b", re.IGNORECASE) for lab, pat in _MENTIONS.items()}

# a value sitting where the answer should be: `event_class: X`, `"event_class": "X"`, `Event: X`
_ANSWER_SLOT = re.compile(
    r"""(?:["']?event[_ ]?class["']?|^\s*event)\s*[:=]\s*["']?([A-Za-z][A-Za-z _-]*[A-Za-z])""",
    re.IGNORECASE | re.MULTILINE,
)


# an empty slot is an abstention, not an out-of-taxonomy class
_NO_ANSWER = {"null", "none", ""}


def _json_objects(text: str):
    decoder = json.JSONDecoder()
    for m in re.finditer(r"\{", text):
        try:
            obj, _ = decoder.raw_decode(text, m.start())
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            yield obj


def _slot_value(obj: dict):
    v = obj.get("event_class")
    return v if isinstance(v, str) else None


def parse_output(raw: str) -> GenerationResult:
    """Map raw generative text to a label through five mutually exclusive tiers.

    1. the whole output is a JSON object whose ``event_class`` is a valid label: clean
    2. such an object is embedded in surrounding text: recovered
    3. exactly one label is mentioned in the prose: recovered, information fabrication
    4. an out-of-taxonomy value sits in the answer slot: unparseable, undefined class
    5. anything else: unparseable, information fabrication
    """
    raw = raw if isinstance(raw, str) else ("" if raw is None else str(raw))

    try:
        whole = json.loads(raw.strip())
    except (json.JSONDecodeError, ValueError):
        whole = None
    if isinstance(whole, dict):
        label = EventLabel.try_parse(_slot_value(whole) or "")
        if label is not None:
            return GenerationResult(raw, label, Outcome.clean, None, 1)

    objects = list(_json_objects(raw))
    for obj in objects:
        label = EventLabel.try_parse(_slot_value(obj) or "")
        if label is not None:
            return GenerationResult(raw, label, Outcome.recovered, None, 2)

    mentioned = [lab for lab in LABELS if _MENTION_RES[lab].search(raw)]
    if len(mentioned) == 1:
        return GenerationResult(raw, mentioned[0], Outcome.recovered,
                                ErrorCategory.InformationFabrication, 3)

    slot_values = [_slot_value(o) for o in objects if _slot_value(o)]
    slot_values += [m.group(1) for m in _ANSWER_SLOT.finditer(raw)]
    slot_values = [v for v in slot_values if v.strip().lower() not in _NO_ANSWER]
    if any(EventLabel.try_parse(v) is None for v in slot_values):
        return GenerationResult(raw, None, Outcome.unparseable, ErrorCategory.UndefinedClass, 4)

    return GenerationResult(raw, None, Outcome.unparseable, ErrorCategory.InformationFabrication, 5)


def delivery_failure(message: str) -> GenerationResult:
    """Placeholder result for a request that never produced output."""
    return GenerationResult("", None, Outcome.unparseable, None, 0, message)


_STOPWORDS = frozenset("""
a an the and or but if of at by for with about to from in on off out over under up down
is are was were be been being am do does did have has had this that these those it its
i me my we our you your he him his she her they them their what which who whom here there
rt via so just very too not no yes ok oh lol amp http https
""".split())


def text_informative(text: str | None) -> bool:
    """Heuristic modality evidence: text is uninformative when missing, under 3 tokens, or all stopwords."""
    if not text:
        return False
    tokens = re.findall(r"[a-z0-9']+", text.lower())
    if len(tokens) < 3:
        return False
    return any(t not in _STOPWORDS for t in tokens)


@dataclass(frozen=True)
class ErrorHistogram:
    counts: dict[ErrorCategory, int]
    sample_size: int
    available: int

    def percentages(self) -> dict[ErrorCategory, float]:
        if not self.sample_size:
            return {c: 0.0 for c in ErrorCategory}
        return {c: 100.0 * self.counts[c] / self.sample_size for c in ErrorCategory}

    def to_dict(self) -> dict:
        pct = self.percentages()
        return {"sample_size": self.sample_size, "available_errors": self.available,
                "counts": {c.value: self.counts[c] for c in ErrorCategory},
                "percent": {c.value: pct[c] for c in ErrorCategory}}


def is_error(result: GenerationResult, gold: EventLabel) -> bool:
    return result.outcome is Outcome.unparseable or result.parsed_label != gold


def categorize(result: GenerationResult, text_is_informative: bool) -> ErrorCategory:
    if result.error_category in (ErrorCategory.UndefinedClass, ErrorCategory.InformationFabrication):
        return result.error_category
    return (ErrorCategory.TextMisinterpretation if text_is_informative
            else ErrorCategory.ImageCueError)


def categorize_errors(results: Sequence[tuple[GenerationResult, EventLabel, bool]],
                      sample_size: int, seed: int = 0) -> ErrorHistogram:
    """Sample ``sample_size`` erroneous predictions without replacement and bucket them.

    Each entry is ``(result, gold, text_is_informative)``. Parse-level
    categories are kept; wrong but well-formed answers become image-cue errors
    when the text carried no usable evidence and text misinterpretations
    otherwise.
    """
    errors = [(r, informative) for r, gold, informative in results if is_error(r, gold)]
    if sample_size < 0 or sample_size > len(errors):
        raise ContractError(f"asked for {sample_size} erroneous predictions, "
                            f"only {len(errors)} available")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(errors), size=sample_size, replace=False) if sample_size else []
    counts = Counter(categorize(*errors[i]) for i in idx)
    return ErrorHistogram({c: counts.get(c, 0) for c in ErrorCategory}, sample_size, len(errors))
