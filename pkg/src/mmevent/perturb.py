"""Deterministic social-media noise: leetspeak, elongation, typos and capitalization noise.

Which words (or characters, for caps noise) get transformed is decided by a
seeded hash of ``(seed, kind, site index)`` compared against the intensity, so
the sites transformed at a lower intensity are always a subset of those at a
higher one.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Mapping

KINDS = ("leetspeak", "elongation", "typo", "caps_noise")
# reserved, never implemented: needs a bilingual lexicon
RESERVED_KINDS = ("code_mixing",)

LEET_TABLE: Mapping[str, str] = {"a": "4", "e": "3", "i": "!", "o": "0", "s": "5", "t": "7"}
LEET_WORDS: Mapping[str, str] = {"great": "gr8"}
VOWELS = "aeiou"

_WORD = re.compile(r"[A-Za-z]+(?:'[A-Za-z]+)*")
_TERMINAL = re.compile(r"[.!?]*")


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str
    intensity: float = 1.0
    seed: int = 0
    leet_chars: str | None = None  # restrict the leet table to these source letters

    def __post_init__(self):
        if self.kind in RESERVED_KINDS:
            raise NotImplementedError(f"{self.kind} perturbation is not available")
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not 0.0 <= self.intensity <= 1.0:
            raise ValueError("intensity must lie in [0, 1]")

    def describe(self) -> str:
        extra = f":chars={self.leet_chars}" if self.leet_chars is not None else ""
        return f"{self.kind}:{self.intensity:g}:seed={self.seed}{extra}"


def _site_score(seed: int, kind: str, index: int) -> float:
    digest = hashlib.sha256(f"{seed}:{kind}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "big") / 2.0 ** 64


def selected(spec: PerturbationSpec, index: int) -> bool:
    return _site_score(spec.seed, spec.kind, index) < spec.intensity


def _leet(word: str, table: Mapping[str, str]) -> str:
    special = LEET_WORDS.get(word.lower())
    if special is not None:
        return special
    return "".join(table.get(ch.lower(), ch) for ch in word)


def _elongate(word: str) -> str | None:
    for i, ch in enumerate(word):
        if ch.lower() in VOWELS:
            return word[:i] + ch * 3 + word[i + 1:]
    return None


def _swap(word: str, seed: int, index: int) -> str:
    pos = int(_site_score(seed, "typo-pos", index) * (len(word) - 1))
    return word[:pos] + word[pos + 1] + word[pos] + word[pos + 2:]


def _sentence_final(text: str, end: int) -> tuple[bool, int]:
    """Whether the word ending at ``end`` closes a sentence, and where its terminal punctuation ends."""
    stop = _TERMINAL.match(text, end).end()
    if stop == len(text):
        return True, stop
    return stop > end and text[stop].isspace(), stop


def perturb(text: str, spec: PerturbationSpec) -> str:
    if spec.intensity == 0.0 or not text:
        return text

    if spec.kind == "caps_noise":
        out, k = [], 0
        for ch in text:
            if ch.isalpha():
                if selected(spec, k):
                    ch = ch.lower() if ch.isupper() else ch.upper()
                k += 1
            out.append(ch)
        return "".join(out)

    table = LEET_TABLE if spec.leet_chars is None else \
        {c: s for c, s in LEET_TABLE.items() if c in spec.leet_chars}
    out, pos = [], 0
    for k, m in enumerate(_WORD.finditer(text)):
        word, new, resume = m.group(), None, m.end()
        if selected(spec, k):
            if spec.kind == "leetspeak":
                new = _leet(word, table)
            elif spec.kind == "typo" and len(word) >= 2:
                new = _swap(word, spec.seed, k)
            elif spec.kind == "elongation":
                new = _elongate(word)
                final, stop = _sentence_final(text, m.end())
                if new is not None and final:
                    new, resume = new + "!!!", stop
        out.append(text[pos:m.start()])
        out.append(word if new is None else new)
        pos = resume
    out.append(text[pos:])
    return "".join(out)


# --- reference denoiser ----------------------------------------------------------

@lru_cache(maxsize=1)
def lexicon() -> frozenset[str]:
    """Bundled list of the 10k most frequent English words."""
    data = resources.files("mmevent").joinpath("data/words_en_10k.txt").read_text("utf-8")
    return frozenset(w.strip() for w in data.split() if w.strip())


_INVERSE_LEET = {v: k for k, v in LEET_TABLE.items()}
_INVERSE_WORDS = {v: k for k, v in LEET_WORDS.items()}
_TOKEN = re.compile(r"^([\"'(\[]*)(.*?)([.!?,;:\"')\]]*)$", re.DOTALL)
_REPEAT_LETTER = re.compile(r"([a-z])\1{2,}")
_REPEAT_PUNCT = re.compile(r"([.!?])\1+")


def _collapse(word: str) -> str:
    return _REPEAT_LETTER.sub(r"\1", word)


def _deleet(core: str) -> str:
    if core in _INVERSE_WORDS:
        return _INVERSE_WORDS[core]
    if not any(ch in _INVERSE_LEET for ch in core) or not any(ch.isalpha() for ch in core):
        return core
    words = lexicon()
    candidate = _collapse("".join(_INVERSE_LEET.get(ch, ch) for ch in core))
    return candidate if candidate in words else core


def denoise_reference(text: str) -> str:
    """Best-effort normalization of noisy text toward its clean lowercase form.

    Inverts the leet table when the result is a known word, collapses runs of
    three or more identical letters, squeezes repeated terminal punctuation and
    lowercases everything.
    """
    out = []
    for token in re.split(r"(\s+)", text.lower()):
        if not token or token.isspace():
            out.append(token)
            continue
        lead, core, trail = _TOKEN.match(token).groups()
        # a single "!" at the end may be a leet "i" rather than punctuation
        if trail.startswith("!") and core and _deleet(core + "!") != core + "!" \
                and _deleet(core) == core:
            core, trail = core + "!", trail[1:]
        core = _collapse(_deleet(core))
        out.append(lead + core + _REPEAT_PUNCT.sub(r"\1", trail))
    return "".join(out)
