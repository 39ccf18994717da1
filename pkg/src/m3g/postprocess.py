"""Sentence templating and dictionary word-match override."""

from __future__ import annotations

from dataclasses import dataclass

from .corpus import Case, DiseaseDictionary
from .text import tokenize


@dataclass(frozen=True)
class PostprocessConfig:
    sentence_structure: bool = True
    word_matching: bool = True
    match_mode: str = "token"

    def __post_init__(self):
        if self.match_mode not in ("token", "substring"):
            raise ValueError(f"match_mode must be 'token' or 'substring', got {self.match_mode!r}")


def _find(haystack: list[str] | str, needle, mode: str) -> int:
    if mode == "substring":
        return haystack.find(needle)
    n = len(needle)
    for i in range(len(haystack) - n + 1):
        if tuple(haystack[i : i + n]) == needle:
            return i
    return -1


def word_match_override(
    query_text: str,
    dictionary: DiseaseDictionary,
    current_label: str,
    mode: str = "token",
) -> str:
    """Replace the label with a dictionary disease named in the query.

    Among matches the longest entry wins, then the earliest occurrence, then
    the lexicographically smallest. Negations in the query are not
    considered.
    """
    if mode == "token":
        haystack = tokenize(query_text)
    elif mode == "substring":
        haystack = " ".join(tokenize(query_text))
    else:
        raise ValueError(f"unknown match mode {mode!r}")

    best = None
    for name, tokens in dictionary.entries.items():
        if not tokens:
            continue
        needle = tokens if mode == "token" else " ".join(tokens)
        pos = _find(haystack, needle, mode)
        if pos < 0:
            continue
        key = (-len(needle), pos, name)
        if best is None or key < best[0]:
            best = (key, name)
    return best[1] if best else current_label


def format_sentence(label: str) -> str:
    """``It is <label>.`` with exactly one closing period."""
    body = label.strip().rstrip(".").rstrip()
    if not body:
        raise ValueError("cannot format an empty label")
    return f"It is {body}."


def postprocess(
    prediction: str, case: Case, dictionary: DiseaseDictionary | None, cfg: PostprocessConfig
) -> str:
    if not prediction.strip():
        raise ValueError(f"{case.encounter_id}: empty prediction")
    label = prediction
    if cfg.word_matching:
        if dictionary is None:
            raise ValueError("word matching needs a disease dictionary")
        label = word_match_override(case.query_text, dictionary, label, cfg.match_mode)
    if cfg.sentence_structure:
        return format_sentence(label)
    return label
