"""Tokenization and label normalization shared by the corpus, the
post-processor and the evaluator."""

from __future__ import annotations

import re
import unicodedata

_WS = re.compile(r"\s+")
_PAREN_SUFFIX = re.compile(r"\s*\([^()]*\)\s*$")
_TRAILING_PUNCT = re.compile(r"[\s.,;:!?]+$")


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def tokenize(text: str) -> list[str]:
    """Split ``text`` into evaluation tokens.

    NFC-normalizes, lowercases, isolates every Unicode punctuation character
    (general category ``P*``) as its own token and splits on whitespace.

    >>> tokenize("It is hand eczema.")
    ['it', 'is', 'hand', 'eczema', '.']
    >>> tokenize("tinea(scalp)")
    ['tinea', '(', 'scalp', ')']
    """
    text = unicodedata.normalize("NFC", text).lower()
    spaced = "".join(f" {ch} " if _is_punct(ch) else ch for ch in text)
    return spaced.split()


def normalize_label(label: str) -> str:
    """Canonical form of a disease name.

    NFC, lowercase, trimmed, internal whitespace collapsed, parenthesized
    suffixes and trailing punctuation removed.
    """
    out = unicodedata.normalize("NFC", label).lower().strip()
    out = _WS.sub(" ", out)
    prev = None
    while prev != out:
        prev = out
        out = _PAREN_SUFFIX.sub("", out)
        out = _TRAILING_PUNCT.sub("", out)
    return out.strip()
