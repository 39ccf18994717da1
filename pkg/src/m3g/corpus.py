"""Case dataset ingestion, reference weighting and the disease dictionary."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .text import normalize_label, tokenize

SPLITS = ("train", "validation", "test")
EXPECTED_COUNTS = {"train": 842, "validation": 56, "test": 100}


class DatasetError(ValueError):
    """Raised for malformed dataset files. Carries the 1-based line number."""

    def __init__(self, message: str, path: str | Path | None = None, line: int | None = None):
        self.path = str(path) if path is not None else None
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


@dataclass(frozen=True)
class ReferenceResponse:
    text: str
    author_rank: int = 0
    validation_level: int = 0
    weight: float | None = None


@dataclass(frozen=True)
class Case:
    encounter_id: str
    image_ids: tuple[str, ...]
    query_text: str = ""
    language: str = "en"
    responses: tuple[ReferenceResponse, ...] = ()
    gold_label: str | None = None

    def to_record(self) -> dict:
        rec = {
            "encounter_id": self.encounter_id,
            "image_ids": list(self.image_ids),
            "query_text": self.query_text,
            "language": self.language,
            "responses": [
                {
                    "text": r.text,
                    "author_rank": r.author_rank,
                    "validation_level": r.validation_level,
                }
                for r in self.responses
            ],
        }
        if self.gold_label is not None:
            rec["gold_label"] = self.gold_label
        return rec


def _require_int(value, name: str, path, lineno) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < 0:
        raise DatasetError(f"{name} must be a non-negative integer, got {value!r}", path, lineno)
    return value


def _parse_record(rec, split: str, path, lineno: int) -> Case:
    if not isinstance(rec, dict):
        raise DatasetError("record is not a JSON object", path, lineno)
    eid = rec.get("encounter_id")
    if not isinstance(eid, str) or not eid:
        raise DatasetError("missing encounter_id", path, lineno)
    images = rec.get("image_ids")
    if not isinstance(images, list) or not images:
        raise DatasetError(f"{eid}: image_ids missing or empty", path, lineno)
    if not all(isinstance(i, str) and i for i in images):
        raise DatasetError(f"{eid}: image_ids must be non-empty strings", path, lineno)
    query = rec.get("query_text", "")
    if not isinstance(query, str):
        raise DatasetError(f"{eid}: query_text must be a string", path, lineno)
    language = rec.get("language", "en")
    if language != "en":
        raise DatasetError(f"{eid}: unsupported language {language!r}", path, lineno)

    responses = []
    for j, r in enumerate(rec.get("responses") or []):
        if not isinstance(r, dict):
            raise DatasetError(f"{eid}: response {j} is not an object", path, lineno)
        text = r.get("text")
        if not isinstance(text, str) or not text.strip():
            raise DatasetError(f"{eid}: response {j} has empty text", path, lineno)
        responses.append(
            ReferenceResponse(
                text=text,
                author_rank=_require_int(r.get("author_rank", 0), "author_rank", path, lineno),
                validation_level=_require_int(
                    r.get("validation_level", 0), "validation_level", path, lineno
                ),
            )
        )
    if split != "test" and not responses:
        raise DatasetError(f"{eid}: {split} cases need at least one response", path, lineno)

    gold = rec.get("gold_label")
    if gold is not None and not isinstance(gold, str):
        raise DatasetError(f"{eid}: gold_label must be a string", path, lineno)

    return Case(
        encounter_id=eid,
        image_ids=tuple(images),
        query_text=query,
        language=language,
        responses=tuple(responses),
        gold_label=gold,
    )


def load_dataset(path: str | Path, split: str) -> list[Case]:
    """Parse a line-delimited JSON case file.

    Blank lines are ignored; every other line must hold one valid case.
    Any malformed line aborts the load with a ``DatasetError`` naming it.
    """
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
    path = Path(path)
    if not path.is_file():
        raise DatasetError("file not found", path)

    cases: list[Case] = []
    seen: dict[str, int] = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"invalid JSON ({exc.msg})", path, lineno) from exc
            case = _parse_record(rec, split, path, lineno)
            if case.encounter_id in seen:
                raise DatasetError(
                    f"duplicate encounter_id {case.encounter_id!r} "
                    f"(first seen on line {seen[case.encounter_id]})",
                    path,
                    lineno,
                )
            seen[case.encounter_id] = lineno
            cases.append(case)
    return cases


def write_dataset(cases: Iterable[Case], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for case in cases:
            fh.write(json.dumps(case.to_record(), ensure_ascii=False, sort_keys=True) + "\n")


def _text_key(text: str) -> tuple[str, ...]:
    return tuple(tokenize(text))


def derive_reference_weight(
    response: ReferenceResponse,
    siblings: Sequence[ReferenceResponse],
    alpha: float = 0.5,
    level_factors: Mapping[int, float] | None = None,
) -> float:
    """Weight of one reference among the responses of its case.

    Blend of seniority ``1 / (1 + author_rank)`` and consistency, the share
    of siblings with the same tokenized text relative to the most repeated
    text, mixed as ``alpha * seniority + (1 - alpha) * consistency``. An
    optional per-validation-level factor scales the result; the final value
    is clamped to [0, 1].
    """
    if not siblings:
        raise ValueError("siblings must be non-empty")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    counts = Counter(_text_key(s.text) for s in siblings)
    key = _text_key(response.text)
    if key not in counts:
        raise ValueError("response is not among its siblings")
    seniority = 1.0 / (1.0 + response.author_rank)
    consistency = counts[key] / max(counts.values())
    weight = alpha * seniority + (1.0 - alpha) * consistency
    if level_factors:
        weight *= level_factors.get(response.validation_level, 1.0)
    return min(1.0, max(0.0, weight))


def with_weights(
    case: Case, alpha: float = 0.5, level_factors: Mapping[int, float] | None = None
) -> Case:
    """Return ``case`` with every response weight derived."""
    responses = tuple(
        replace(r, weight=derive_reference_weight(r, case.responses, alpha, level_factors))
        for r in case.responses
    )
    return replace(case, responses=responses)


def attach_labels(cases: Sequence[Case], labels: Mapping[str, str]) -> list[Case]:
    """Set ``gold_label`` from an encounter_id -> label mapping."""
    return [
        replace(c, gold_label=labels[c.encounter_id]) if c.encounter_id in labels else c
        for c in cases
    ]


@dataclass(frozen=True)
class DiseaseDictionary:
    """Normalized disease names with their token sequences."""

    entries: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    @classmethod
    def from_names(cls, names: Iterable[str]) -> "DiseaseDictionary":
        entries: dict[str, tuple[str, ...]] = {}
        for name in names:
            norm = normalize_label(name)
            if norm:
                entries[norm] = tuple(tokenize(norm))
        return cls(dict(sorted(entries.items())))

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps({"entries": sorted(self.entries)}, ensure_ascii=False, indent=1) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path: str | Path) -> "DiseaseDictionary":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(data, dict) or not isinstance(data.get("entries"), list):
            raise DatasetError("dictionary file must hold an 'entries' list", path)
        return cls.from_names(data["entries"])


def build_disease_dictionary(cases: Iterable[Case]) -> DiseaseDictionary:
    labels = [c.gold_label for c in cases if c.gold_label]
    if not labels:
        raise DatasetError(
            "no case carries a gold_label; run label extraction before building the dictionary"
        )
    return DiseaseDictionary.from_names(labels)


def summarize(cases: Sequence[Case], split: str, alpha: float = 0.5) -> dict:
    """Counts and weight statistics for the ``ingest --report`` output."""
    n_resp = sum(len(c.responses) for c in cases)
    weights = [r.weight for c in cases for r in with_weights(c, alpha).responses]
    return {
        "split": split,
        "cases": len(cases),
        "expected_cases": EXPECTED_COUNTS[split],
        "images": sum(len(c.image_ids) for c in cases),
        "responses": n_resp,
        "labelled": sum(1 for c in cases if c.gold_label),
        "with_query": sum(1 for c in cases if c.query_text.strip()),
        "mean_weight": math.fsum(weights) / len(weights) if weights else None,
    }
