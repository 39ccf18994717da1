"""Weighted multi-reference BLEU (deltaBLEU-style) at corpus level.

Each reference carries a weight in [0, 1]. A hypothesis n-gram is credited
with the best weighted clipped count over the references of its case, and
the denominator charges every hypothesis n-gram at the case's largest
reference weight. With unit weights and a single reference per case this is
ordinary corpus BLEU-4 with closest-reference brevity penalty.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

from .corpus import Case, with_weights
from .text import tokenize

SMOOTHING_EPS = 1e-9

WeightedReferences = Sequence[tuple[Sequence[str], float]]


@dataclass(frozen=True)
class EvalReport:
    dbleu: float
    bp: float
    ratio: float
    hyp_len: int
    ref_len: int
    precisions: tuple[float, ...]

    def as_dict(self) -> dict:
        out = asdict(self)
        out["precisions"] = list(self.precisions)
        return out

    def table_row(self, name: str = "") -> str:
        cells = [f"{self.dbleu:.3f}", f"{self.bp:.3f}", f"{self.ratio:.3f}", str(self.hyp_len), str(self.ref_len)]
        return "\t".join([name, *cells] if name else cells)


TABLE_HEADER = ("dBLEU", "BP", "Ratio", "Hyp_len", "Ref_len")


def brevity_penalty(hyp_len: int, ref_len: int) -> float:
    if hyp_len < 1 or ref_len < 1:
        raise ValueError("brevity penalty needs positive lengths")
    if hyp_len > ref_len:
        return 1.0
    return math.exp(1.0 - ref_len / hyp_len)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def effective_ref_length(hyp_len: int, ref_lengths: Sequence[int]) -> int:
    """Reference length closest to the hypothesis; ties go to the shorter."""
    return min(ref_lengths, key=lambda r: (abs(r - hyp_len), r))


def delta_bleu(
    predictions: Sequence[Sequence[str]],
    references: Sequence[WeightedReferences],
    max_n: int = 4,
    smoothing: bool = False,
) -> EvalReport:
    if len(predictions) != len(references):
        raise ValueError(f"{len(predictions)} predictions for {len(references)} reference sets")
    num = [[] for _ in range(max_n)]
    den = [[] for _ in range(max_n)]
    hyp_len = 0
    ref_len = 0
    for hyp, refs in zip(predictions, references):
        if not refs:
            raise ValueError("every case needs at least one reference")
        weights = [min(1.0, max(0.0, float(w))) for _, w in refs]
        max_w = max(weights)
        hyp_len += len(hyp)
        ref_len += effective_ref_length(len(hyp), [len(r) for r, _ in refs])
        for n in range(1, max_n + 1):
            hyp_counts = _ngrams(hyp, n)
            if not hyp_counts:
                continue
            ref_counts = [_ngrams(r, n) for r, _ in refs]
            for gram, count in hyp_counts.items():
                credit = max(
                    (w * min(count, rc[gram]) for rc, w in zip(ref_counts, weights) if gram in rc),
                    default=0.0,
                )
                num[n - 1].append(credit)
                den[n - 1].append(max_w * count)

    precisions = []
    for n in range(max_n):
        numer, denom = math.fsum(num[n]), math.fsum(den[n])
        p = numer / denom if denom > 0 else 0.0
        if p == 0.0 and smoothing:
            p = SMOOTHING_EPS / denom if denom > 0 else SMOOTHING_EPS
        precisions.append(p)

    if hyp_len == 0 or ref_len == 0:
        return EvalReport(0.0, 0.0, 0.0, hyp_len, ref_len, tuple(precisions))
    bp = brevity_penalty(hyp_len, ref_len)
    if min(precisions) <= 0.0:
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(math.fsum(math.log(p) for p in precisions) / max_n)
    return EvalReport(score, bp, hyp_len / ref_len, hyp_len, ref_len, tuple(precisions))


def case_references(case: Case, alpha: float = 0.5, level_factors=None) -> list[tuple[list[str], float]]:
    weighted = with_weights(case, alpha, level_factors)
    return [(tokenize(r.text), r.weight) for r in weighted.responses]


def evaluate_cases(
    responses: Sequence[str],
    cases: Sequence[Case],
    alpha: float = 0.5,
    smoothing: bool = False,
    level_factors=None,
) -> EvalReport:
    """Score response strings against the weighted responses of ``cases``."""
    return delta_bleu(
        [tokenize(r) for r in responses],
        [case_references(c, alpha, level_factors) for c in cases],
        smoothing=smoothing,
    )
