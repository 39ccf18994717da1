"""Nearest-neighbour classification in the joint space, with optional PCA."""

from __future__ import annotations

import csv
import hashlib
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import Case
from .embeddings import EmbeddingMatrix, get_vector
from .joint import JointEmbeddingModel, project_batch

MODALITIES = ("image_image", "image_text")


class RetrievalError(ValueError):
    pass


@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (n_components, dim), orthonormal rows
    explained_variance: np.ndarray

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.components.T


def fit_pca(reference: EmbeddingMatrix | np.ndarray, n_components: int) -> PcaModel:
    """Principal axes of the mean-centred rows, by descending variance.

    Variances use the unbiased (n - 1) normalization. Each component is
    signed so that its largest-magnitude entry is positive.
    """
    x = reference.data if isinstance(reference, EmbeddingMatrix) else reference
    x = np.asarray(x, dtype=np.float64)
    n, dim = x.shape
    if n_components < 1:
        raise RetrievalError("n_components must be at least 1")
    if n_components > min(n, dim):
        raise RetrievalError(
            f"n_components={n_components} exceeds feasible rank min(rows={n}, dim={dim})"
        )
    mean = x.mean(axis=0)
    centred = x - mean
    # SVD of the centred data gives the covariance eigenvectors without forming
    # the dim x dim covariance.
    _, s, vt = np.linalg.svd(centred, full_matrices=False)
    denom = max(n - 1, 1)
    var = s**2 / denom
    comps = vt[:n_components].copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1
    return PcaModel(mean, comps, var[:n_components].copy())


def knn(
    query: np.ndarray,
    reference: EmbeddingMatrix,
    k: int,
    metric: str = "cosine",
) -> list[tuple[str, float]]:
    """Exact top-k by full scan.

    Cosine results are sorted by descending similarity, Euclidean by
    ascending distance; equal scores fall back to lexicographic id order.
    """
    q = np.asarray(query, dtype=np.float64)
    ref = np.asarray(reference.data, dtype=np.float64)
    if q.shape != (ref.shape[1],):
        raise RetrievalError(f"query has shape {q.shape}, reference dim is {ref.shape[1]}")
    if not 1 <= k <= len(reference):
        raise RetrievalError(f"k={k} outside [1, {len(reference)}]")
    if metric == "cosine":
        qn = np.linalg.norm(q)
        rn = np.linalg.norm(ref, axis=1)
        if qn == 0 or np.any(rn == 0):
            raise RetrievalError("cosine similarity undefined for zero vectors")
        scores = (ref @ q) / (rn * qn)
        primary = -scores
    elif metric == "euclidean":
        scores = np.sqrt(np.sum((ref - q) ** 2, axis=1))
        primary = scores
    else:
        raise RetrievalError(f"unknown metric {metric!r}")
    ids = np.array(reference.ids)
    order = np.lexsort((ids, primary))[:k]
    return [(reference.ids[i], float(scores[i])) for i in order]


@dataclass(frozen=True)
class RetrievalConfig:
    k: int = 5
    modality: str = "image_image"
    pca: bool = False
    pca_components: int = 50
    use_augmented_variants: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise RetrievalError("k must be at least 1")
        if self.modality not in MODALITIES:
            raise RetrievalError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if self.pca and self.pca_components < 1:
            raise RetrievalError("pca_components must be at least 1")

    @property
    def metric(self) -> str:
        return "euclidean" if self.pca else "cosine"


def _stable_seed(*parts: str | int) -> list[int]:
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


class NearestNeighbourClassifier:
    """Projects the labelled reference side once and classifies cases against it.

    ``labels`` maps reference ids to disease labels: image ids for
    ``image_image`` retrieval, text ids for ``image_text``. Reference rows are
    the labelled base ids present in the matrix selected by the modality.
    Case images are looked up in ``query_images`` (defaults to
    ``reference_images``).
    """

    def __init__(
        self,
        model: JointEmbeddingModel,
        reference_images: EmbeddingMatrix,
        reference_texts: EmbeddingMatrix | None,
        labels: Mapping[str, str],
        cfg: RetrievalConfig,
        query_images: EmbeddingMatrix | None = None,
    ):
        self.model = model
        self.cfg = cfg
        self.query_images = query_images if query_images is not None else reference_images
        if cfg.modality == "image_image":
            source, head = reference_images, model.image_head
        else:
            if reference_texts is None:
                raise RetrievalError("image_text retrieval needs reference text embeddings")
            source, head = reference_texts, model.text_head
        ref_ids = sorted(i for i in source.base_ids() if i in labels)
        if not ref_ids:
            raise RetrievalError("empty reference: no labelled ids in the reference matrix")
        self.labels = {i: labels[i] for i in ref_ids}
        projected = project_batch(head, source.rows(ref_ids))
        self.pca = None
        if cfg.pca:
            if cfg.pca_components > min(projected.shape):
                raise RetrievalError(
                    f"pca_components={cfg.pca_components} exceeds reference "
                    f"count {projected.shape[0]} or dim {projected.shape[1]}"
                )
            self.pca = fit_pca(projected, cfg.pca_components)
            projected = self.pca.transform(projected)
        self.reference = EmbeddingMatrix(ref_ids, projected)
        self.k = min(cfg.k, len(ref_ids))

    def _query_vectors(self, case: Case) -> np.ndarray:
        missing = [
            i for i in case.image_ids
            if i not in self.query_images or i in self.query_images.variant_of
        ]
        if missing:
            raise RetrievalError(f"{case.encounter_id}: unresolvable image ids {missing}")
        rows = []
        for image_id in case.image_ids:
            if self.cfg.use_augmented_variants:
                rng = np.random.default_rng(
                    _stable_seed(self.cfg.seed, case.encounter_id, image_id)
                )
                rows.append(get_vector(self.query_images, image_id, rng=rng))
            else:
                rows.append(get_vector(self.query_images, image_id))
        out = project_batch(self.model.image_head, np.stack(rows))
        return self.pca.transform(out) if self.pca is not None else out

    def neighbours(self, case: Case) -> list[list[tuple[str, float]]]:
        return [
            knn(q, self.reference, self.k, self.cfg.metric) for q in self._query_vectors(case)
        ]

    def classify(self, case: Case) -> str:
        """Most frequent label among all retrieved neighbours of the case's images.

        Ties go to the label owning the single closest neighbour, then to
        the lexicographically smallest label.
        """
        counts: Counter[str] = Counter()
        best: dict[str, float] = {}
        sign = 1.0 if self.cfg.metric == "cosine" else -1.0
        for hits in self.neighbours(case):
            for ref_id, score in hits:
                label = self.labels[ref_id]
                counts[label] += 1
                best[label] = max(best.get(label, -np.inf), sign * score)
        return pool_labels(counts, best)


def pool_labels(counts: Mapping[str, int], best: Mapping[str, float]) -> str:
    """Majority label; ``best`` holds each label's strongest score (higher wins)."""
    if not counts:
        raise RetrievalError("no labels to pool")
    return min(counts, key=lambda lab: (-counts[lab], -best[lab], lab))


def classify_case(
    case: Case,
    model: JointEmbeddingModel,
    reference_images: EmbeddingMatrix,
    reference_texts: EmbeddingMatrix | None,
    labels: Mapping[str, str],
    cfg: RetrievalConfig,
    query_images: EmbeddingMatrix | None = None,
) -> str:
    clf = NearestNeighbourClassifier(
        model, reference_images, reference_texts, labels, cfg, query_images
    )
    return clf.classify(case)


def export_pca_coordinates(
    embeddings: EmbeddingMatrix, n_components: int = 2
) -> tuple[list[str], np.ndarray, PcaModel]:
    """Fit PCA on the base rows and return their coordinates."""
    ids = embeddings.base_ids()
    if len(ids) < 2:
        raise RetrievalError("need at least two rows for PCA coordinates")
    if len(ids) < n_components:
        raise RetrievalError(f"{len(ids)} rows is fewer than {n_components} components")
    x = embeddings.rows(ids)
    pca = fit_pca(x, n_components)
    return ids, pca.transform(x), pca


def write_coordinates(ids: Sequence[str], coords: np.ndarray, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", *[f"pc{i + 1}" for i in range(coords.shape[1])]])
        for key, row in zip(ids, coords):
            writer.writerow([key, *[repr(float(v)) for v in row]])
