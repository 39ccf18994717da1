"""Dense vector storage: JSON manifest plus a raw little-endian float32 blob.

Manifest fields::

    {"ids": [...], "dim": 2048, "blob": "features.f32", "crc32": 123,
     "variant_of": {"img1@aug0": "img1"}}

Variant rows are stored alongside base rows; ``variant_of`` maps each
variant id to the base id it augments.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

IMAGE_DIM = 2048
TEXT_DIM = 3072
PROJECTION_DIM = 256

_BLOB_DTYPE = np.dtype("<f4")


class EmbeddingError(ValueError):
    pass


@dataclass
class EmbeddingMatrix:
    """Id-indexed rows of equal dimension.

    Imported data is float32; in-memory matrices built from computed
    projections may hold float64.
    """

    ids: list[str]
    data: np.ndarray
    variant_of: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.ids = list(self.ids)
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise EmbeddingError(f"data must be 2-D, got shape {self.data.shape}")
        if not self.ids:
            raise EmbeddingError("matrix needs at least one id")
        if len(self.ids) != self.data.shape[0]:
            raise EmbeddingError(f"{len(self.ids)} ids for {self.data.shape[0]} rows")
        if self.data.shape[1] < 1:
            raise EmbeddingError("dim must be positive")
        self._index = {}
        for i, key in enumerate(self.ids):
            if key in self._index:
                raise EmbeddingError(f"duplicate id {key!r}")
            self._index[key] = i
        bad = ~np.isfinite(self.data).all(axis=1)
        if bad.any():
            raise EmbeddingError(f"non-finite value in row {self.ids[int(np.argmax(bad))]!r}")
        self._variants: dict[str, list[str]] = {}
        for variant, base in self.variant_of.items():
            if variant not in self._index or base not in self._index:
                raise EmbeddingError(f"variant mapping {variant!r} -> {base!r} names unknown id")
            if base in self.variant_of:
                raise EmbeddingError(f"variant {variant!r} points at another variant {base!r}")
            self._variants.setdefault(base, []).append(variant)

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, key: str) -> bool:
        return key in self._index

    def row(self, key: str) -> np.ndarray:
        try:
            return self.data[self._index[key]]
        except KeyError:
            raise KeyError(f"unknown id {key!r}") from None

    def rows(self, keys: Sequence[str]) -> np.ndarray:
        missing = [k for k in keys if k not in self._index]
        if missing:
            raise KeyError(f"unknown ids: {missing[:5]}")
        return self.data[[self._index[k] for k in keys]]

    def base_ids(self) -> list[str]:
        return [i for i in self.ids if i not in self.variant_of]

    def variants(self, base_id: str) -> list[str]:
        return list(self._variants.get(base_id, ()))

    def subset(self, keys: Sequence[str]) -> "EmbeddingMatrix":
        return EmbeddingMatrix(list(keys), self.rows(keys))


def get_vector(
    matrix: EmbeddingMatrix,
    item_id: str,
    seed: int | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Fetch a base row, or a uniformly sampled option among it and its variants.

    Without ``seed`` or ``rng`` the base row is returned and no randomness is
    consumed.
    """
    if item_id not in matrix or item_id in matrix.variant_of:
        raise KeyError(f"unknown base id {item_id!r}")
    if seed is None and rng is None:
        return matrix.row(item_id)
    if rng is None:
        rng = np.random.default_rng(seed)
    options = [item_id, *matrix.variants(item_id)]
    return matrix.row(options[int(rng.integers(len(options)))])


def export_embeddings(
    matrix: EmbeddingMatrix, manifest_path: str | Path, blob_name: str | None = None
) -> Path:
    manifest_path = Path(manifest_path)
    blob_name = blob_name or manifest_path.with_suffix(".f32").name
    payload = np.ascontiguousarray(matrix.data, dtype=_BLOB_DTYPE).tobytes()
    (manifest_path.parent / blob_name).write_bytes(payload)
    manifest = {
        "ids": matrix.ids,
        "dim": matrix.dim,
        "blob": blob_name,
        "crc32": zlib.crc32(payload),
    }
    if matrix.variant_of:
        manifest["variant_of"] = dict(matrix.variant_of)
    manifest_path.write_text(json.dumps(manifest, ensure_ascii=False) + "\n", encoding="utf-8")
    return manifest_path


def import_embeddings(manifest_path: str | Path) -> EmbeddingMatrix:
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise EmbeddingError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise EmbeddingError(f"{manifest_path}: invalid JSON ({exc.msg})") from exc

    for key in ("ids", "dim", "blob", "crc32"):
        if key not in manifest:
            raise EmbeddingError(f"{manifest_path}: manifest lacks {key!r}")
    ids, dim = manifest["ids"], manifest["dim"]
    if not isinstance(dim, int) or isinstance(dim, bool) or dim <= 0:
        raise EmbeddingError(f"{manifest_path}: dim must be a positive integer")

    blob_path = manifest_path.parent / manifest["blob"]
    if not blob_path.is_file():
        raise EmbeddingError(f"blob not found: {blob_path}")
    payload = blob_path.read_bytes()
    expected = len(ids) * dim * _BLOB_DTYPE.itemsize
    if len(payload) != expected:
        raise EmbeddingError(
            f"{blob_path}: length mismatch, expected {expected} bytes for "
            f"{len(ids)}x{dim}, found {len(payload)}"
        )
    crc = zlib.crc32(payload)
    if crc != manifest["crc32"]:
        raise EmbeddingError(
            f"{blob_path}: checksum mismatch (manifest {manifest['crc32']}, blob {crc})"
        )
    data = np.frombuffer(payload, dtype=_BLOB_DTYPE).reshape(len(ids), dim).astype(np.float32)
    return EmbeddingMatrix(ids, data, dict(manifest.get("variant_of") or {}))


def from_mapping(vectors: Mapping[str, Sequence[float]]) -> EmbeddingMatrix:
    keys = list(vectors)
    return EmbeddingMatrix(keys, np.array([vectors[k] for k in keys], dtype=np.float32))
