from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np
import pytest

from m3g.corpus import Case, ReferenceResponse, write_dataset
from m3g.embeddings import EmbeddingMatrix, export_embeddings
from m3g.experiments import write_pairs

FIXTURES = Path(__file__).parent / "fixtures"

ENC = "ENC00908"
ENC_IMAGES = ("IMG_ENC00908_00001.jpg", "IMG_ENC00908_00002.jpg")
ENC_QUERY = (
    "Picture 1:  On the outside of the thigh, there is a small circle of lump.  "
    "Approximately 2 months.\nPicture 2:  Small red spots on the palm.  "
    "There is slight numbness in the palm."
)


@pytest.fixture
def appendix_case() -> Case:
    return Case(ENC, ENC_IMAGES, ENC_QUERY, "en", (ReferenceResponse("It is hand eczema."),))


def synthetic_task(seed: int, per_label: int = 30, held_out: int = 5, in_dim: int = 16, text_dim: int = 12):
    """Three labels, images from well-separated Gaussians, one text vector per label."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(3, in_dim)) * 5
    ids, rows, pairs, held = [], [], [], []
    for c in range(3):
        for j in range(per_label + held_out):
            image_id = f"img{c}_{j:02d}"
            ids.append(image_id)
            rows.append(centers[c] + rng.normal(size=in_dim))
            (pairs if j < per_label else held).append((image_id, f"label{c}"))
    texts = EmbeddingMatrix([f"label{c}" for c in range(3)], rng.normal(size=(3, text_dim)).astype(np.float32))
    images = EmbeddingMatrix(ids, np.array(rows, dtype=np.float32))
    return images, texts, pairs, held


def with_variants(images: EmbeddingMatrix, n_variants: int, seed: int, scale: float = 0.3) -> EmbeddingMatrix:
    rng = np.random.default_rng(seed)
    ids, rows, variant_of = list(images.ids), [images.data], {}
    for base in images.ids:
        for v in range(n_variants):
            vid = f"{base}@aug{v}"
            ids.append(vid)
            rows.append((images.row(base) + scale * rng.normal(size=images.dim))[None, :].astype(np.float32))
            variant_of[vid] = base
    return EmbeddingMatrix(ids, np.concatenate(rows).astype(np.float32), variant_of)


def write_end_to_end(root: Path, seed: int = 0, variants: int = 2) -> Path:
    """Synthetic train/eval corpus, manifests, pairs and an experiment config."""
    images, texts, pairs, held = synthetic_task(seed, per_label=12, held_out=4)
    names = {"label0": "psoriasis", "label1": "hand eczema", "label2": "tinea capitis"}
    texts = EmbeddingMatrix([names[i] for i in texts.ids], texts.data)
    pairs = [(i, names[t]) for i, t in pairs]
    if variants:
        images = with_variants(images, variants, seed + 1)
    export_embeddings(images, root / "images.json")
    export_embeddings(texts, root / "texts.json")
    write_pairs(pairs, root / "pairs.csv")

    train_cases = [
        Case(f"T{k:03d}", (img,), "", "en", (ReferenceResponse(f"It is {lab}."),), lab)
        for k, (img, lab) in enumerate(pairs)
    ]
    write_dataset(train_cases, root / "train.jsonl")
    queries = ["", "worried this might be psoriasis", "", "itchy patch on scalp"]
    eval_cases = []
    for k, (img, lab) in enumerate(held):
        label = names[lab]
        eval_cases.append(
            Case(
                f"V{k:03d}",
                (img,),
                queries[k % len(queries)],
                "en",
                (
                    ReferenceResponse(f"It is {label}.", 0, 1),
                    ReferenceResponse(f"Likely {label}, see a dermatologist.", 1, 1),
                ),
            )
        )
    write_dataset(eval_cases, root / "eval.jsonl")

    config = {
        "corpus": {"train": "train.jsonl", "eval": "eval.jsonl"},
        "embeddings": {"image_manifest": "images.json", "text_manifest": "texts.json", "pairs": "pairs.csv"},
        "train": {"batch_size": 8, "epochs": 15, "out_dim": 8, "learning_rate": 0.01, "batch_sizes": [4, 8]},
        "retrieval": {"k": 3, "pca_components": 2},
        "seed": seed,
        "output_dir": "out",
    }
    (root / "config.json").write_text(json.dumps(config, indent=1), encoding="utf-8")
    return root / "config.json"


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in module.RESULTS:
        terminalreporter.write_line(line)
