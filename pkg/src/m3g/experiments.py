"""Experiment configuration and the ablation drivers."""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

from .corpus import Case, DiseaseDictionary, build_disease_dictionary, load_dataset
from .embeddings import EmbeddingMatrix, import_embeddings
from .joint import JointEmbeddingModel, TrainConfig, load_model, save_model, train, write_loss_trace
from .metrics import TABLE_HEADER, EvalReport, evaluate_cases
from .postprocess import PostprocessConfig, postprocess
from .retrieval import NearestNeighbourClassifier, RetrievalConfig
from .text import normalize_label


class ConfigError(ValueError):
    pass


# Published leaderboard-scale scores, carried into output headers for orientation.
PUBLISHED_RETRIEVAL = (8.744, 9.262, 6.279, 10.119, 8.404)
PUBLISHED_BATCH = {128: 7.848, 256: 8.404, 512: 8.187}
PUBLISHED_POSTPROCESS = {
    "Claude Solution": (3.580, 5.741, 10.415),
    "CLIP Solution (competition)": (2.452, 2.041, 8.744),
    "CLIP Solution (batch 256)": (3.334, 5.092, 10.119),
}
NOT_REPRODUCIBLE = "private competition test set, not reproducible without it"

# (use_augmented_variants, pca, modality) in report order.
RETRIEVAL_GRID = (
    (True, True, "image_image"),
    (False, False, "image_text"),
    (False, True, "image_text"),
    (False, False, "image_image"),
    (False, True, "image_image"),
)
POSTPROCESS_COLUMNS = (
    ("word_matching", PostprocessConfig(sentence_structure=False, word_matching=True)),
    ("sentence_structure", PostprocessConfig(sentence_structure=True, word_matching=False)),
    ("both", PostprocessConfig(sentence_structure=True, word_matching=True)),
)


@dataclass
class CorpusSection:
    train: str | None = None
    eval: str | None = None
    eval_split: str = "validation"
    dictionary: str | None = None


@dataclass
class EmbeddingsSection:
    image_manifest: str | None = None
    text_manifest: str | None = None
    query_image_manifest: str | None = None
    pairs: str | None = None


@dataclass
class TrainSection:
    batch_size: int = 256
    learning_rate: float = 1e-3
    weight_decay: float = 1e-3
    epochs: int = 10
    seed: int | None = None
    variant_sampling: bool = False
    dedup_labels_in_batch: bool = False
    out_dim: int = 256
    batch_sizes: list[int] = field(default_factory=lambda: [128, 256, 512])

    def to_train_config(self, default_seed: int, batch_size: int | None = None) -> TrainConfig:
        return TrainConfig(
            batch_size=batch_size if batch_size is not None else self.batch_size,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            epochs=self.epochs,
            seed=self.seed if self.seed is not None else default_seed,
            variant_sampling=self.variant_sampling,
            dedup_labels_in_batch=self.dedup_labels_in_batch,
            out_dim=self.out_dim,
        )


@dataclass
class RetrievalSection:
    model: str | None = None
    k: int = 5
    modality: str = "image_image"
    pca: bool = False
    pca_components: int = 50
    use_augmented_variants: bool = False


@dataclass
class LlmSection:
    scenario: str = "img_2calls"
    mode: str = "replay"
    transcript: str | None = None
    prompt_set: str = "default"
    max_attempts: int = 3
    backoff_base_ms: int = 500
    max_in_flight: int = 2


@dataclass
class PostprocessSection:
    sentence_structure: bool = True
    word_matching: bool = True
    match_mode: str = "token"
    predictions: dict[str, str] = field(default_factory=dict)


@dataclass
class EvaluateSection:
    alpha: float = 0.5
    smoothing: bool = False
    level_factors: dict[str, float] = field(default_factory=dict)

    def factors(self) -> dict[int, float]:
        return {int(k): float(v) for k, v in self.level_factors.items()}


@dataclass
class ExperimentConfig:
    corpus: CorpusSection = field(default_factory=CorpusSection)
    embeddings: EmbeddingsSection = field(default_factory=EmbeddingsSection)
    train: TrainSection = field(default_factory=TrainSection)
    retrieval: RetrievalSection = field(default_factory=RetrievalSection)
    llm: LlmSection = field(default_factory=LlmSection)
    postprocess: PostprocessSection = field(default_factory=PostprocessSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)
    seed: int = 0
    output_dir: str = "runs"
    base_dir: str | None = None

    def path(self, value: str | None, what: str) -> Path:
        if not value:
            raise ConfigError(f"config does not set {what}")
        p = Path(value)
        return p if p.is_absolute() else Path(self.base_dir or ".") / p

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, data: Any, where: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where} must be an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")
    kwargs = {}
    for name, value in data.items():
        sub = _SECTIONS.get(name) if cls is ExperimentConfig else None
        kwargs[name] = _build(sub, value, f"{where}.{name}") if sub else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


_SECTIONS = {
    "corpus": CorpusSection,
    "embeddings": EmbeddingsSection,
    "train": TrainSection,
    "retrieval": RetrievalSection,
    "llm": LlmSection,
    "postprocess": PostprocessSection,
    "evaluate": EvaluateSection,
}


def config_from_dict(data: Mapping, base_dir: str | Path = ".") -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data, "config")
    if cfg.base_dir is None:
        cfg.base_dir = str(Path(base_dir).resolve())
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from exc
    return config_from_dict(data, path.parent)


def output_dir(cfg: ExperimentConfig) -> Path:
    out = cfg.path(cfg.output_dir, "output_dir")
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(
        json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return out


def read_pairs(path: str | Path) -> list[tuple[str, str]]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"image_id", "text_id"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: pairs file needs an 'image_id,text_id' header")
        return [(row["image_id"], row["text_id"]) for row in reader]


def write_pairs(pairs: Sequence[tuple[str, str]], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image_id", "text_id"])
        writer.writerows(pairs)


def pairs_from_cases(cases: Sequence[Case]) -> list[tuple[str, str]]:
    """One (image, normalized gold label) pair per image of each labelled case."""
    return [
        (image_id, normalize_label(c.gold_label))
        for c in cases
        if c.gold_label
        for image_id in c.image_ids
    ]


def reference_labels(pairs: Sequence[tuple[str, str]], modality: str) -> dict[str, str]:
    """Label lookup for the reference side; text ids double as label names."""
    if modality == "image_image":
        return {img: txt for img, txt in pairs}
    return {txt: txt for _, txt in pairs}


@dataclass
class Inputs:
    """Everything the CLIP-side experiments read from disk."""

    images: EmbeddingMatrix
    texts: EmbeddingMatrix
    query_images: EmbeddingMatrix | None
    pairs: list[tuple[str, str]]
    eval_cases: list[Case]
    dictionary: DiseaseDictionary


def load_inputs(cfg: ExperimentConfig) -> Inputs:
    images = import_embeddings(cfg.path(cfg.embeddings.image_manifest, "embeddings.image_manifest"))
    texts = import_embeddings(cfg.path(cfg.embeddings.text_manifest, "embeddings.text_manifest"))
    query = None
    if cfg.embeddings.query_image_manifest:
        query = import_embeddings(cfg.path(cfg.embeddings.query_image_manifest, "query images"))
    eval_cases = load_dataset(cfg.path(cfg.corpus.eval, "corpus.eval"), cfg.corpus.eval_split)
    train_cases = None
    if cfg.embeddings.pairs:
        pairs = read_pairs(cfg.path(cfg.embeddings.pairs, "embeddings.pairs"))
    else:
        train_cases = load_dataset(cfg.path(cfg.corpus.train, "corpus.train"), "train")
        pairs = pairs_from_cases(train_cases)
    if cfg.corpus.dictionary:
        dictionary = DiseaseDictionary.load(cfg.path(cfg.corpus.dictionary, "corpus.dictionary"))
    elif cfg.corpus.train:
        train_cases = train_cases or load_dataset(cfg.path(cfg.corpus.train, "corpus.train"), "train")
        dictionary = build_disease_dictionary(train_cases)
    else:
        dictionary = DiseaseDictionary.from_names(t for _, t in pairs)
    return Inputs(images, texts, query, pairs, eval_cases, dictionary)


def classify_all(
    model: JointEmbeddingModel, inputs: Inputs, rcfg: RetrievalConfig
) -> list[str]:
    clf = NearestNeighbourClassifier(
        model,
        inputs.images,
        inputs.texts,
        reference_labels(inputs.pairs, rcfg.modality),
        rcfg,
        inputs.query_images,
    )
    return [clf.classify(c) for c in inputs.eval_cases]


def score_predictions(
    labels: Sequence[str],
    cases: Sequence[Case],
    dictionary: DiseaseDictionary | None,
    pcfg: PostprocessConfig,
    ecfg: EvaluateSection,
) -> EvalReport:
    responses = [postprocess(lab, c, dictionary, pcfg) for lab, c in zip(labels, cases)]
    return evaluate_cases(responses, cases, ecfg.alpha, ecfg.smoothing, ecfg.factors())


def _retrieval_config(cfg: ExperimentConfig, **overrides) -> RetrievalConfig:
    r = cfg.retrieval
    base = dict(
        k=r.k,
        modality=r.modality,
        pca=r.pca,
        pca_components=r.pca_components,
        use_augmented_variants=r.use_augmented_variants,
        seed=cfg.seed,
    )
    base.update(overrides)
    return RetrievalConfig(**base)


def _model_for(cfg: ExperimentConfig, inputs: Inputs, out: Path) -> JointEmbeddingModel:
    if cfg.retrieval.model:
        model, _ = load_model(cfg.path(cfg.retrieval.model, "retrieval.model"))
        return model
    tcfg = cfg.train.to_train_config(cfg.seed)
    result = train(tcfg, inputs.images, inputs.texts, inputs.pairs)
    save_model(result.model, out / "model.bin", tcfg)
    write_loss_trace(result.loss_trace, out / "loss_trace.csv")
    return result.model


def _report_columns(report: EvalReport) -> list[str]:
    return report.table_row().split("\t")


def write_table(
    path: Path, header: Sequence[str], rows: Sequence[Sequence[str]], comments: Sequence[str] = ()
) -> None:
    lines = [f"# {c}" for c in comments]
    lines.append("\t".join(header))
    lines += ["\t".join(str(c) for c in row) for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _both_on(cfg: ExperimentConfig) -> PostprocessConfig:
    return PostprocessConfig(True, True, cfg.postprocess.match_mode)


def ablate_retrieval(cfg: ExperimentConfig) -> list[dict]:
    """Score the five augmentation / PCA / query-reference settings."""
    out = output_dir(cfg)
    inputs = load_inputs(cfg)
    model = _model_for(cfg, inputs, out)
    rows, reports = [], []
    for aug, pca, modality in RETRIEVAL_GRID:
        rcfg = _retrieval_config(cfg, use_augmented_variants=aug, pca=pca, modality=modality)
        labels = classify_all(model, inputs, rcfg)
        report = score_predictions(labels, inputs.eval_cases, inputs.dictionary, _both_on(cfg), cfg.evaluate)
        reports.append(report)
        rows.append({"aug": aug, "pca": pca, "modality": modality, "report": report.as_dict()})

    comments = [f"published dBLEU per row ({NOT_REPRODUCIBLE}): " + ", ".join(map(str, PUBLISHED_RETRIEVAL))]
    table = [
        ["yes" if aug else "no", "yes" if pca else "no", modality.replace("_", "-"), *_report_columns(rep)]
        for (aug, pca, modality), rep in zip(RETRIEVAL_GRID, reports)
    ]
    write_table(out / "ablate_retrieval.tsv", ("random_aug", "pca_space", "query_reference", *TABLE_HEADER), table, comments)
    (out / "ablate_retrieval.json").write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
    return rows


def _read_labels(path: Path, cases: Sequence[Case]) -> list[str]:
    by_id = {}
    with path.open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                by_id[rec["encounter_id"]] = rec.get("label", rec.get("response"))
    missing = [c.encounter_id for c in cases if c.encounter_id not in by_id]
    if missing:
        raise ValueError(f"{path}: no prediction for {missing[:5]}")
    return [by_id[c.encounter_id] for c in cases]


def ablate_postprocess(cfg: ExperimentConfig) -> list[dict]:
    """Word matching only, sentence template only and both, per prediction file."""
    if not cfg.postprocess.predictions:
        raise ConfigError("postprocess.predictions must name at least one predictions file")
    out = output_dir(cfg)
    cases = load_dataset(cfg.path(cfg.corpus.eval, "corpus.eval"), cfg.corpus.eval_split)
    if cfg.corpus.dictionary:
        dictionary = DiseaseDictionary.load(cfg.path(cfg.corpus.dictionary, "corpus.dictionary"))
    else:
        dictionary = build_disease_dictionary(load_dataset(cfg.path(cfg.corpus.train, "corpus.train"), "train"))

    rows = []
    for name, pred_path in cfg.postprocess.predictions.items():
        path = cfg.path(pred_path, f"postprocess.predictions.{name}")
        if not path.is_file():
            raise FileNotFoundError(f"predictions file not found: {path}")
        labels = _read_labels(path, cases)
        row = {"solution": name}
        for col, pcfg in POSTPROCESS_COLUMNS:
            pcfg = dataclasses.replace(pcfg, match_mode=cfg.postprocess.match_mode)
            row[col] = score_predictions(labels, cases, dictionary, pcfg, cfg.evaluate).as_dict()
        rows.append(row)

    comments = [f"published dBLEU ({NOT_REPRODUCIBLE}):"] + [
        f"  {k}: " + ", ".join(f"{v:.3f}" for v in vals) for k, vals in PUBLISHED_POSTPROCESS.items()
    ]
    table = [[r["solution"], *[f"{r[c]['dbleu']:.3f}" for c, _ in POSTPROCESS_COLUMNS]] for r in rows]
    write_table(out / "ablate_postprocess.tsv", ("solution", *[c for c, _ in POSTPROCESS_COLUMNS]), table, comments)
    (out / "ablate_postprocess.json").write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
    return rows


def ablate_batch_size(cfg: ExperimentConfig) -> list[dict]:
    """Train, classify, post-process and score once per batch size."""
    out = output_dir(cfg)
    inputs = load_inputs(cfg)
    sizes = list(cfg.train.batch_sizes)
    too_big = [b for b in sizes if b > len(inputs.pairs)]
    if too_big:
        raise ValueError(f"batch sizes {too_big} exceed the {len(inputs.pairs)} training pairs")
    rcfg = _retrieval_config(cfg)
    rows, reports = [], []
    for size in sizes:
        tcfg = cfg.train.to_train_config(cfg.seed, batch_size=size)
        result = train(tcfg, inputs.images, inputs.texts, inputs.pairs)
        save_model(result.model, out / f"model_bs{size}.bin", tcfg)
        write_loss_trace(result.loss_trace, out / f"loss_trace_bs{size}.csv")
        labels = classify_all(result.model, inputs, rcfg)
        report = score_predictions(labels, inputs.eval_cases, inputs.dictionary, _both_on(cfg), cfg.evaluate)
        reports.append(report)
        rows.append({
            "batch_size": size,
            "report": report.as_dict(),
            "final_loss": result.loss_trace[-1] if result.loss_trace else None,
        })

    comments = [f"published dBLEU by batch size ({NOT_REPRODUCIBLE}): "
                + ", ".join(f"{k}: {v}" for k, v in PUBLISHED_BATCH.items())]
    table = [[f"batch {size}", *_report_columns(rep)] for size, rep in zip(sizes, reports)]
    write_table(out / "ablate_batch_size.tsv", ("model", *TABLE_HEADER), table, comments)
    (out / "ablate_batch_size.json").write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
    return rows
