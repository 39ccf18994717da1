"""Command-line entry point: ``m3g <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 transport error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import experiments
from .corpus import (
    DatasetError,
    DiseaseDictionary,
    attach_labels,
    build_disease_dictionary,
    load_dataset,
    summarize,
    write_dataset,
)
from .embeddings import IMAGE_DIM, TEXT_DIM, EmbeddingError, import_embeddings
from .experiments import ConfigError, reference_labels
from .joint import TrainConfig, TrainingError, load_model, save_model, train, write_loss_trace
from .llm import (
    LiveTransport,
    RecordTransport,
    ReplayTransport,
    ScenarioConfig,
    TransportError,
    extract_label_from_discussion,
    run_many,
)
from .llm.pipeline import PipelineParseError, discussion_text
from .metrics import TABLE_HEADER, evaluate_cases
from .postprocess import PostprocessConfig, postprocess
from .retrieval import (
    NearestNeighbourClassifier,
    RetrievalConfig,
    RetrievalError,
    export_pca_coordinates,
    write_coordinates,
)

log = logging.getLogger("m3g")

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRANSPORT = 4


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def _write_jsonl(records, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


def _read_jsonl(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise DatasetError("file not found", path)
    out = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise DatasetError(f"invalid JSON ({exc.msg})", path, lineno) from exc
    return out


def _predictions_by_case(path, cases, key: str) -> list[str]:
    by_id = {}
    for rec in _read_jsonl(path):
        value = rec.get(key)
        if value is None:
            value = rec.get("response", rec.get("label"))
        by_id[rec["encounter_id"]] = value
    missing = [c.encounter_id for c in cases if by_id.get(c.encounter_id) is None]
    if missing:
        raise DatasetError(f"no prediction for encounters {missing[:5]}", path)
    return [by_id[c.encounter_id] for c in cases]


def cmd_ingest(args) -> int:
    cases = load_dataset(args.input, args.split)
    if args.labels:
        labels = {r["encounter_id"]: r["label"] for r in _read_jsonl(args.labels)}
        cases = attach_labels(cases, labels)
    if args.out:
        write_dataset(cases, args.out)
    if args.dictionary_out:
        build_disease_dictionary(cases).save(args.dictionary_out)
    if args.report:
        print(json.dumps(summarize(cases, args.split, args.alpha), indent=2, sort_keys=True))
    else:
        print(f"{len(cases)} {args.split} cases")
    return 0


def cmd_import_embeddings(args) -> int:
    matrix = import_embeddings(args.manifest)
    expected = {"image": IMAGE_DIM, "text": TEXT_DIM}[args.role]
    if matrix.dim != expected:
        log.warning("%s embeddings have dim %d (usual: %d)", args.role, matrix.dim, expected)
    print(json.dumps({
        "role": args.role,
        "rows": len(matrix),
        "base_rows": len(matrix.base_ids()),
        "variants": len(matrix.variant_of),
        "dim": matrix.dim,
    }, sort_keys=True))
    return 0


def _train_config(path: str) -> TrainConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from exc
    if "train" in data:
        cfg = experiments.config_from_dict(data, Path(path).parent)
        return cfg.train.to_train_config(cfg.seed)
    try:
        return TrainConfig(**data)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def cmd_train(args) -> int:
    tcfg = _train_config(args.config)
    images = import_embeddings(args.image_manifest)
    texts = import_embeddings(args.text_manifest)
    pairs = experiments.read_pairs(args.pairs)
    result = train(tcfg, images, texts, pairs)
    save_model(result.model, args.out, tcfg)
    trace_path = args.loss_trace or str(Path(args.out).with_suffix(".loss.csv"))
    write_loss_trace(result.loss_trace, trace_path)
    if result.loss_trace:
        log.info("final mean loss %.6f after %d epochs", result.loss_trace[-1], len(result.loss_trace))
    return 0


def cmd_classify(args) -> int:
    model, _ = load_model(args.model)
    images = import_embeddings(args.ref_images)
    texts = import_embeddings(args.ref_texts)
    query = import_embeddings(args.query_images) if args.query_images else None
    pairs = experiments.read_pairs(args.pairs)
    cfg = RetrievalConfig(
        k=args.k,
        modality=args.modality.replace("-", "_"),
        pca=args.pca,
        pca_components=args.pca_components,
        use_augmented_variants=args.aug,
        seed=args.seed,
    )
    cases = load_dataset(args.cases, args.split)
    clf = NearestNeighbourClassifier(
        model, images, texts, reference_labels(pairs, cfg.modality), cfg, query
    )
    _write_jsonl(({"encounter_id": c.encounter_id, "label": clf.classify(c)} for c in cases), args.out)
    return 0


def _transport(args):
    if args.mode == "replay":
        return ReplayTransport(args.transcript)
    live = LiveTransport.from_env()
    if args.mode == "record":
        return RecordTransport(live, args.transcript)
    return live


def cmd_llm_run(args) -> int:
    cases = load_dataset(args.cases, args.split)
    if args.mode in ("replay", "record") and not args.transcript:
        raise ConfigError(f"--mode {args.mode} needs --transcript")
    transport = _transport(args)
    if args.scenario == "extract_label":
        records = [
            {
                "encounter_id": c.encounter_id,
                "label": extract_label_from_discussion(
                    discussion_text(c), transport, max_attempts=args.max_attempts,
                    backoff_base_ms=args.backoff_ms,
                ),
            }
            for c in cases
        ]
    else:
        cfg = ScenarioConfig(args.scenario, max_attempts=args.max_attempts, backoff_base_ms=args.backoff_ms)
        in_flight = args.max_in_flight if args.mode == "live" else 1
        results = run_many(cases, cfg, transport, in_flight)
        records = [
            {"encounter_id": c.encounter_id, "label": r.final_label, "stage_outputs": r.stage_outputs}
            for c, r in zip(cases, results)
        ]
    _write_jsonl(records, args.out)
    return 0


def cmd_postprocess(args) -> int:
    cases = load_dataset(args.cases, args.split)
    labels = _predictions_by_case(args.predictions, cases, "label")
    dictionary = DiseaseDictionary.load(args.dictionary) if args.dictionary else None
    cfg = PostprocessConfig(args.sentence, args.word_match, args.match_mode)
    _write_jsonl(
        (
            {"encounter_id": c.encounter_id, "response": postprocess(lab, c, dictionary, cfg)}
            for lab, c in zip(labels, cases)
        ),
        args.out,
    )
    return 0


def cmd_evaluate(args) -> int:
    cases = load_dataset(args.cases, args.split)
    responses = _predictions_by_case(args.predictions, cases, "response")
    report = evaluate_cases(responses, cases, args.alpha, args.smoothing == "eps")
    if args.out:
        Path(args.out).write_text(json.dumps(report.as_dict(), indent=2) + "\n", encoding="utf-8")
    print("\t".join(TABLE_HEADER))
    print(report.table_row())
    return 0


def cmd_export_pca(args) -> int:
    matrix = import_embeddings(args.manifest)
    ids, coords, _ = export_pca_coordinates(matrix, args.components)
    write_coordinates(ids, coords, args.out)
    return 0


def _ablation(fn):
    def run(args) -> int:
        cfg = experiments.load_config(args.config)
        rows = fn(cfg)
        log.info("%d rows written to %s", len(rows), cfg.path(cfg.output_dir, "output_dir"))
        return 0

    return run


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="m3g", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a case file and report counts")
    p.add_argument("--input", required=True)
    p.add_argument("--split", required=True, choices=("train", "validation", "test"))
    p.add_argument("--report", action="store_true")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--labels", help="JSONL of {encounter_id, label} to attach as gold labels")
    p.add_argument("--out", help="write the (labelled) cases here")
    p.add_argument("--dictionary-out", help="write the disease dictionary built from gold labels")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("import-embeddings", help="validate an embedding manifest and blob")
    p.add_argument("--manifest", required=True)
    p.add_argument("--role", required=True, choices=("image", "text"))
    p.set_defaults(func=cmd_import_embeddings)

    p = sub.add_parser("train", help="train the projection heads")
    p.add_argument("--config", required=True)
    p.add_argument("--image-manifest", required=True)
    p.add_argument("--text-manifest", required=True)
    p.add_argument("--pairs", required=True, help="CSV with image_id,text_id header")
    p.add_argument("--out", required=True)
    p.add_argument("--loss-trace", help="CSV path (default: <out>.loss.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("classify", help="nearest-neighbour classification of cases")
    p.add_argument("--model", required=True)
    p.add_argument("--ref-images", required=True)
    p.add_argument("--ref-texts", required=True)
    p.add_argument("--pairs", required=True, help="labelled reference pairs (CSV image_id,text_id)")
    p.add_argument("--query-images", help="manifest holding the case images (default: --ref-images)")
    p.add_argument("--cases", required=True)
    p.add_argument("--split", default="test", choices=("train", "validation", "test"))
    p.add_argument("--modality", required=True, choices=("image-image", "image-text"))
    p.add_argument("--pca", type=_on_off, default=False)
    p.add_argument("--pca-components", type=int, default=50)
    p.add_argument("--aug", type=_on_off, default=False)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("llm-run", help="run an LLM scenario over cases")
    p.add_argument("--cases", required=True)
    p.add_argument("--split", default="test", choices=("train", "validation", "test"))
    p.add_argument(
        "--scenario", required=True,
        choices=("img_1call", "img_2calls", "img_then_text", "img_plus_text", "extract_label"),
    )
    p.add_argument("--mode", required=True, choices=("live", "record", "replay"))
    p.add_argument("--transcript")
    p.add_argument("--max-attempts", type=int, default=3)
    p.add_argument("--backoff-ms", type=int, default=500)
    p.add_argument("--max-in-flight", type=int, default=2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_llm_run)

    p = sub.add_parser("postprocess", help="word matching and sentence templating")
    p.add_argument("--predictions", required=True)
    p.add_argument("--cases", required=True)
    p.add_argument("--split", default="test", choices=("train", "validation", "test"))
    p.add_argument("--dictionary")
    p.add_argument("--sentence", type=_on_off, default=True)
    p.add_argument("--word-match", type=_on_off, default=True)
    p.add_argument("--match-mode", choices=("token", "substring"), default="token")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_postprocess)

    p = sub.add_parser("evaluate", help="weighted multi-reference BLEU")
    p.add_argument("--predictions", required=True)
    p.add_argument("--cases", required=True)
    p.add_argument("--split", default="validation", choices=("train", "validation"))
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--smoothing", choices=("off", "eps"), default="off")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    for name, fn in (
        ("ablate-retrieval", experiments.ablate_retrieval),
        ("ablate-postprocess", experiments.ablate_postprocess),
        ("ablate-batch-size", experiments.ablate_batch_size),
    ):
        p = sub.add_parser(name, help=fn.__doc__.splitlines()[0])
        p.add_argument("--config", required=True)
        p.set_defaults(func=_ablation(fn))

    p = sub.add_parser("export-pca", help="PCA coordinates of an embedding set as CSV")
    p.add_argument("--manifest", required=True)
    p.add_argument("--components", type=int, default=2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_pca)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TransportError as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except (
        DatasetError,
        EmbeddingError,
        RetrievalError,
        TrainingError,
        PipelineParseError,
        FileNotFoundError,
        KeyError,
        ValueError,
    ) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
