"""Dermatology answer generation toolkit: LLM orchestration, joint image/label
embeddings with nearest-neighbour classification, post-processing and a
weighted multi-reference BLEU evaluator."""

__version__ = "0.1.0"
