"""One- and two-call LLM diagnosis pipelines and gold-label extraction."""

from __future__ import annotations

import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import NamedTuple, Sequence

from ..corpus import Case
from ..text import normalize_label
from .transport import ChatMessage, ChatTransport, call_with_retry

SCENARIOS = ("img_1call", "img_2calls", "img_then_text", "img_plus_text")

_ANSWER = re.compile(r"^\s*\**\s*answer\s*\**\s*:\s*\**\s*(.+?)\s*\**\s*$", re.IGNORECASE | re.MULTILINE)


class PipelineParseError(ValueError):
    def __init__(self, message: str, raw_text: str):
        self.raw_text = raw_text
        super().__init__(f"{message}; raw response: {raw_text[:200]!r}")


@dataclass(frozen=True)
class PromptSet:
    name: str
    templates: dict[str, str]
    formats: dict[str, str]

    def __getitem__(self, key: str) -> str:
        return self.templates[key]


@lru_cache(maxsize=None)
def load_prompt_set(name: str = "default") -> PromptSet:
    """Load the bundled prompt templates (the only bundle is ``default``)."""
    if name != "default":
        raise KeyError(f"unknown prompt set {name!r}")
    root = resources.files("m3g") / "prompts"
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    templates = {
        key: (root / entry["file"]).read_text(encoding="utf-8")
        for key, entry in manifest["templates"].items()
    }
    return PromptSet(name, templates, manifest["formats"])


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str = "img_2calls"
    prompt_set: str = "default"
    max_attempts: int = 3
    backoff_base_ms: int = 500

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be at least 1")


class PipelineResult(NamedTuple):
    final_label: str
    stage_outputs: list[str]


def trim_label(text: str) -> str:
    """Strip surrounding whitespace and one trailing period."""
    text = text.strip()
    if text.endswith("."):
        text = text[:-1].rstrip()
    return text


def parse_answer_line(text: str) -> str:
    matches = _ANSWER.findall(text)
    if not matches:
        raise PipelineParseError("response has no 'Answer:' line", text)
    label = trim_label(matches[-1])
    if not label:
        raise PipelineParseError("empty 'Answer:' line", text)
    return label


def build_stage1(case: Case, cfg: ScenarioConfig, prompts: PromptSet) -> list[ChatMessage]:
    images = tuple(case.image_ids)
    if cfg.scenario == "img_1call":
        return [ChatMessage("system", prompts["img_1call.system"]), ChatMessage("user", "", images)]
    if cfg.scenario == "img_plus_text":
        info = prompts.formats["additional_information"].format(query=case.query_text)
        return [
            ChatMessage("system", prompts["differential_with_text.system"]),
            ChatMessage("user", info, images),
        ]
    return [ChatMessage("system", prompts["differential.system"]), ChatMessage("user", "", images)]


def build_stage2(case: Case, cfg: ScenarioConfig, prompts: PromptSet, differentials: str) -> list[ChatMessage]:
    if cfg.scenario == "img_then_text":
        content = prompts.formats["differentials_with_text"].format(
            differentials=differentials, query=case.query_text
        )
        return [ChatMessage("system", prompts["reformat_with_text.system"]), ChatMessage("user", content)]
    return [ChatMessage("system", prompts["reformat.system"]), ChatMessage("user", differentials)]


def run_pipeline(case: Case, cfg: ScenarioConfig, transport: ChatTransport, sleep=None) -> PipelineResult:
    """Run one case through the configured scenario.

    ``img_1call`` makes a single call and parses its trailing answer line.
    The other scenarios ask for a free-form differential first, then feed
    it back verbatim asking for the bare disease name.
    """
    if not case.image_ids:
        raise ValueError(f"{case.encounter_id}: case has no images")
    prompts = load_prompt_set(cfg.prompt_set)
    kwargs = {"max_attempts": cfg.max_attempts, "backoff_base_ms": cfg.backoff_base_ms}
    if sleep is not None:
        kwargs["sleep"] = sleep

    first = call_with_retry(transport, build_stage1(case, cfg, prompts), **kwargs)
    if cfg.scenario == "img_1call":
        return PipelineResult(parse_answer_line(first), [first])
    second = call_with_retry(transport, build_stage2(case, cfg, prompts, first), **kwargs)
    return PipelineResult(trim_label(second), [first, second])


def run_many(
    cases: Sequence[Case],
    cfg: ScenarioConfig,
    transport: ChatTransport,
    max_in_flight: int = 2,
) -> list[PipelineResult]:
    """Run cases with bounded concurrency; results keep input order."""
    if max_in_flight <= 1:
        return [run_pipeline(c, cfg, transport) for c in cases]
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        return list(pool.map(lambda c: run_pipeline(c, cfg, transport), cases))


def discussion_text(case: Case) -> str:
    return "\n\n".join(r.text for r in case.responses)


def extract_label_from_discussion(
    discussion: str,
    transport: ChatTransport,
    prompt_set: str = "default",
    max_attempts: int = 3,
    backoff_base_ms: int = 500,
) -> str:
    """Ask the model for the single most likely disease named in a discussion."""
    if not discussion.strip():
        raise ValueError("discussion is empty")
    prompts = load_prompt_set(prompt_set)
    messages = [ChatMessage("system", prompts["extract_label.system"]), ChatMessage("user", discussion)]
    response = call_with_retry(transport, messages, max_attempts, backoff_base_ms)
    label = normalize_label(response)
    if not label:
        raise PipelineParseError("empty label-extraction response", response)
    return label
