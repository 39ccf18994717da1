"""Regenerate appendix_transcript.jsonl.

Run from the repository root: ``python tests/fixtures/build_transcript.py``.
Responses are scripted per scenario; digests come from the shipped prompts,
so the transcript must be rebuilt whenever a prompt asset changes.
"""

from __future__ import annotations

import sys
from pathlib import Path

HERE = Path(__file__).parent
sys.path.insert(0, str(HERE.parent))

from conftest import ENC, ENC_IMAGES, ENC_QUERY  # noqa: E402

from m3g.corpus import Case, ReferenceResponse  # noqa: E402
from m3g.llm import RecordTransport, ScenarioConfig, extract_label_from_discussion, run_pipeline  # noqa: E402

STAGE1_IMG = (
    "Based on the images provided, the key skin findings are ... The differential diagnosis "
    "for these lesions would include:\n\n1. Hand eczema (dyshidrotic eczema) ..."
)
STAGE1_IMG_TEXT = (
    "Based on the provided images and additional information, here are the potential skin "
    "conditions to consider in the differential diagnosis: ..."
)
SCRIPT = {
    "img_1call": ["Vesicles on the palm suggest a dyshidrotic process.\n\nAnswer: Dyshidrotic eczema"],
    "img_2calls": [STAGE1_IMG, "hand eczema"],
    "img_then_text": [STAGE1_IMG, "hand eczema (dyshidrotic eczema)"],
    "img_plus_text": [STAGE1_IMG_TEXT, "picture 1: lipoma. picture 2: palmar erythema"],
}
DISCUSSION = (
    "This looks like eczema on the hands. Eczema of this type flares with wet work; "
    "treat the eczema with emollients and a topical steroid."
)


class Scripted:
    """Answers image-bearing requests with the first response, others with the last."""

    def __init__(self, responses):
        self.responses = list(responses)

    def complete(self, messages):
        has_images = any(m.image_ids for m in messages)
        return self.responses[0] if has_images else self.responses[-1]


def main(path: Path = HERE / "appendix_transcript.jsonl") -> None:
    path.unlink(missing_ok=True)
    case = Case(ENC, ENC_IMAGES, ENC_QUERY, "en", (ReferenceResponse("It is hand eczema."),))
    for scenario, responses in SCRIPT.items():
        rec = RecordTransport(Scripted(responses), path, clock=lambda: "2024-04-01T00:00:00Z")
        run_pipeline(case, ScenarioConfig(scenario), rec)
    rec = RecordTransport(Scripted(["Eczema."]), path, clock=lambda: "2024-04-01T00:00:00Z")
    extract_label_from_discussion(DISCUSSION, rec)


if __name__ == "__main__":
    main()
