from .pipeline import (
    SCENARIOS,
    PipelineParseError,
    PipelineResult,
    ScenarioConfig,
    extract_label_from_discussion,
    run_many,
    run_pipeline,
)
from .transport import (
    ChatMessage,
    LiveTransport,
    RecordTransport,
    ReplayMissError,
    ReplayTransport,
    RetryExhaustedError,
    TransportError,
    request_digest,
)

__all__ = [
    "SCENARIOS",
    "ChatMessage",
    "LiveTransport",
    "PipelineParseError",
    "PipelineResult",
    "RecordTransport",
    "ReplayMissError",
    "ReplayTransport",
    "RetryExhaustedError",
    "ScenarioConfig",
    "TransportError",
    "extract_label_from_discussion",
    "request_digest",
    "run_many",
    "run_pipeline",
]
