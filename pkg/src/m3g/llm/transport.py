"""Chat transports: live HTTP endpoint, recording wrapper and offline replay."""

from __future__ import annotations

import difflib
import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

ROLES = ("system", "user", "assistant")


class TransportError(RuntimeError):
    retryable = True


class ReplayMissError(TransportError):
    retryable = False

    def __init__(self, digest: str, nearest: str | None = None):
        self.digest = digest
        self.nearest = nearest
        msg = f"no recorded response for request {digest}"
        if nearest:
            msg += f"; nearest recorded request: {nearest}"
        super().__init__(msg)


class RetryExhaustedError(TransportError):
    retryable = False

    def __init__(self, attempts: int, delays_ms: list[int], last: Exception):
        self.attempts = attempts
        self.delays_ms = delays_ms
        self.last = last
        super().__init__(f"giving up after {attempts} attempts: {last}")


@dataclass(frozen=True)
class ChatMessage:
    role: str
    text: str
    image_ids: tuple[str, ...] = ()

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.role == "system" and self.image_ids:
            raise ValueError("system messages cannot carry images")


def _image_digest(image_id: str) -> str:
    return hashlib.sha256(image_id.encode("utf-8")).hexdigest()


def canonical_request(
    messages: Sequence[ChatMessage],
    image_digest: Callable[[str], str] = _image_digest,
) -> str:
    """Stable text form of a request; the digest is its SHA-256."""
    payload = [
        {"role": m.role, "text": m.text, "images": [image_digest(i) for i in m.image_ids]}
        for m in messages
    ]
    return json.dumps(payload, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def request_digest(
    messages: Sequence[ChatMessage],
    image_digest: Callable[[str], str] = _image_digest,
) -> str:
    return hashlib.sha256(canonical_request(messages, image_digest).encode("utf-8")).hexdigest()


class ChatTransport(Protocol):
    def complete(self, messages: Sequence[ChatMessage]) -> str: ...


@dataclass
class TranscriptEntry:
    digest: str
    response_text: str
    timestamp: str
    request: str | None = None


def read_transcript(path: str | Path) -> dict[str, TranscriptEntry]:
    entries: dict[str, TranscriptEntry] = {}
    path = Path(path)
    if not path.exists():
        return entries
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            try:
                entry = TranscriptEntry(
                    rec["digest"], rec["response_text"], rec.get("timestamp", ""), rec.get("request")
                )
            except KeyError as exc:
                raise ValueError(f"{path}:{lineno}: transcript record lacks {exc}") from None
            if entry.digest in entries:
                raise ValueError(f"{path}:{lineno}: duplicate digest {entry.digest}")
            entries[entry.digest] = entry
    return entries


class ReplayTransport:
    """Serves recorded responses by request digest; never touches the network."""

    def __init__(self, transcript_path: str | Path, image_digest: Callable[[str], str] = _image_digest):
        self.path = Path(transcript_path)
        if not self.path.is_file():
            raise FileNotFoundError(f"transcript not found: {self.path}")
        self.entries = read_transcript(self.path)
        self.image_digest = image_digest
        self.calls = 0

    def complete(self, messages: Sequence[ChatMessage]) -> str:
        self.calls += 1
        canon = canonical_request(messages, self.image_digest)
        digest = hashlib.sha256(canon.encode("utf-8")).hexdigest()
        entry = self.entries.get(digest)
        if entry is None:
            raise ReplayMissError(digest, self._nearest(canon))
        return entry.response_text

    def _nearest(self, canon: str) -> str | None:
        best, best_ratio = None, -1.0
        for entry in self.entries.values():
            if entry.request is None:
                continue
            ratio = difflib.SequenceMatcher(None, canon, entry.request, autojunk=False).ratio()
            if ratio > best_ratio:
                best, best_ratio = entry, ratio
        if best is None:
            return next(iter(self.entries), None)
        return f"{best.digest} (similarity {best_ratio:.3f}): {best.request[:200]}"


class RecordTransport:
    """Passes requests to ``inner`` and appends each new exchange to a transcript.

    A request already present in the transcript is answered from it, which
    keeps digests unique.
    """

    def __init__(
        self,
        inner: ChatTransport,
        transcript_path: str | Path,
        image_digest: Callable[[str], str] = _image_digest,
        clock: Callable[[], str] | None = None,
    ):
        self.inner = inner
        self.path = Path(transcript_path)
        self.entries = read_transcript(self.path)
        self.image_digest = image_digest
        self.clock = clock or (lambda: time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()))
        self._lock = threading.Lock()

    def complete(self, messages: Sequence[ChatMessage]) -> str:
        canon = canonical_request(messages, self.image_digest)
        digest = hashlib.sha256(canon.encode("utf-8")).hexdigest()
        with self._lock:
            if digest in self.entries:
                return self.entries[digest].response_text
        response = self.inner.complete(messages)
        with self._lock:
            if digest not in self.entries:
                entry = TranscriptEntry(digest, response, self.clock(), canon)
                self.entries[digest] = entry
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(
                        json.dumps(
                            {
                                "digest": entry.digest,
                                "response_text": entry.response_text,
                                "timestamp": entry.timestamp,
                                "request": entry.request,
                            },
                            ensure_ascii=False,
                        )
                        + "\n"
                    )
            return self.entries[digest].response_text


@dataclass
class LiveTransport:
    """Chat-completions style HTTP endpoint.

    Images are sent as ``image_url`` parts; ``image_url`` maps an image id to
    a URL or data URI and defaults to passing the id through.
    """

    base_url: str
    model: str
    api_key: str = ""
    temperature: float = 0.0
    timeout_s: float = 120.0
    image_url: Callable[[str], str] = field(default=lambda image_id: image_id)

    @classmethod
    def from_env(cls, env: Mapping[str, str] | None = None, **kwargs) -> "LiveTransport":
        env = os.environ if env is None else env
        missing = [k for k in ("CHAT_BASE_URL", "CHAT_MODEL") if not env.get(k)]
        if missing:
            raise TransportError(f"live mode needs environment variables {missing}")
        return cls(env["CHAT_BASE_URL"], env["CHAT_MODEL"], env.get("CHAT_API_KEY", ""), **kwargs)

    def _payload(self, messages: Sequence[ChatMessage]) -> dict:
        out = []
        for m in messages:
            if m.image_ids:
                parts = [{"type": "image_url", "image_url": {"url": self.image_url(i)}} for i in m.image_ids]
                if m.text:
                    parts.append({"type": "text", "text": m.text})
                out.append({"role": m.role, "content": parts})
            else:
                out.append({"role": m.role, "content": m.text})
        return {"model": self.model, "messages": out, "temperature": self.temperature}

    def complete(self, messages: Sequence[ChatMessage]) -> str:
        import httpx

        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        url = self.base_url.rstrip("/") + "/chat/completions"
        try:
            resp = httpx.post(url, json=self._payload(messages), headers=headers, timeout=self.timeout_s)
        except httpx.HTTPError as exc:
            raise TransportError(f"request failed: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransportError(f"endpoint returned HTTP {resp.status_code}")
        if resp.status_code >= 400:
            err = TransportError(f"endpoint returned HTTP {resp.status_code}: {resp.text[:200]}")
            err.retryable = False
            raise err
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"unexpected response body: {resp.text[:200]}") from exc


def backoff_schedule(max_attempts: int, base_ms: int) -> list[int]:
    """Delays slept between attempts: base, 2*base, 4*base, ..."""
    return [base_ms * 2**i for i in range(max(0, max_attempts - 1))]


def call_with_retry(
    transport: ChatTransport,
    messages: Sequence[ChatMessage],
    max_attempts: int = 3,
    backoff_base_ms: int = 500,
    sleep: Callable[[float], None] = time.sleep,
) -> str:
    if max_attempts < 1:
        raise ValueError("max_attempts must be at least 1")
    delays = backoff_schedule(max_attempts, backoff_base_ms)
    slept: list[int] = []
    for attempt in range(1, max_attempts + 1):
        try:
            return transport.complete(messages)
        except TransportError as exc:
            if not getattr(exc, "retryable", True):
                raise
            if attempt == max_attempts:
                raise RetryExhaustedError(attempt, slept, exc) from exc
            delay = delays[attempt - 1]
            slept.append(delay)
            sleep(delay / 1000.0)
    raise AssertionError("unreachable")
