"""Single chokepoint for model completions and embeddings.

Three modes:
  live    - JSON-over-HTTP against an OpenAI-compatible endpoint.
  record  - live, plus every response is written to the fixture tree.
  replay  - responses come only from fixtures; a miss is fatal.

Replay keys on (task_tag, SHA-256 of system+user+run_index) so that N
voting runs over one paragraph map to N distinct recorded responses. No
other module performs network I/O.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import requests

from .errors import EmptyText, FixtureMiss, ProviderError

logger = logging.getLogger(__name__)

TASK_TAGS = frozenset(
    {"extract_iocs", "generate_regex", "refine_regex", "extract_pairs", "reidentify_relation"}
)

MODES = ("live", "record", "replay")

_KEY_SEP = "\x1f"


@dataclass(frozen=True)
class Prompt:
    """One completion request. (task_tag, user_text, run_index) keys a fixture."""

    task_tag: str
    system_text: str
    user_text: str
    temperature: float = 0.0
    run_index: int = 0

    def __post_init__(self):
        if self.task_tag not in TASK_TAGS:
            raise ValueError(f"unknown task_tag: {self.task_tag!r}")

    def fixture_key(self) -> str:
        payload = _KEY_SEP.join([self.system_text, self.user_text, str(self.run_index)])
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Completion:
    """Raw model output; never post-processed here."""

    text: str
    finish_reason: str = "stop"


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]
    dim: int

    @classmethod
    def from_list(cls, values) -> "EmbeddingVector":
        vals = tuple(float(v) for v in values)
        return cls(values=vals, dim=len(vals))


class _TokenBucket:
    """Simple blocking token bucket for live-mode request pacing."""

    def __init__(self, rate_per_sec: float, burst: int):
        self.rate = rate_per_sec
        self.capacity = float(burst)
        self.tokens = float(burst)
        self.updated = time.monotonic()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = time.monotonic()
                self.tokens = min(self.capacity, self.tokens + (now - self.updated) * self.rate)
                self.updated = now
                if self.tokens >= 1.0:
                    self.tokens -= 1.0
                    return
                wait = (1.0 - self.tokens) / self.rate
            time.sleep(wait)


@dataclass
class GatewaySettings:
    """Wire and pacing knobs; fixture paths are the only replay requirement."""

    mode: str = "replay"
    fixtures_dir: Path | None = None
    model: str = "gpt-4"
    embed_model: str = "text-embedding-3-small"
    api_base: str | None = None
    embed_api_base: str | None = None
    api_key: str | None = None
    max_attempts: int = 3
    backoff_base: float = 0.5
    timeout: float = 60.0
    rate_per_sec: float = 10.0
    max_inflight: int = 4
    extra_headers: dict = field(default_factory=dict)


class ModelGateway:
    """Thread-safe completion/embedding client with record/replay fixtures."""

    def __init__(self, settings: GatewaySettings):
        if settings.mode not in MODES:
            raise ValueError(f"unknown gateway mode: {settings.mode!r}")
        if settings.mode in ("replay", "record") and settings.fixtures_dir is None:
            raise ValueError(f"{settings.mode} mode requires a fixtures directory")
        self.settings = settings
        self.mode = settings.mode
        self.fixtures_dir = Path(settings.fixtures_dir) if settings.fixtures_dir else None
        self._bucket = _TokenBucket(settings.rate_per_sec, burst=max(1, int(settings.rate_per_sec)))
        self._inflight = threading.Semaphore(settings.max_inflight)
        self._record_lock = threading.Lock()

    # -- fixture plumbing ---------------------------------------------------

    def _completion_path(self, prompt: Prompt) -> Path:
        return self.fixtures_dir / prompt.task_tag / f"{prompt.fixture_key()}.json"

    def _embedding_path(self, text: str) -> Path:
        key = hashlib.sha256(text.encode("utf-8")).hexdigest()
        return self.fixtures_dir / "embeddings" / f"{key}.json"

    def _write_fixture(self, path: Path, payload: dict) -> None:
        with self._record_lock:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            tmp.write_text(json.dumps(payload, ensure_ascii=False, indent=2) + "\n", encoding="utf-8")
            os.replace(tmp, path)

    # -- wire ----------------------------------------------------------------

    def _api_base(self) -> str:
        base = self.settings.api_base or os.environ.get("MODEL_API_BASE")
        if not base:
            raise ProviderError("no model API base configured (MODEL_API_BASE)")
        return base.rstrip("/")

    def _embed_base(self) -> str:
        base = (
            self.settings.embed_api_base
            or os.environ.get("EMBED_API_BASE")
            or self.settings.api_base
            or os.environ.get("MODEL_API_BASE")
        )
        if not base:
            raise ProviderError("no embedding API base configured (EMBED_API_BASE)")
        return base.rstrip("/")

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        key = self.settings.api_key or os.environ.get("MODEL_API_KEY")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        headers.update(self.settings.extra_headers)
        return headers

    def _post_with_retry(self, url: str, body: dict) -> dict:
        """POST with bounded retries on 429/5xx/transport errors."""
        attempts = self.settings.max_attempts
        last_error = None
        for attempt in range(1, attempts + 1):
            self._bucket.acquire()
            try:
                resp = requests.post(
                    url, json=body, headers=self._headers(), timeout=self.settings.timeout
                )
            except requests.RequestException as exc:
                last_error = f"transport error: {exc}"
                logger.warning("attempt %d/%d failed: %s", attempt, attempts, last_error)
            else:
                if resp.status_code == 429 or resp.status_code >= 500:
                    last_error = f"HTTP {resp.status_code}: {resp.text[:200]}"
                    logger.warning("attempt %d/%d failed: %s", attempt, attempts, last_error)
                elif resp.status_code >= 400:
                    raise ProviderError(f"HTTP {resp.status_code}: {resp.text[:500]}")
                else:
                    return resp.json()
            if attempt < attempts:
                time.sleep(self.settings.backoff_base * (2 ** (attempt - 1)))
        raise ProviderError(f"exhausted {attempts} attempts: {last_error}")

    # -- public API ------------------------------------------------------------

    def complete(self, prompt: Prompt) -> Completion:
        if self.mode == "replay":
            return self._replay_completion(prompt)
        with self._inflight:
            completion = self._live_completion(prompt)
        if self.mode == "record":
            self._write_fixture(
                self._completion_path(prompt),
                {
                    "prompt_digest": prompt.fixture_key(),
                    "response_text": completion.text,
                    "finish_reason": completion.finish_reason,
                },
            )
        return completion

    def embed(self, text: str) -> EmbeddingVector:
        if not text:
            raise EmptyText("cannot embed empty text")
        if self.mode == "replay":
            return self._replay_embedding(text)
        with self._inflight:
            vector = self._live_embedding(text)
        if self.mode == "record":
            self._write_fixture(
                self._embedding_path(text), {"dim": vector.dim, "values": list(vector.values)}
            )
        return vector

    # -- mode backends ----------------------------------------------------------

    def _replay_completion(self, prompt: Prompt) -> Completion:
        path = self._completion_path(prompt)
        if not path.is_file():
            raise FixtureMiss(prompt.task_tag, prompt.fixture_key())
        data = json.loads(path.read_text(encoding="utf-8"))
        return Completion(text=data["response_text"], finish_reason=data.get("finish_reason", "stop"))

    def _replay_embedding(self, text: str) -> EmbeddingVector:
        path = self._embedding_path(text)
        if not path.is_file():
            raise FixtureMiss("embeddings", path.stem)
        data = json.loads(path.read_text(encoding="utf-8"))
        return EmbeddingVector.from_list(data["values"])

    def _live_completion(self, prompt: Prompt) -> Completion:
        body = {
            "model": self.settings.model,
            "messages": [
                {"role": "system", "content": prompt.system_text},
                {"role": "user", "content": prompt.user_text},
            ],
            "temperature": prompt.temperature,
            # repeated voting runs differ only by seed on the wire
            "seed": prompt.run_index,
        }
        data = self._post_with_retry(f"{self._api_base()}/chat/completions", body)
        try:
            choice = data["choices"][0]
            text = choice["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"malformed completion response: {exc}") from exc
        finish = choice.get("finish_reason") or "stop"
        if finish not in ("stop", "length"):
            finish = "stop"
        return Completion(text=text, finish_reason=finish)

    def _live_embedding(self, text: str) -> EmbeddingVector:
        body = {"model": self.settings.embed_model, "input": text}
        data = self._post_with_retry(f"{self._embed_base()}/embeddings", body)
        try:
            values = data["data"][0]["embedding"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"malformed embedding response: {exc}") from exc
        if not values:
            raise ProviderError("provider returned an empty embedding")
        return EmbeddingVector.from_list(values)
