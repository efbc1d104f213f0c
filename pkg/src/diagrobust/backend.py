"""Model backends: the HTTP chat-completions client, hermetic stand-ins, and a replay cache.

Every backend turns a :class:`ModelRequest` into a :class:`ModelResponse`
holding the verbatim answer text. Concurrency is capped per backend by
``max_in_flight``.
"""
from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import random
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import httpx
import numpy as np

from .image import Image, decode_png, encode_png
from .records import CHOICE_LETTERS, AnswerType, QuestionRecord

__all__ = [
    "Backend",
    "BackendConfig",
    "BackendError",
    "CacheMissError",
    "CachedBackend",
    "ConfigError",
    "ConstantBackend",
    "DecodeParams",
    "HttpBackend",
    "ModelRequest",
    "ModelResponse",
    "OracleBackend",
    "ProtocolError",
    "ReplayCache",
    "RetryPolicy",
    "TableBackend",
    "TransportError",
    "UnsupportedQuestionError",
    "cache_key",
    "infer",
    "render_prompt",
    "scripted_oracle_infer",
]

log = logging.getLogger(__name__)

DEFAULT_TEMPLATE = "diagram_qa_v1"
VERBATIM_TEMPLATE = "verbatim"

_ANSWER_INSTRUCTIONS = {
    AnswerType.MULTIPLE_CHOICE: "Reply with the letter of the correct option only.",
    AnswerType.FILL_IN_BLANK: "Reply with the missing value only.",
    AnswerType.SHORT_ANSWER: "Reply with a short answer only.",
}


class BackendError(RuntimeError):
    pass


class TransportError(BackendError):
    """Network failure, timeout, or 5xx after all retries."""


class CacheMissError(TransportError):
    """Replay-only backend asked for a request that is not cached."""


class ConfigError(BackendError):
    """4xx response or bad local configuration; the run should abort."""


class ProtocolError(BackendError):
    """Response body does not have the expected shape."""


class UnsupportedQuestionError(BackendError):
    pass


@dataclass(frozen=True)
class DecodeParams:
    temperature: float = 0.0
    max_output_tokens: int = 1024
    greedy: bool = True

    def to_dict(self) -> dict:
        return {
            "temperature": self.temperature,
            "max_output_tokens": self.max_output_tokens,
            "greedy": self.greedy,
        }


def render_prompt(template_id: str, question_text: str, answer_type, choices=None) -> str:
    if template_id == VERBATIM_TEMPLATE:
        return question_text
    if template_id != DEFAULT_TEMPLATE:
        raise ConfigError(f"unknown prompt template {template_id!r}")
    lines = ["Look at the diagram and answer the question.", f"Question: {question_text}"]
    if choices:
        lines.append("Options:")
        lines += [f"({CHOICE_LETTERS[i]}) {c}" for i, c in enumerate(choices)]
    lines.append(_ANSWER_INSTRUCTIONS[AnswerType(answer_type)])
    return "\n".join(lines)


@dataclass(frozen=True)
class ModelRequest:
    image: object  # Image or PNG bytes
    question_text: str
    answer_type: AnswerType = AnswerType.SHORT_ANSWER
    choices: Optional[tuple] = None
    prompt_template_id: str = DEFAULT_TEMPLATE
    decode: DecodeParams = field(default_factory=DecodeParams)
    # bookkeeping only; not part of the cache key
    question_id: str = ""
    view_index: int = 0

    @property
    def prompt(self) -> str:
        return render_prompt(self.prompt_template_id, self.question_text, self.answer_type, self.choices)

    @property
    def png_bytes(self) -> bytes:
        if isinstance(self.image, Image):
            return encode_png(self.image)
        return bytes(self.image)


@dataclass(frozen=True)
class ModelResponse:
    raw_text: str
    latency_ms: float = 0.0
    attempt_count: int = 1
    from_cache: bool = False
    digest: str = ""


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    base_backoff_ms: float = 500.0
    jitter: float = 0.1

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ConfigError("max_attempts must be >= 1")


@dataclass(frozen=True)
class BackendConfig:
    endpoint_url: str = ""
    model_name: str = ""
    api_key_env_var: str = ""
    max_in_flight: int = 8
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    timeout_ms: float = 60_000.0

    def __post_init__(self):
        if self.max_in_flight < 1:
            raise ConfigError("max_in_flight must be >= 1")

    def to_dict(self) -> dict:
        return {
            "endpoint_url": self.endpoint_url,
            "model_name": self.model_name,
            "api_key_env_var": self.api_key_env_var,
            "max_in_flight": self.max_in_flight,
            "retry": {
                "max_attempts": self.retry.max_attempts,
                "base_backoff_ms": self.retry.base_backoff_ms,
                "jitter": self.retry.jitter,
            },
            "timeout_ms": self.timeout_ms,
        }


def _field(h, data: bytes) -> None:
    h.update(len(data).to_bytes(8, "little"))
    h.update(data)


def cache_key(req: ModelRequest, model_name: str) -> str:
    """SHA-256 over PNG bytes, rendered prompt, model name and decode parameters."""
    h = hashlib.sha256()
    _field(h, req.png_bytes)
    _field(h, req.prompt.encode("utf-8"))
    _field(h, model_name.encode("utf-8"))
    _field(h, json.dumps(req.decode.to_dict(), sort_keys=True).encode("utf-8"))
    return h.hexdigest()


# Backends ------------------------------------------------------------------------


class Backend:
    """Base class; subclasses implement ``_infer``."""

    model_name = "backend"

    def __init__(self, max_in_flight: int = 8):
        if max_in_flight < 1:
            raise ConfigError("max_in_flight must be >= 1")
        self.max_in_flight = max_in_flight
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def infer(self, req: ModelRequest) -> ModelResponse:
        with self._slots:
            return self._infer(req)

    def _infer(self, req: ModelRequest) -> ModelResponse:
        raise NotImplementedError


def infer(req: ModelRequest, backend: Backend) -> ModelResponse:
    return backend.infer(req)


class ConstantBackend(Backend):
    """Answers every request with the same string."""

    def __init__(self, answer: str, model_name: str = "constant", max_in_flight: int = 8):
        super().__init__(max_in_flight)
        self.answer = answer
        self.model_name = model_name

    def _infer(self, req):
        return ModelResponse(raw_text=self.answer, latency_ms=0.0)


class TableBackend(Backend):
    """Scripted answers looked up by ``(question_id, view_index)``.

    ``answers`` maps a question id to a list indexed by view, or is a callable
    ``(request) -> str``. Correction calls (verbatim prompts) use
    ``corrections[question_id]`` when given.
    """

    def __init__(self, answers, corrections=None, model_name: str = "table", max_in_flight: int = 8):
        super().__init__(max_in_flight)
        self.answers = answers
        self.corrections = corrections or {}
        self.model_name = model_name

    def _infer(self, req):
        if req.prompt_template_id == VERBATIM_TEMPLATE and req.question_id in self.corrections:
            return ModelResponse(raw_text=self.corrections[req.question_id])
        if callable(self.answers):
            return ModelResponse(raw_text=self.answers(req))
        return ModelResponse(raw_text=self.answers[req.question_id][req.view_index])


# Scripted pixel-reading oracle ---------------------------------------------------------

INK_THRESHOLD = 195  # a pixel is ink if any channel is darker than this
ROW_INK_FRACTION = 0.5


def measure_bar_heights(img: Image, schema: dict) -> list[int]:
    """Height in pixels of each bar: topmost row of its column band that is mostly ink."""
    baseline = int(schema["baseline_y"])
    heights = []
    for bar in schema["bars"]:
        band = img.array[:baseline, int(bar["x0"]) : int(bar["x1"])]
        ink = band.min(axis=2) < INK_THRESHOLD
        rows = np.flatnonzero(ink.mean(axis=1) >= ROW_INK_FRACTION)
        heights.append(int(baseline - rows[0]) if rows.size else 0)
    return heights


def scripted_oracle_infer(img: Image, question: QuestionRecord) -> str:
    """Answer a synthetic bar-chart question by measuring pixels.

    Uses the layout part of the render schema only (bar columns, baseline,
    scale), never the stored values, so perturbations corrupt its readings
    the way they would corrupt a reader's.
    """
    schema = question.render_schema
    if not schema or schema.get("chart") != "bar" or "question" not in schema:
        raise UnsupportedQuestionError(f"question {question.id!r} has no supported render schema")
    labels = [b["label"] for b in schema["bars"]]
    heights = measure_bar_heights(img, schema)
    q = schema["question"]
    if q["type"] == "tallest":
        return f"Answer: {labels[int(np.argmax(heights))]}"
    if q["type"] == "value":
        h = heights[labels.index(q["target"])]
        return str(int(np.floor(h / schema["px_per_unit"] + 0.5)))
    if q["type"] == "compare":
        taller = heights[labels.index(q["target"])] > heights[labels.index(q["other"])]
        return "yes" if taller else "no"
    raise UnsupportedQuestionError(f"unknown synthetic question type {q['type']!r}")


class OracleBackend(Backend):
    """Backend wrapper around :func:`scripted_oracle_infer`."""

    model_name = "scripted-oracle-v1"

    def __init__(self, questions, max_in_flight: int = 8):
        super().__init__(max_in_flight)
        self.questions = {q.id: q for q in questions}

    def _infer(self, req):
        try:
            question = self.questions[req.question_id]
        except KeyError:
            raise UnsupportedQuestionError(f"unknown question {req.question_id!r}") from None
        img = req.image if isinstance(req.image, Image) else decode_png(req.image)
        t0 = time.perf_counter()
        text = scripted_oracle_infer(img, question)
        return ModelResponse(raw_text=text, latency_ms=(time.perf_counter() - t0) * 1e3)


# HTTP chat-completions client ------------------------------------------------------------


class HttpBackend(Backend):
    """Client for an OpenAI-style ``/chat/completions`` endpoint.

    Transport failures and 5xx responses are retried with exponential backoff
    and jitter; 4xx responses raise :class:`ConfigError` immediately. The API
    key is read from the environment variable named in the config.
    """

    def __init__(
        self,
        cfg: BackendConfig,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
        env=None,
        jitter_seed: int | None = None,
    ):
        super().__init__(cfg.max_in_flight)
        self.cfg = cfg
        self.model_name = cfg.model_name
        self._sleep = sleep
        self._rand = random.Random(jitter_seed)
        env = os.environ if env is None else env
        headers = {"Content-Type": "application/json"}
        if cfg.api_key_env_var:
            key = env.get(cfg.api_key_env_var)
            if not key:
                raise ConfigError(f"environment variable {cfg.api_key_env_var} is not set")
            headers["Authorization"] = f"Bearer {key}"
        self._client = httpx.Client(
            transport=transport, timeout=cfg.timeout_ms / 1000.0, headers=headers
        )

    def close(self):
        self._client.close()

    def payload(self, req: ModelRequest) -> dict:
        b64 = base64.b64encode(req.png_bytes).decode("ascii")
        return {
            "model": self.cfg.model_name,
            "messages": [
                {
                    "role": "user",
                    "content": [
                        {"type": "text", "text": req.prompt},
                        {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{b64}"}},
                    ],
                }
            ],
            "temperature": req.decode.temperature,
            "max_tokens": req.decode.max_output_tokens,
        }

    def _backoff(self, attempt: int) -> float:
        r = self.cfg.retry
        delay = r.base_backoff_ms * (2 ** (attempt - 1))
        return delay * (1.0 + r.jitter * self._rand.random()) / 1000.0

    def _infer(self, req):
        body = self.payload(req)
        t0 = time.perf_counter()
        last = ""
        attempts = self.cfg.retry.max_attempts
        for attempt in range(1, attempts + 1):
            try:
                resp = self._client.post(self.cfg.endpoint_url, json=body)
            except httpx.TransportError as exc:
                last = f"{type(exc).__name__}: {exc}"
            else:
                if resp.status_code >= 500:
                    last = f"HTTP {resp.status_code}"
                elif resp.status_code >= 400:
                    raise ConfigError(f"HTTP {resp.status_code} from {self.cfg.endpoint_url}: {resp.text[:200]}")
                else:
                    text = _parse_completion(resp.text)
                    return ModelResponse(
                        raw_text=text,
                        latency_ms=(time.perf_counter() - t0) * 1e3,
                        attempt_count=attempt,
                    )
            log.warning("attempt %d/%d failed: %s", attempt, attempts, last)
            if attempt < attempts:
                self._sleep(self._backoff(attempt))
        raise TransportError(f"giving up after {attempts} attempt(s): {last}")


def _parse_completion(body: str) -> str:
    try:
        content = json.loads(body)["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError):
        raise ProtocolError(f"malformed completion body: {body[:200]!r}") from None
    if isinstance(content, list):
        content = "".join(p.get("text", "") for p in content if isinstance(p, dict))
    if not isinstance(content, str):
        raise ProtocolError(f"malformed completion body: {body[:200]!r}")
    return content


# Replay cache -------------------------------------------------------------------------


class ReplayCache:
    """One JSON file per digest at ``<root>/<first 2 hex>/<digest>.json``.

    Writes go to a temp file in the same directory and are renamed into place.
    """

    def __init__(self, root):
        self.root = Path(root)

    def path(self, digest: str) -> Path:
        return self.root / digest[:2] / f"{digest}.json"

    def get(self, digest: str) -> Optional[dict]:
        p = self.path(digest)
        try:
            return json.loads(p.read_text(encoding="utf-8"))
        except FileNotFoundError:
            return None

    def put(self, digest: str, record: dict) -> None:
        p = self.path(digest)
        p.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=p.parent, prefix=".tmp-", suffix=".json")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(record, fh, sort_keys=True, indent=1)
        os.replace(tmp, p)


class CachedBackend(Backend):
    """Serve from a :class:`ReplayCache`, falling through to ``inner`` on a miss.

    With ``inner=None`` the backend is replay-only and a miss raises
    :class:`CacheMissError`.
    """

    def __init__(self, cache: ReplayCache, inner: Backend | None = None, model_name: str | None = None, max_in_flight: int = 8):
        super().__init__(inner.max_in_flight if inner else max_in_flight)
        self.cache = cache
        self.inner = inner
        self.model_name = model_name or (inner.model_name if inner else "replay")
        self.hits = 0
        self.misses = 0
        self._lock = threading.Lock()

    def _infer(self, req):
        digest = cache_key(req, self.model_name)
        hit = self.cache.get(digest)
        if hit is not None:
            with self._lock:
                self.hits += 1
            return ModelResponse(raw_text=hit["raw_text"], latency_ms=0.0, attempt_count=0, from_cache=True, digest=digest)
        with self._lock:
            self.misses += 1
        if self.inner is None:
            raise CacheMissError(f"replay cache miss for digest {digest}")
        resp = self.inner.infer(req)
        self.cache.put(
            digest,
            {
                "digest": digest,
                "model_name": self.model_name,
                "prompt_template_id": req.prompt_template_id,
                "prompt": req.prompt,
                "decode": req.decode.to_dict(),
                "png_sha256": hashlib.sha256(req.png_bytes).hexdigest(),
                "raw_text": resp.raw_text,
            },
        )
        return ModelResponse(
            raw_text=resp.raw_text,
            latency_ms=resp.latency_ms,
            attempt_count=resp.attempt_count,
            from_cache=False,
            digest=digest,
        )
