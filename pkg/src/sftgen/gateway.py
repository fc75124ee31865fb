"""Provider gateway: chat completion and embeddings with retries, a sliding
rate limiter, an on-disk response cache, and a scriptable offline mock.

All LLM traffic in the pipeline funnels through :class:`Gateway`. The mock
provider is fully deterministic: responses come from a script table keyed by
the SHA-256 of the user prompt, and unscripted prompts produce a loud,
reproducible fallback so tests fail visibly instead of silently.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import random
import threading
import time
from collections import deque
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import requests

from .errors import (
    AuthError,
    ConfigError,
    MalformedResponseError,
    ProviderError,
    RetryExhaustedError,
    TransientProviderError,
)

logger = logging.getLogger(__name__)

PROVIDER_KINDS = ("http_openai_compatible", "mock")
MOCK_EMBED_DIM = 32
_MOCK_FALLBACK_PREFIX = "MOCK-UNSCRIPTED:"


def prompt_hash(user_prompt: str) -> str:
    """Script key for the mock provider: SHA-256 of the raw user prompt."""
    return hashlib.sha256(user_prompt.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ChatRequest:
    template_id: str
    system_prompt: str
    user_prompt: str
    temperature: float
    max_output_tokens: int
    seed_hint: int | None = None

    def __post_init__(self):
        if not self.system_prompt or not self.user_prompt:
            raise ValueError("system and user prompts must be non-empty")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must lie in [0, 2]")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")


@dataclass(frozen=True)
class ChatResponse:
    text: str
    provider: str
    model: str
    attempt_count: int
    input_tokens: int = 0
    output_tokens: int = 0
    cached: bool = False


@dataclass(frozen=True)
class ProviderConfig:
    kind: str = "mock"
    model: str = "mock-model"
    base_url: str | None = None
    api_key_env: str = ""
    max_attempts: int = 3
    backoff_base_ms: int = 250
    requests_per_minute: int = 120
    cache_dir: str | None = None
    timeout_s: float = 60.0
    # Mock-only knobs. mock_script values may be a string or a sequence of
    # strings consumed one per call (the last entry repeats).
    mock_script: Mapping[str, str | Sequence[str]] | None = None
    mock_transient_failures: int = 0
    mock_responder: Callable[[ChatRequest], str | None] | None = None

    def __post_init__(self):
        if self.kind not in PROVIDER_KINDS:
            raise ConfigError(f"provider kind must be one of {PROVIDER_KINDS}, got {self.kind!r}")
        if self.max_attempts < 1:
            raise ConfigError("max_attempts must be >= 1")
        if self.requests_per_minute < 1:
            raise ConfigError("requests_per_minute must be >= 1")
        if self.kind == "http_openai_compatible" and not self.base_url:
            raise ConfigError("http providers require base_url")


def script_mock(
    script: Mapping[str, str | Sequence[str]] | None = None,
    *,
    model: str = "mock-model",
    transient_failures: int = 0,
    responder: Callable[[ChatRequest], str | None] | None = None,
    cache_dir: str | None = None,
    max_attempts: int = 3,
    requests_per_minute: int = 100_000,
) -> ProviderConfig:
    """Mock provider config whose complete() consults ``script`` by prompt hash."""
    return ProviderConfig(
        kind="mock",
        model=model,
        max_attempts=max_attempts,
        backoff_base_ms=1,
        requests_per_minute=requests_per_minute,
        cache_dir=cache_dir,
        mock_script=dict(script or {}),
        mock_transient_failures=transient_failures,
        mock_responder=responder,
    )


def request_fingerprint(request: ChatRequest, model: str) -> str:
    """Cache key: hash over (template_id, system, user, temperature, model)."""
    payload = json.dumps(
        [request.template_id, request.system_prompt, request.user_prompt, request.temperature, model],
        ensure_ascii=False,
        separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class RateLimiter:
    """Sliding 60-second window limiter, shared safely across threads.

    clock/sleeper are injectable so tests can drive a fake clock.
    """

    def __init__(
        self,
        per_minute: int,
        clock: Callable[[], float] = time.monotonic,
        sleeper: Callable[[float], None] = time.sleep,
    ):
        self._per_minute = per_minute
        self._clock = clock
        self._sleeper = sleeper
        self._events: deque[float] = deque()
        self._lock = threading.Lock()

    def acquire(self) -> float:
        """Block until a slot frees, then record the call. Returns its timestamp."""
        while True:
            with self._lock:
                now = self._clock()
                while self._events and self._events[0] <= now - 60.0:
                    self._events.popleft()
                if len(self._events) < self._per_minute:
                    self._events.append(now)
                    return now
                wait = self._events[0] + 60.0 - now
            self._sleeper(max(wait, 1e-3))


class ResponseCache:
    """One JSON file per request fingerprint. Writes are temp-then-rename,
    so concurrent identical writes degrade to last-writer-wins on equal bytes.
    """

    def __init__(self, cache_dir: str | Path):
        self._dir = Path(cache_dir)
        self._dir.mkdir(parents=True, exist_ok=True)

    def get(self, key: str) -> ChatResponse | None:
        path = self._dir / f"{key}.json"
        try:
            row = json.loads(path.read_text(encoding="utf-8"))
        except (FileNotFoundError, json.JSONDecodeError):
            return None
        return ChatResponse(
            text=row["text"],
            provider=row["provider"],
            model=row["model"],
            attempt_count=row["attempt_count"],
            input_tokens=row["input_tokens"],
            output_tokens=row["output_tokens"],
            cached=True,
        )

    def put(self, key: str, response: ChatResponse) -> None:
        path = self._dir / f"{key}.json"
        tmp = path.with_suffix(f".tmp-{os.getpid()}-{threading.get_ident()}")
        row = {
            "text": response.text,
            "provider": response.provider,
            "model": response.model,
            "attempt_count": response.attempt_count,
            "input_tokens": response.input_tokens,
            "output_tokens": response.output_tokens,
        }
        tmp.write_text(json.dumps(row, ensure_ascii=False, sort_keys=True), encoding="utf-8")
        os.replace(tmp, path)


class _MockProvider:
    name = "mock"

    def __init__(self, config: ProviderConfig):
        self._config = config
        self._script = dict(config.mock_script or {})
        self._responder = config.mock_responder
        self._sequence_pos: dict[str, int] = {}
        self._failures_left: dict[str, int] = {}
        self._lock = threading.Lock()
        self.unscripted: list[str] = []

    def send_chat(self, request: ChatRequest) -> tuple[str, int, int]:
        fp = request_fingerprint(request, self._config.model)
        with self._lock:
            if fp not in self._failures_left:
                self._failures_left[fp] = self._config.mock_transient_failures
            if self._failures_left[fp] > 0:
                self._failures_left[fp] -= 1
                raise TransientProviderError("scripted transient failure")
            text = self._lookup(request)
        input_tokens = len(request.system_prompt.split()) + len(request.user_prompt.split())
        return text, input_tokens, len(text.split())

    def _lookup(self, request: ChatRequest) -> str:
        key = prompt_hash(request.user_prompt)
        entry = self._script.get(key)
        if entry is None:
            if self._responder is not None:
                scripted = self._responder(request)
                if scripted is not None:
                    return scripted
            self.unscripted.append(key)
            return f"{_MOCK_FALLBACK_PREFIX}{key}"
        if isinstance(entry, str):
            return entry
        pos = self._sequence_pos.get(key, 0)
        self._sequence_pos[key] = pos + 1
        return entry[min(pos, len(entry) - 1)]

    def send_embed(self, texts: Sequence[str]) -> list[list[float]]:
        return [self._vector(t) for t in texts]

    @staticmethod
    def _vector(text: str) -> list[float]:
        seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")
        rng = random.Random(seed)
        raw = [rng.gauss(0.0, 1.0) for _ in range(MOCK_EMBED_DIM)]
        norm = math.sqrt(sum(x * x for x in raw))
        return [x / norm for x in raw]


class _HttpProvider:
    """OpenAI-compatible JSON chat/embeddings endpoints."""

    name = "http"

    def __init__(self, config: ProviderConfig):
        self._config = config

    def _headers(self) -> dict[str, str]:
        key = os.environ.get(self._config.api_key_env or "", "")
        if not key:
            raise AuthError(f"API key env var {self._config.api_key_env!r} is not set")
        return {"Authorization": f"Bearer {key}", "Content-Type": "application/json"}

    def _post(self, path: str, body: dict) -> dict:
        url = self._config.base_url.rstrip("/") + path
        try:
            resp = requests.post(url, json=body, headers=self._headers(), timeout=self._config.timeout_s)
        except (requests.Timeout, requests.ConnectionError) as exc:
            raise TransientProviderError(f"network failure: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientProviderError(f"HTTP {resp.status_code} from {url}")
        if resp.status_code in (401, 403):
            raise AuthError(f"HTTP {resp.status_code} from {url}")
        if resp.status_code >= 400:
            raise ProviderError(f"HTTP {resp.status_code} from {url}: {resp.text[:200]}")
        try:
            return resp.json()
        except ValueError as exc:
            raise MalformedResponseError(f"non-JSON response from {url}") from exc

    def send_chat(self, request: ChatRequest) -> tuple[str, int, int]:
        body = {
            "model": self._config.model,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": request.user_prompt},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        if request.seed_hint is not None:
            body["seed"] = request.seed_hint
        data = self._post("/chat/completions", body)
        try:
            text = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedResponseError("chat response carried no message content") from exc
        if text is None:
            raise MalformedResponseError("chat response content was null")
        usage = data.get("usage") or {}
        return text, int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0))

    def send_embed(self, texts: Sequence[str]) -> list[list[float]]:
        data = self._post("/embeddings", {"model": self._config.model, "input": list(texts)})
        try:
            rows = sorted(data["data"], key=lambda r: r["index"])
            vectors = [[float(x) for x in row["embedding"]] for row in rows]
        except (KeyError, TypeError) as exc:
            raise MalformedResponseError("embedding response carried no vectors") from exc
        if len(vectors) != len(texts):
            raise MalformedResponseError("embedding count does not match input count")
        return vectors


class Gateway:
    """Thread-safe front door for one provider role."""

    def __init__(
        self,
        config: ProviderConfig,
        *,
        clock: Callable[[], float] = time.monotonic,
        sleeper: Callable[[float], None] = time.sleep,
        rng: random.Random | None = None,
    ):
        self.config = config
        self.provider = _MockProvider(config) if config.kind == "mock" else _HttpProvider(config)
        self.limiter = RateLimiter(config.requests_per_minute, clock=clock, sleeper=sleeper)
        self._cache = ResponseCache(config.cache_dir) if config.cache_dir else None
        self._sleeper = sleeper
        self._rng = rng or random.Random()

    def complete(self, request: ChatRequest) -> ChatResponse:
        key = request_fingerprint(request, self.config.model)
        if self._cache is not None:
            hit = self._cache.get(key)
            if hit is not None:
                return hit
        text, input_tokens, output_tokens, attempts = self._with_retries(
            lambda: self.provider.send_chat(request), unpack=True
        )
        response = ChatResponse(
            text=text,
            provider=self.provider.name,
            model=self.config.model,
            attempt_count=attempts,
            input_tokens=input_tokens,
            output_tokens=output_tokens,
            cached=False,
        )
        if self._cache is not None:
            self._cache.put(key, response)
        return response

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        if not texts:
            return []
        vectors, attempts = self._with_retries(lambda: self.provider.send_embed(texts), unpack=False)
        dims = {len(v) for v in vectors}
        if len(dims) != 1:
            raise MalformedResponseError(f"embedding dimensions disagree within one call: {sorted(dims)}")
        return vectors

    def _with_retries(self, call: Callable, *, unpack: bool):
        last_error: Exception | None = None
        for attempt in range(1, self.config.max_attempts + 1):
            self.limiter.acquire()
            try:
                result = call()
            except TransientProviderError as exc:
                last_error = exc
                if attempt == self.config.max_attempts:
                    raise RetryExhaustedError(attempt, exc)
                delay = self._backoff_seconds(attempt)
                logger.debug("transient provider failure (attempt %d), backing off %.3fs", attempt, delay)
                self._sleeper(delay)
                continue
            if unpack:
                text, input_tokens, output_tokens = result
                return text, input_tokens, output_tokens, attempt
            return result, attempt
        raise RetryExhaustedError(self.config.max_attempts, last_error)

    def _backoff_seconds(self, attempt: int) -> float:
        base = self.config.backoff_base_ms * (2 ** (attempt - 1))
        return base * self._rng.uniform(0.8, 1.2) / 1000.0
