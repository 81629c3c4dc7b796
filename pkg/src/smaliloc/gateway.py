"""Chat-completion gateway with HTTP, replay-cache and scripted-mock backends."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import re
import tempfile
import threading
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import httpx
import yaml

from .errors import GatewayError, InputError
from .prompts import BASELINE, PHASE1, PHASE2

log = logging.getLogger(__name__)

API_KEY_ENV = "SMALILOC_API_KEY"
DEFAULT_BASE_URL = "https://api.openai.com/v1"
DEFAULT_MODEL = "gpt-4.1"

# Substrings that identify which default template produced a prompt.
PHASE_MARKERS = {
    BASELINE: "Possible Malicious Behaviors:",
    PHASE1: "Malicious Behaviors to Look For:",
    PHASE2: "First Phase Explanation",
}


class GatewayUnconfigured(GatewayError):
    pass


class AuthMissing(GatewayError):
    pass


class AuthRejected(GatewayError):
    pass


class RateLimited(GatewayError):
    retryable = True


class TransportError(GatewayError):
    retryable = True


class HttpStatusError(GatewayError):
    pass


class CacheMiss(GatewayError):
    pass


class MockUnscripted(GatewayError):
    pass


@dataclass(frozen=True)
class LlmRequest:
    prompt: str
    model: str = DEFAULT_MODEL
    temperature: float = 0.0
    max_output_tokens: int = 4096

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    @property
    def request_digest(self) -> str:
        payload = json.dumps(
            {"model": self.model, "prompt": self.prompt, "temperature": repr(float(self.temperature))},
            sort_keys=True,
            ensure_ascii=True,
        )
        return hashlib.sha256(payload.encode("ascii")).hexdigest()


@dataclass(frozen=True)
class LlmResponse:
    text: str
    backend: str
    attempt: int = 1
    prompt_tokens: int = 0
    completion_tokens: int = 0
    latency_ms: int = 0


@dataclass(frozen=True)
class BackendReply:
    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0


class Backend(Protocol):
    name: str

    def send(self, request: LlmRequest) -> BackendReply: ...


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 4
    base_delay: float = 1.0
    jitter: float = 0.5

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")


def with_retry(
    call: Callable[[], BackendReply],
    policy: RetryPolicy,
    sleep: Callable[[float], None] = time.sleep,
    rng: random.Random | None = None,
) -> tuple[BackendReply, int]:
    """Run ``call`` with exponential backoff; returns the value and the attempt number.

    Only errors flagged ``retryable`` (rate limiting, transport failures) are
    retried; everything else propagates immediately.
    """
    rng = rng or random.Random()
    for attempt in range(1, policy.max_attempts + 1):
        try:
            return call(), attempt
        except GatewayError as exc:
            if not exc.retryable or attempt == policy.max_attempts:
                raise
            delay = policy.base_delay * 2 ** (attempt - 1) + rng.uniform(0, policy.jitter)
            log.warning("attempt %d failed (%s); retrying in %.2fs", attempt, exc, delay)
            sleep(delay)
    raise AssertionError("unreachable")


# -- backends ----------------------------------------------------------------


class HttpBackend:
    """OpenAI-style ``/chat/completions`` client; any compatible server works."""

    name = "http"

    def __init__(
        self,
        base_url: str = DEFAULT_BASE_URL,
        api_key_env: str = API_KEY_ENV,
        timeout: float = 120.0,
        client: httpx.Client | None = None,
    ):
        self.url = base_url.rstrip("/") + "/chat/completions"
        self.api_key_env = api_key_env
        self.client = client or httpx.Client(timeout=timeout)

    def send(self, request: LlmRequest) -> BackendReply:
        key = os.environ.get(self.api_key_env)
        if not key:
            raise AuthMissing(f"environment variable {self.api_key_env} is not set")
        body = {
            "model": request.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        try:
            resp = self.client.post(self.url, json=body, headers={"Authorization": f"Bearer {key}"})
        except httpx.HTTPError as exc:
            raise TransportError(f"{type(exc).__name__}: {exc}") from exc

        if resp.status_code == 429:
            raise RateLimited(f"rate limited by {self.url}")
        if resp.status_code in (401, 403):
            raise AuthRejected(f"credential rejected ({resp.status_code})")
        if resp.status_code >= 500:
            raise TransportError(f"server error {resp.status_code}")
        if resp.status_code >= 400:
            raise HttpStatusError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            data = resp.json()
            text = data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed completion payload: {exc}") from exc
        usage = data.get("usage") or {}
        return BackendReply(text or "", int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0)))


class ReplayStore:
    """Digest-keyed directory of raw completions, one ``<digest>.txt`` per entry."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self._lock = threading.Lock()

    def _path(self, digest: str) -> Path:
        return self.directory / f"{digest}.txt"

    def get(self, digest: str) -> str | None:
        path = self._path(digest)
        if not path.is_file():
            return None
        return path.read_bytes().decode("utf-8")

    def put(self, digest: str, text: str) -> None:
        with self._lock:
            self.directory.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=self.directory, suffix=".tmp")
            with os.fdopen(fd, "wb") as fh:
                fh.write(text.encode("utf-8"))
            os.replace(tmp, self._path(digest))


class ReplayBackend:
    name = "replay"

    def __init__(self, store: ReplayStore):
        self.store = store

    def send(self, request: LlmRequest) -> BackendReply:
        text = self.store.get(request.request_digest)
        if text is None:
            raise CacheMiss(f"no cached completion for digest {request.request_digest[:12]}")
        return BackendReply(text)


@dataclass(frozen=True)
class MockRule:
    response: str
    class_name: str | None = None
    phase: str | None = None
    contains: tuple[str, ...] = ()

    def matches(self, prompt: str) -> bool:
        if self.phase is not None and PHASE_MARKERS[self.phase] not in prompt:
            return False
        if self.class_name is not None:
            pattern = r"^\s*\.class\b[^\n]*\s" + re.escape(self.class_name) + r"\s*$"
            if not re.search(pattern, prompt, re.MULTILINE):
                return False
        return all(s in prompt for s in self.contains)


class MockBackend:
    """Scripted backend: the first rule whose markers all occur in the prompt answers."""

    name = "mock"

    def __init__(self, rules: Sequence[MockRule], default: str | None = None):
        self.rules = list(rules)
        self.default = default
        self.calls = 0
        self._lock = threading.Lock()

    def send(self, request: LlmRequest) -> BackendReply:
        with self._lock:
            self.calls += 1
        for rule in self.rules:
            if rule.matches(request.prompt):
                return BackendReply(rule.response)
        if self.default is not None:
            return BackendReply(self.default)
        raise MockUnscripted(f"no mock rule matches prompt {request.prompt[:80]!r}")

    @classmethod
    def from_file(cls, path: str | Path) -> MockBackend:
        """Load a YAML script: ``default`` text plus ``rules`` with class/phase/contains/response."""
        path = Path(path)
        if not path.is_file():
            raise InputError(f"mock script not found: {path}")
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        rules = []
        for i, r in enumerate(data.get("rules") or []):
            if "response" not in r:
                raise InputError(f"{path}: rule {i} has no response")
            phase = r.get("phase")
            if phase is not None and phase not in PHASE_MARKERS:
                raise InputError(f"{path}: rule {i} has unknown phase {phase!r}")
            rules.append(
                MockRule(
                    response=str(r["response"]),
                    class_name=r.get("class"),
                    phase=phase,
                    contains=tuple(r.get("contains") or ()),
                )
            )
        return cls(rules, data.get("default"))


# -- gateway -----------------------------------------------------------------


@dataclass
class GatewayStats:
    backend_calls: int = 0
    http_calls: int = 0
    cache_hits: int = 0
    cache_writes: int = 0
    in_flight: int = 0
    peak_in_flight: int = 0


@dataclass
class Gateway:
    """Single completion entry point shared by all pipeline workers.

    With a ``cache_dir`` every completion from a live backend is written to a
    :class:`ReplayStore`, and later identical requests are served from it
    without touching the backend.
    """

    backend: Backend | None
    model: str = DEFAULT_MODEL
    temperature: float = 0.0
    max_output_tokens: int = 4096
    cache_dir: str | Path | None = None
    max_in_flight: int = 4
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    min_interval: float = 0.0
    run_log: str | Path | None = None
    sleep: Callable[[float], None] = time.sleep

    def __post_init__(self):
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        self.store = ReplayStore(self.cache_dir) if self.cache_dir else None
        self.stats = GatewayStats()
        self._slots = threading.BoundedSemaphore(self.max_in_flight)
        self._stats_lock = threading.Lock()
        self._pace_lock = threading.Lock()
        self._log_lock = threading.Lock()
        self._next_start = 0.0

    def request(self, prompt: str) -> LlmRequest:
        return LlmRequest(prompt, self.model, self.temperature, self.max_output_tokens)

    def complete(self, request: LlmRequest, refresh: bool = False) -> LlmResponse:
        """Return a completion; ``refresh`` skips the cache read (a live backend is asked again)."""
        if self.backend is None:
            raise GatewayUnconfigured("no LLM backend configured")
        digest = request.request_digest
        is_replay = self.backend.name == "replay"
        if self.store is not None and not is_replay and not refresh:
            cached = self.store.get(digest)
            if cached is not None:
                with self._stats_lock:
                    self.stats.cache_hits += 1
                resp = LlmResponse(cached, backend="replay")
                self._log(request, resp)
                return resp

        started = time.monotonic()
        with self._slots:
            with self._stats_lock:
                self.stats.in_flight += 1
                self.stats.peak_in_flight = max(self.stats.peak_in_flight, self.stats.in_flight)
            try:
                reply, attempt = with_retry(lambda: self._send(request), self.retry, self.sleep)
            finally:
                with self._stats_lock:
                    self.stats.in_flight -= 1
        resp = LlmResponse(
            text=reply.text,
            backend=self.backend.name,
            attempt=attempt,
            prompt_tokens=reply.prompt_tokens,
            completion_tokens=reply.completion_tokens,
            latency_ms=int((time.monotonic() - started) * 1000),
        )
        if self.store is not None and not is_replay:
            self.store.put(digest, reply.text)
            with self._stats_lock:
                self.stats.cache_writes += 1
        self._log(request, resp)
        return resp

    def _send(self, request: LlmRequest) -> BackendReply:
        self._pace()
        with self._stats_lock:
            self.stats.backend_calls += 1
            if self.backend.name == "http":
                self.stats.http_calls += 1
        return self.backend.send(request)

    def _pace(self) -> None:
        if self.min_interval <= 0:
            return
        with self._pace_lock:
            now = time.monotonic()
            wait = self._next_start - now
            self._next_start = max(now, self._next_start) + self.min_interval
        if wait > 0:
            self.sleep(wait)

    def _log(self, request: LlmRequest, resp: LlmResponse) -> None:
        if self.run_log is None:
            return
        entry = {
            "digest": request.request_digest,
            "model": request.model,
            "backend": resp.backend,
            "attempt": resp.attempt,
            "latency_ms": resp.latency_ms,
            "prompt_tokens": resp.prompt_tokens,
            "completion_tokens": resp.completion_tokens,
            "prompt_head": request.prompt[:200],
        }
        with self._log_lock:
            with open(self.run_log, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, ensure_ascii=False) + "\n")
