"""Uniform vision-language-model client.

One entry point, ``VlmClient.complete``, sits in front of any backend and
adds: a content-addressed disk cache, exponential backoff on throttling,
a token-bucket requests-per-minute limiter, and a bound on concurrent
in-flight calls. The scripted mock backend makes the whole pipeline
hermetic and bit-reproducible.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import requests

from .errors import RateLimited, Throttled, Timeout, UpstreamError
from .storage import write_text_atomic

BACKOFF_BASE_SECONDS = 1.0
BACKOFF_FACTOR = 2.0
MAX_ATTEMPTS = 5


@dataclass(frozen=True, slots=True)
class VlmRequest:
    model_id: str
    prompt: str
    image: bytes
    media_type: str = "image/png"
    max_tokens: int = 1024
    temperature: float = 0.0

    def __post_init__(self) -> None:
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if not self.image:
            raise ValueError("image must be non-empty")


@dataclass(frozen=True, slots=True)
class VlmResponse:
    text: str
    request_id: str
    model_id: str
    cached: bool


def cache_key(request: VlmRequest) -> str:
    """SHA-256 digest over the request identity; identical requests collide.

    Fields are length-prefixed so no two distinct requests can produce the
    same byte stream.
    """
    digest = hashlib.sha256()
    for part in (
        request.model_id.encode("utf-8"),
        request.prompt.encode("utf-8"),
        request.image,
        repr(float(request.temperature)).encode("ascii"),
        str(int(request.max_tokens)).encode("ascii"),
    ):
        digest.update(len(part).to_bytes(8, "big"))
        digest.update(part)
    return digest.hexdigest()


def request_id_for(digest: str) -> str:
    return "req-" + digest[:16]


class VlmBackend(Protocol):
    def send(self, request: VlmRequest) -> str:
        """Return raw response text; raise Throttled/UpstreamError/Timeout."""


@dataclass(slots=True)
class MockRule:
    match: str
    response: str


class ScriptedVlmBackend:
    """Mock backend driven by ordered regex rules over the prompt.

    The first rule whose ``match`` pattern searches the prompt wins; its
    response template is expanded with the match groups (``\\1`` style), so
    scripts can echo captured prompt fragments back. A call log records every
    prompt plus the peak number of concurrent in-flight calls.
    """

    def __init__(self, rules: Sequence[MockRule], default: str | None = None) -> None:
        self._rules = [(re.compile(rule.match, re.DOTALL), rule.response) for rule in rules]
        self._default = default
        self._lock = threading.Lock()
        self.call_log: list[str] = []
        self._active = 0
        self.max_active = 0

    @classmethod
    def from_script(cls, path: Path | str) -> "ScriptedVlmBackend":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        rules = [MockRule(match=item["match"], response=item["response"]) for item in raw.get("rules", [])]
        return cls(rules, default=raw.get("default"))

    def send(self, request: VlmRequest) -> str:
        with self._lock:
            self.call_log.append(request.prompt)
            self._active += 1
            self.max_active = max(self.max_active, self._active)
        try:
            for pattern, template in self._rules:
                found = pattern.search(request.prompt)
                if found:
                    return found.expand(template)
            if self._default is not None:
                return self._default
            raise UpstreamError("no mock rule matches the prompt")
        finally:
            with self._lock:
                self._active -= 1


class HttpVlmBackend:
    """Chat-completion style HTTP endpoint taking one image plus a text prompt."""

    def __init__(self, url: str, api_key: str | None = None, timeout: float = 120.0) -> None:
        self.url = url
        self.api_key = api_key
        self.timeout = timeout

    def send(self, request: VlmRequest) -> str:
        import base64

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {
            "model": request.model_id,
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
            "messages": [
                {
                    "role": "user",
                    "content": [
                        {"type": "text", "text": request.prompt},
                        {
                            "type": "image",
                            "media_type": request.media_type,
                            "data": base64.b64encode(request.image).decode("ascii"),
                        },
                    ],
                }
            ],
        }
        try:
            resp = requests.post(self.url, json=payload, headers=headers, timeout=self.timeout)
        except requests.Timeout as exc:
            raise Timeout(f"no answer from {self.url} within {self.timeout}s") from exc
        except requests.RequestException as exc:
            raise UpstreamError(f"request to {self.url} failed: {exc}") from exc
        if resp.status_code in (429, 503):
            raise Throttled(f"upstream throttled with status {resp.status_code}")
        if resp.status_code != 200:
            raise UpstreamError(f"upstream status {resp.status_code}: {resp.text[:200]}")
        body = resp.json()
        if "content" in body and isinstance(body["content"], str):
            return body["content"]
        try:
            return body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise UpstreamError(f"unrecognized response shape from {self.url}") from exc


class TokenBucket:
    """Requests-per-minute limiter; acquire blocks until a token is free."""

    def __init__(self, rpm: float, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep) -> None:
        if rpm <= 0:
            raise ValueError("rpm must be positive")
        self.rate = rpm / 60.0
        self.capacity = float(rpm)
        self._tokens = float(rpm)
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate
            self._sleep(wait)


@dataclass(slots=True)
class ClientStats:
    cache_hits: int = 0
    upstream_calls: int = 0
    retries: int = 0


class VlmClient:
    """Caching, rate-limited, retrying front end over a VLM backend.

    Thread safe: the disk cache serializes writes, identical in-flight
    requests are collapsed to one upstream call, and at most
    ``max_concurrency`` calls run at once.
    """

    def __init__(
        self,
        backend: VlmBackend,
        cache_dir: Path | str,
        rpm: float | None = None,
        max_concurrency: int = 4,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.backend = backend
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self._bucket = TokenBucket(rpm, sleep=sleep) if rpm else None
        self._semaphore = threading.BoundedSemaphore(max_concurrency)
        self._sleep = sleep
        self._lock = threading.Lock()
        self._key_locks: dict[str, threading.Lock] = {}
        self.stats = ClientStats()

    def _cache_path(self, digest: str) -> Path:
        return self.cache_dir / f"{digest}.json"

    def _read_cache(self, digest: str) -> VlmResponse | None:
        path = self._cache_path(digest)
        if not path.is_file():
            return None
        entry = json.loads(path.read_text(encoding="utf-8"))
        return VlmResponse(
            text=entry["text"],
            request_id=entry["request_id"],
            model_id=entry["model_id"],
            cached=True,
        )

    def _store(self, digest: str, request: VlmRequest, raw: str) -> None:
        entry = {
            "request_id": request_id_for(digest),
            "model_id": request.model_id,
            "text": raw,
            "raw": raw,
        }
        write_text_atomic(self._cache_path(digest), json.dumps(entry, ensure_ascii=False, sort_keys=True))

    def _key_lock(self, digest: str) -> threading.Lock:
        with self._lock:
            return self._key_locks.setdefault(digest, threading.Lock())

    def complete(self, request: VlmRequest) -> VlmResponse:
        """Serve from cache, or call upstream with backoff on throttling."""
        digest = cache_key(request)
        cached = self._read_cache(digest)
        if cached is not None:
            with self._lock:
                self.stats.cache_hits += 1
            return cached

        with self._key_lock(digest):
            # Another thread may have filled the entry while we waited.
            cached = self._read_cache(digest)
            if cached is not None:
                with self._lock:
                    self.stats.cache_hits += 1
                return cached

            delay = BACKOFF_BASE_SECONDS
            for attempt in range(1, MAX_ATTEMPTS + 1):
                if self._bucket is not None:
                    self._bucket.acquire()
                try:
                    with self._semaphore:
                        raw = self.backend.send(request)
                except Throttled:
                    with self._lock:
                        self.stats.upstream_calls += 1
                    if attempt == MAX_ATTEMPTS:
                        raise RateLimited(f"still throttled after {MAX_ATTEMPTS} attempts")
                    with self._lock:
                        self.stats.retries += 1
                    self._sleep(delay)
                    delay *= BACKOFF_FACTOR
                    continue
                with self._lock:
                    self.stats.upstream_calls += 1
                self._store(digest, request, raw)
                return VlmResponse(
                    text=raw,
                    request_id=request_id_for(digest),
                    model_id=request.model_id,
                    cached=False,
                )
        raise AssertionError("unreachable")


def build_backend(spec: str, api_key: str | None = None) -> VlmBackend:
    """Backend selector: ``mock:<script.json>`` or an HTTP(S) endpoint URL."""
    if spec.startswith("mock:"):
        return ScriptedVlmBackend.from_script(spec[len("mock:"):])
    if spec.startswith("http://") or spec.startswith("https://"):
        return HttpVlmBackend(spec, api_key=api_key)
    raise ValueError(f"unrecognized VLM backend spec {spec!r}")
