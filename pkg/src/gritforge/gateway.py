"""Chat-completion HTTP client with file cache, retry, and strict offline mode.

Wire protocol: POST with JSON body {model, messages, temperature,
max_tokens} and a bearer-token header; the reply text is read from the
first choice.  Every successful response lands in a one-file-per-key
cache, so reruns are free and --offline can serve entirely from disk.

Configuration env vars: GRIT_LLM_ENDPOINT, GRIT_LLM_API_KEY, GRIT_LLM_MODEL.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

BACKOFF_BASE_SECONDS = 1.0
BACKOFF_FACTOR = 2.0
MAX_ATTEMPTS = 5
DEFAULT_MAX_IN_FLIGHT = 4

ENV_ENDPOINT = "GRIT_LLM_ENDPOINT"
ENV_API_KEY = "GRIT_LLM_API_KEY"
ENV_MODEL = "GRIT_LLM_MODEL"


class GatewayError(Exception):
    pass


class AuthError(GatewayError):
    """Credential rejected; never retried."""


class RateLimited(GatewayError):
    """Server asked us to slow down; retryable."""


class TransportError(GatewayError):
    """Connection failure or malformed/5xx response; retryable."""


class OfflineMiss(GatewayError):
    """Offline mode and the request is not in the cache."""


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[tuple[str, str], ...]
    temperature: float = 0.0
    max_tokens: int = 1024

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("chat request needs at least one message")
        if not (0.0 <= self.temperature <= 2.0):
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")

    @classmethod
    def build(cls, model: str, messages: Sequence[tuple[str, str]], **kw) -> "ChatRequest":
        return cls(model=model, messages=tuple((r, c) for r, c in messages), **kw)

    def body(self) -> dict:
        return {
            "model": self.model,
            "messages": [{"role": r, "content": c} for r, c in self.messages],
            "temperature": float(self.temperature),
            "max_tokens": int(self.max_tokens),
        }


def canonical_key(req: ChatRequest) -> str:
    """Digest stable across field ordering and reruns."""
    payload = json.dumps(req.body(), sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class ResponseCache:
    """One JSON file per canonical key; writes are atomic via rename."""

    def __init__(self, directory: Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def get(self, key: str) -> str | None:
        path = self._path(key)
        if not path.exists():
            return None
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)["response"]

    def put(self, key: str, response: str) -> None:
        entry = {"key": key, "response": response, "created_at": time.time()}
        fd, tmp = tempfile.mkstemp(suffix=".tmp", dir=self.directory)
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(entry, fh, ensure_ascii=False)
        os.replace(tmp, self._path(key))


def _requests_transport(url: str, headers: dict, body: dict, timeout: float) -> tuple[int, str]:
    import requests

    try:
        resp = requests.post(url, headers=headers, json=body, timeout=timeout)
    except requests.RequestException as exc:
        raise TransportError(str(exc)) from exc
    return resp.status_code, resp.text


Transport = Callable[[str, dict, dict, float], tuple[int, str]]


class ChatClient:
    """Cached, rate-limited chat client.

    ``transport`` is injectable for tests; ``sleep`` and ``clock`` likewise
    so backoff and rate limiting can be asserted without waiting.
    """

    def __init__(
        self,
        endpoint: str | None,
        api_key: str | None,
        cache: ResponseCache,
        offline: bool = False,
        transport: Transport | None = None,
        requests_per_minute: float | None = 60.0,
        max_in_flight: int = DEFAULT_MAX_IN_FLIGHT,
        timeout: float = 60.0,
        sleep: Callable[[float], None] = time.sleep,
        clock: Callable[[], float] = time.monotonic,
    ):
        self.endpoint = endpoint
        self.api_key = api_key
        self.cache = cache
        self.offline = offline
        self.transport = transport or _requests_transport
        self.requests_per_minute = requests_per_minute
        self.timeout = timeout
        self._sleep = sleep
        self._clock = clock
        self._semaphore = threading.BoundedSemaphore(max_in_flight)
        self._rate_lock = threading.Lock()
        self._next_slot = 0.0
        self.network_calls = 0

    @classmethod
    def from_env(cls, cache_dir: Path, offline: bool = False, **kw) -> "ChatClient":
        return cls(
            endpoint=os.environ.get(ENV_ENDPOINT),
            api_key=os.environ.get(ENV_API_KEY),
            cache=ResponseCache(cache_dir),
            offline=offline,
            **kw,
        )

    def chat(self, req: ChatRequest) -> str:
        key = canonical_key(req)
        cached = self.cache.get(key)
        if cached is not None:
            return cached
        if self.offline:
            raise OfflineMiss(f"offline mode, no cache entry for {key[:12]}…")
        if not self.endpoint:
            raise TransportError(f"no endpoint configured (set {ENV_ENDPOINT})")
        with self._semaphore:
            response = self._request_with_retry(req)
        self.cache.put(key, response)
        return response

    def _throttle(self) -> None:
        if not self.requests_per_minute:
            return
        interval = 60.0 / self.requests_per_minute
        with self._rate_lock:
            now = self._clock()
            wait = self._next_slot - now
            self._next_slot = max(now, self._next_slot) + interval
        if wait > 0:
            self._sleep(wait)

    def _request_with_retry(self, req: ChatRequest) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = req.body()
        last_error: GatewayError | None = None
        for attempt in range(1, MAX_ATTEMPTS + 1):
            self._throttle()
            try:
                self.network_calls += 1
                status, text = self.transport(self.endpoint, headers, body, self.timeout)
                if status in (401, 403):
                    raise AuthError(f"HTTP {status}: {text[:200]}")
                if status == 429:
                    raise RateLimited(f"HTTP 429: {text[:200]}")
                if status != 200:
                    raise TransportError(f"HTTP {status}: {text[:200]}")
                return self._extract_text(text)
            except (RateLimited, TransportError) as exc:
                last_error = exc
                if attempt < MAX_ATTEMPTS:
                    self._sleep(BACKOFF_BASE_SECONDS * BACKOFF_FACTOR ** (attempt - 1))
        assert last_error is not None
        raise last_error

    @staticmethod
    def _extract_text(body_text: str) -> str:
        try:
            payload = json.loads(body_text)
            return payload["choices"][0]["message"]["content"]
        except (json.JSONDecodeError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed completion response: {exc}") from exc
