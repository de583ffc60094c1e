"""Completion backends: remote chat-completion endpoint, scripted playback and
a persistent record/replay cache.

All backends expose ``complete(request) -> str`` and are safe to call from
several threads.
"""

from __future__ import annotations

import collections
import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Protocol, Sequence, Union

import httpx

log = logging.getLogger(__name__)

API_KEY_ENV = "USERSIM_API_KEY"


class LLMError(RuntimeError):
    pass


class RetriesExhaustedError(LLMError):
    pass


class RequestTimeoutError(LLMError):
    pass


class AuthenticationError(LLMError):
    pass


class QueueExhaustedError(LLMError):
    pass


class CacheMissError(LLMError):
    pass


@dataclass(frozen=True)
class CompletionRequest:
    prompt: str
    model_id: str = "gpt-4"
    temperature: float = 0.0
    max_tokens: int = 16
    stop: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    def cache_key(self) -> str:
        payload = json.dumps(
            [self.prompt, self.model_id, float(self.temperature), int(self.max_tokens)],
            ensure_ascii=False,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class Backend(Protocol):
    def complete(self, request: CompletionRequest) -> str: ...


class RemoteBackend:
    """Chat-completion client with exponential backoff on transient failures."""

    TRANSIENT_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}

    def __init__(
        self,
        base_url: str,
        api_key: Optional[str] = None,
        timeout: float = 60.0,
        max_attempts: int = 5,
        backoff_base: float = 1.0,
        backoff_factor: float = 2.0,
        max_in_flight: int = 4,
        system_prompt: Optional[str] = None,
        transport: Optional[httpx.BaseTransport] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.url = base_url.rstrip("/") + "/chat/completions"
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self.backoff_factor = backoff_factor
        self.system_prompt = system_prompt
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._http = httpx.Client(timeout=timeout, transport=transport)

    def _body(self, request: CompletionRequest) -> dict:
        messages = []
        if self.system_prompt:
            messages.append({"role": "system", "content": self.system_prompt})
        messages.append({"role": "user", "content": request.prompt})
        body = {
            "model": request.model_id,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        if request.stop:
            body["stop"] = list(request.stop)
        return body

    def complete(self, request: CompletionRequest) -> str:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        body = self._body(request)
        delay = self.backoff_base
        last: Optional[Exception] = None
        with self._slots:
            for attempt in range(1, self.max_attempts + 1):
                try:
                    resp = self._http.post(self.url, json=body, headers=headers)
                except httpx.TimeoutException as exc:
                    last = exc
                except httpx.TransportError as exc:
                    last = exc
                else:
                    if resp.status_code in (401, 403):
                        raise AuthenticationError(f"endpoint rejected credentials ({resp.status_code})")
                    if resp.status_code < 400:
                        try:
                            return resp.json()["choices"][0]["message"]["content"] or ""
                        except (ValueError, KeyError, IndexError, TypeError) as exc:
                            raise LLMError(f"unexpected response body: {resp.text[:200]!r}") from exc
                    if resp.status_code not in self.TRANSIENT_STATUS:
                        raise LLMError(f"request failed with HTTP {resp.status_code}: {resp.text[:200]!r}")
                    last = LLMError(f"HTTP {resp.status_code}")
                if attempt < self.max_attempts:
                    log.warning("completion attempt %d/%d failed (%s); retrying in %.1fs",
                                attempt, self.max_attempts, last, delay)
                    self._sleep(delay)
                    delay *= self.backoff_factor
        if isinstance(last, httpx.TimeoutException):
            raise RequestTimeoutError(f"request timed out after {self.max_attempts} attempts") from last
        raise RetriesExhaustedError(f"request failed after {self.max_attempts} attempts: {last}") from last

    def close(self) -> None:
        self._http.close()


class ScriptedBackend:
    """Canned responses.

    Given a sequence, responses are popped in call order. Given a callable,
    each response is computed from the request, which keeps replay
    independent of call order when requests are issued concurrently.
    """

    def __init__(self, responses: Union[Sequence[str], Callable[[CompletionRequest], str]]):
        self._fn = responses if callable(responses) else None
        self._queue = collections.deque([] if callable(responses) else responses)
        self._lock = threading.Lock()
        self.requests: list[CompletionRequest] = []

    def complete(self, request: CompletionRequest) -> str:
        with self._lock:
            self.requests.append(request)
            if self._fn is not None:
                return self._fn(request)
            if not self._queue:
                raise QueueExhaustedError("scripted backend has no responses left")
            return self._queue.popleft()

    @property
    def calls(self) -> int:
        return len(self.requests)


@dataclass(frozen=True)
class CacheEntry:
    key: str
    response: str
    timestamp: float
    model_id: str = ""
    metadata: Mapping = field(default_factory=dict)

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["metadata"] = dict(self.metadata)
        return rec

    @classmethod
    def from_record(cls, rec: Mapping) -> CacheEntry:
        return cls(
            key=str(rec["key"]),
            response=str(rec["response"]),
            timestamp=float(rec["timestamp"]),
            model_id=str(rec.get("model_id", "")),
            metadata=dict(rec.get("metadata") or {}),
        )


class ResponseCache:
    """Key -> response store, optionally persisted as JSON lines."""

    def __init__(self, path: Optional[str | Path] = None):
        self.path = Path(path) if path else None
        self._entries: dict[str, CacheEntry] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        if self.path and self.path.exists():
            self.import_cache(self.path, persist=False)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def entries(self) -> list[CacheEntry]:
        with self._lock:
            return sorted(self._entries.values(), key=lambda e: e.key)

    def get(self, key: str) -> Optional[CacheEntry]:
        with self._lock:
            entry = self._entries.get(key)
            if entry is None:
                self.misses += 1
            else:
                self.hits += 1
            return entry

    def put(self, entry: CacheEntry) -> None:
        with self._lock:
            self._merge(entry)
            if self.path:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as f:
                    f.write(json.dumps(entry.to_record(), ensure_ascii=False) + "\n")

    def _merge(self, entry: CacheEntry) -> bool:
        current = self._entries.get(entry.key)
        if current is None or entry.timestamp > current.timestamp:
            self._entries[entry.key] = entry
            return True
        return False

    def export_cache(self, path: str | Path) -> int:
        entries = self.entries()
        with open(path, "w", encoding="utf-8") as f:
            for e in entries:
                f.write(json.dumps(e.to_record(), ensure_ascii=False, sort_keys=True) + "\n")
        return len(entries)

    def import_cache(self, path: str | Path, persist: bool = True) -> tuple[int, int]:
        """Merge records from ``path``; newest timestamp wins per key.

        Returns ``(merged, corrupt)`` counts; corrupt lines are skipped.
        """
        merged = corrupt = 0
        new: list[CacheEntry] = []
        with open(path, encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                try:
                    entry = CacheEntry.from_record(json.loads(line))
                except (ValueError, KeyError, TypeError):
                    corrupt += 1
                    continue
                with self._lock:
                    if self._merge(entry):
                        merged += 1
                        new.append(entry)
        if corrupt:
            log.warning("skipped %d corrupt cache record(s) in %s", corrupt, path)
        if persist and self.path and new and Path(path).resolve() != self.path.resolve():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as f:
                for e in new:
                    f.write(json.dumps(e.to_record(), ensure_ascii=False) + "\n")
        return merged, corrupt

    def stats(self) -> dict:
        return {"entries": len(self._entries), "hits": self.hits, "misses": self.misses}


class CachingBackend:
    """Serve from the cache; on a miss, ask ``upstream`` and record the answer.

    With ``upstream=None`` the backend is offline and a miss is an error.
    """

    def __init__(self, cache: ResponseCache, upstream: Optional[Backend] = None,
                 clock: Callable[[], float] = time.time, provider: str = ""):
        self.cache = cache
        self.upstream = upstream
        self.clock = clock
        self.provider = provider
        self.upstream_calls = 0
        self._lock = threading.Lock()

    def complete(self, request: CompletionRequest) -> str:
        key = request.cache_key()
        hit = self.cache.get(key)
        if hit is not None:
            return hit.response
        if self.upstream is None:
            raise CacheMissError(f"no cached response for key {key[:16]}")
        text = self.upstream.complete(request)
        with self._lock:
            self.upstream_calls += 1
        self.cache.put(CacheEntry(key, text, self.clock(), request.model_id,
                                  {"provider": self.provider} if self.provider else {}))
        return text


def entries_from(pairs: Iterable[tuple[CompletionRequest, str]], timestamp: float = 0.0) -> list[CacheEntry]:
    return [CacheEntry(r.cache_key(), text, timestamp, r.model_id) for r, text in pairs]
