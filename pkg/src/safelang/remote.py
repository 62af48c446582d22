"""HTTP clients for remote text-completion and embedding services.

Both clients share one retry loop: transport errors, timeouts, 5xx/429
responses and empty payloads are retried up to ``max_retries`` times, after
which :class:`RemoteUnavailable` is raised. Results are cached in-process.
"""

from __future__ import annotations

import hashlib
import logging
import os
import threading
import time
from dataclasses import dataclass

import httpx
import numpy as np

log = logging.getLogger(__name__)


class RemoteError(Exception):
    """A single failed request. ``retryable`` marks transient failures."""

    def __init__(self, message: str, retryable: bool = True):
        super().__init__(message)
        self.retryable = retryable


class RemoteUnavailable(RemoteError):
    """All attempts failed."""


@dataclass(frozen=True)
class RemoteConfig:
    endpoint: str
    auth_env: str | None = None
    timeout_ms: int = 10_000
    max_retries: int = 3
    backoff_s: float = 0.5
    model: str | None = None
    prompt_path: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "RemoteConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown remote config keys: {sorted(unknown)}")
        if "endpoint" not in d:
            raise ValueError("remote config needs an endpoint")
        return cls(**d)


def sha256(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class ResponseCache:
    """Thread-safe memo; reads are lock-free dict lookups, writes are serialized."""

    def __init__(self):
        self._data: dict = {}
        self._lock = threading.Lock()

    def get(self, key):
        return self._data.get(key)

    def put(self, key, value):
        with self._lock:
            self._data.setdefault(key, value)
            return self._data[key]

    def __len__(self):
        return len(self._data)


class _JsonClient:
    def __init__(self, config: RemoteConfig, http: httpx.Client | None = None):
        self.config = config
        self._http = http or httpx.Client()
        self.calls = 0

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.config.auth_env:
            token = os.environ.get(self.config.auth_env)
            if token:
                headers["Authorization"] = f"Bearer {token}"
        return headers

    def _once(self, payload: dict):
        self.calls += 1
        try:
            resp = self._http.post(self.config.endpoint, json=payload, headers=self._headers(),
                                   timeout=self.config.timeout_ms / 1000.0)
        except httpx.TimeoutException as exc:
            raise RemoteError(f"timeout: {exc}") from exc
        except httpx.TransportError as exc:
            raise RemoteError(f"transport failure: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise RemoteError(f"server returned HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise RemoteError(f"request rejected with HTTP {resp.status_code}", retryable=False)
        try:
            return resp.json()
        except ValueError as exc:
            raise RemoteError("response is not JSON") from exc

    def request(self, payload: dict, parse):
        last = None
        for attempt in range(self.config.max_retries + 1):
            try:
                return parse(self._once(payload))
            except RemoteError as exc:
                if not exc.retryable:
                    raise
                last = exc
                log.warning("remote attempt %d/%d failed: %s", attempt + 1,
                            self.config.max_retries + 1, exc)
                if attempt < self.config.max_retries and self.config.backoff_s > 0:
                    time.sleep(self.config.backoff_s * 2 ** attempt)
        raise RemoteUnavailable(f"{self.config.endpoint} unavailable after "
                                f"{self.config.max_retries + 1} attempts: {last}")


def _completion_text(body) -> str:
    # accepts {"text": ...} or the chat-completions shape
    text = None
    if isinstance(body, dict):
        if isinstance(body.get("text"), str):
            text = body["text"]
        elif body.get("choices"):
            choice = body["choices"][0]
            text = (choice.get("message") or {}).get("content") or choice.get("text")
    if not text or not text.strip():
        raise RemoteError("empty completion")
    return text


def _embedding_vector(body) -> np.ndarray:
    vec = None
    if isinstance(body, dict):
        if "embedding" in body:
            vec = body["embedding"]
        elif body.get("data"):
            vec = body["data"][0].get("embedding")
    if not vec:
        raise RemoteError("empty embedding")
    arr = np.asarray(vec, dtype=float)
    if arr.ndim != 1 or not np.all(np.isfinite(arr)):
        raise RemoteError("malformed embedding", retryable=False)
    return arr


class RemoteTextClient(_JsonClient):
    """POSTs ``{"prompt": ..., "model": ...}``; returns the completion text."""

    def complete(self, prompt: str) -> str:
        payload = {"prompt": prompt}
        if self.config.model:
            payload["model"] = self.config.model
        return self.request(payload, _completion_text)


class RemoteEmbeddingClient(_JsonClient):
    """POSTs ``{"input": text}``; returns the service vector verbatim.

    The first vector fixes the dimension; later vectors of another size raise
    ``ValueError``.
    """

    def __init__(self, config: RemoteConfig, http: httpx.Client | None = None):
        super().__init__(config, http)
        self.cache = ResponseCache()
        self.dim: int | None = None

    def embed(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("cannot embed empty text")
        hit = self.cache.get(text)
        if hit is not None:
            return hit
        payload = {"input": text}
        if self.config.model:
            payload["model"] = self.config.model
        vec = self.request(payload, _embedding_vector)
        if self.dim is None:
            self.dim = vec.size
        elif vec.size != self.dim:
            raise ValueError(f"embedding dimension {vec.size} != first-seen {self.dim}")
        vec.setflags(write=False)
        return self.cache.put(text, vec)
