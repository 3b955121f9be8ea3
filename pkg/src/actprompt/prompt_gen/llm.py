"""Chat-completions client with an on-disk reply cache."""

from __future__ import annotations

import hashlib
import logging
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import httpx

from .._io import atomic_write_text
from ..errors import SchemaError
from ..http import auth_headers, post_json

logger = logging.getLogger(__name__)


@dataclass
class LlmConfig:
    endpoint: str = "https://api.openai.com/v1/chat/completions"
    model: str = "gpt-4"
    api_key_env: str | None = "OPENAI_API_KEY"
    temperature: float = 0.0
    max_attempts: int = 4
    backoff_base: float = 0.5
    backoff_factor: float = 2.0
    timeout: float = 120.0
    cache_dir: str | None = None


def cache_key(model: str, query: str) -> str:
    """64-bit hash of (model, query) as 16 hex chars."""
    h = hashlib.blake2b(digest_size=8)
    h.update(model.encode("utf-8"))
    h.update(b"\x00")
    h.update(query.encode("utf-8"))
    return h.hexdigest()


class LlmClient:
    """Sends one-message chat requests; replies are cached one file per key.

    ``network_requests`` counts HTTP attempts actually made, which is how the
    tests observe cache hits.
    """

    def __init__(
        self,
        config: LlmConfig,
        *,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.config = config
        self._transport = transport
        self._sleep = sleep
        self._lock = threading.Lock()
        self.network_requests = 0
        self.cache_hits = 0

    def _cache_path(self, query: str) -> Path | None:
        if not self.config.cache_dir:
            return None
        return Path(self.config.cache_dir) / f"{cache_key(self.config.model, query)}.txt"

    def _count(self) -> None:
        with self._lock:
            self.network_requests += 1

    def complete(self, query: str) -> str:
        path = self._cache_path(query)
        if path is not None and path.is_file():
            with self._lock:
                self.cache_hits += 1
            return path.read_text(encoding="utf-8")
        payload = {
            "model": self.config.model,
            "messages": [{"role": "user", "content": query}],
            "temperature": self.config.temperature,
        }
        with httpx.Client(transport=self._transport, timeout=self.config.timeout) as client:
            body = post_json(
                client,
                self.config.endpoint,
                payload,
                headers=auth_headers(self.config.api_key_env),
                max_attempts=self.config.max_attempts,
                backoff_base=self.config.backoff_base,
                backoff_factor=self.config.backoff_factor,
                sleep=self._sleep,
                on_attempt=self._count,
            )
        try:
            text = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise SchemaError(f"unexpected chat response: {exc}") from exc
        if not isinstance(text, str):
            raise SchemaError("chat response content is not a string")
        if path is not None:
            atomic_write_text(path, text)
        return text


def request_descriptions(query: str, client: LlmClient) -> str:
    """Return the model's reply to ``query`` (from cache when available)."""
    return client.complete(query)
