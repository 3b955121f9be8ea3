"""Client for an OpenAI-compatible ``/embeddings`` endpoint."""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import httpx
import numpy as np

from .errors import DimMismatch, EmptyInput, SchemaError
from .http import auth_headers, post_json
from .store import KIND_PROMPT_TEXTS, EmbeddingManifest, EmbeddingMatrix, l2_normalize


@dataclass
class EmbeddingEndpoint:
    url: str
    model: str = "text-embedding-3-small"
    api_key_env: str | None = "EMBEDDING_API_KEY"
    batch_size: int = 64
    timeout: float = 60.0
    max_attempts: int = 4
    backoff_base: float = 0.5


def _parse_batch(body, n: int) -> list[list[float]]:
    try:
        data = body["data"]
        rows = {int(item["index"]): item["embedding"] for item in data}
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"unexpected embedding response: {exc}") from exc
    if len(data) != n or sorted(rows) != list(range(n)):
        raise SchemaError(f"expected {n} vectors indexed 0..{n - 1}, got indices {sorted(rows)}")
    return [rows[i] for i in range(n)]


def fetch_text_embeddings(
    texts: Sequence[str],
    endpoint: EmbeddingEndpoint,
    *,
    transport: httpx.BaseTransport | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> EmbeddingMatrix:
    """Embed ``texts`` (in order) and return a row-normalized matrix."""
    texts = list(texts)
    if not texts:
        raise EmptyInput("no texts to embed")
    headers = auth_headers(endpoint.api_key_env)
    vectors: list[list[float]] = []
    with httpx.Client(transport=transport, timeout=endpoint.timeout) as client:
        for start in range(0, len(texts), endpoint.batch_size):
            chunk = texts[start : start + endpoint.batch_size]
            body = post_json(
                client,
                endpoint.url,
                {"input": chunk, "model": endpoint.model},
                headers=headers,
                max_attempts=endpoint.max_attempts,
                backoff_base=endpoint.backoff_base,
                sleep=sleep,
            )
            vectors.extend(_parse_batch(body, len(chunk)))
    dims = {len(v) for v in vectors}
    if len(dims) != 1:
        raise DimMismatch(f"service returned vectors of dims {sorted(dims)}")
    try:
        arr = np.asarray(vectors, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"embedding values are not numeric: {exc}") from exc
    return l2_normalize(arr)


def embed_bank(
    bank,
    endpoint: EmbeddingEndpoint,
    out_dir: str | os.PathLike,
    *,
    transport: httpx.BaseTransport | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> EmbeddingManifest:
    """Embed every prompt of a :class:`PromptBank`; one manifest entry per action, rows in bank order.

    Writes ``out_dir/manifest.json`` and returns the manifest.
    """
    out = Path(out_dir)
    manifest = EmbeddingManifest(KIND_PROMPT_TEXTS, [], out)
    for action in bank.actions:
        m = fetch_text_embeddings(bank.texts(action), endpoint, transport=transport, sleep=sleep)
        manifest.add(action, m)
    manifest.save(out / "manifest.json")
    return manifest


def hash_embedding(text: str, dim: int) -> np.ndarray:
    """Deterministic pseudo-embedding of ``text`` (offline stand-in, no semantics)."""
    seed = int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")
    return np.random.default_rng(seed).standard_normal(dim)


def stub_embedding_transport(dim: int = 64) -> httpx.MockTransport:
    """An ``/embeddings`` look-alike returning :func:`hash_embedding` vectors."""

    def handler(request: httpx.Request) -> httpx.Response:
        payload = json.loads(request.content)
        data = [
            {"object": "embedding", "index": i, "embedding": hash_embedding(t, dim).tolist()}
            for i, t in enumerate(payload["input"])
        ]
        return httpx.Response(200, json={"object": "list", "data": data, "model": payload.get("model")})

    return httpx.MockTransport(handler)
