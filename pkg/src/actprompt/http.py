"""JSON POST with retry and exponential backoff, shared by the service clients."""

from __future__ import annotations

import logging
import os
import time
from typing import Any, Callable

import httpx

from .errors import AuthError, HttpError

logger = logging.getLogger(__name__)

RETRY_STATUSES = frozenset({408, 425, 429, 500, 502, 503, 504})


def auth_headers(api_key_env: str | None) -> dict[str, str]:
    headers = {"Content-Type": "application/json"}
    key = os.environ.get(api_key_env) if api_key_env else None
    if key:
        headers["Authorization"] = f"Bearer {key}"
    return headers


def post_json(
    client: httpx.Client,
    url: str,
    payload: dict,
    *,
    headers: dict[str, str],
    max_attempts: int = 4,
    backoff_base: float = 0.5,
    backoff_factor: float = 2.0,
    sleep: Callable[[float], None] = time.sleep,
    on_attempt: Callable[[], None] | None = None,
) -> Any:
    """POST ``payload`` and return the decoded JSON body.

    401/403 raise :class:`AuthError` at once. Other 4xx raise
    :class:`HttpError` at once. 5xx, 408/425/429 and transport errors are
    retried, sleeping ``backoff_base * backoff_factor**k`` before retry k+1.
    """
    last: HttpError | None = None
    for attempt in range(max_attempts):
        if attempt:
            sleep(backoff_base * backoff_factor ** (attempt - 1))
        if on_attempt is not None:
            on_attempt()
        try:
            resp = client.post(url, json=payload, headers=headers)
        except httpx.TransportError as exc:
            last = HttpError(None, str(exc))
            logger.warning("attempt %d/%d to %s failed: %s", attempt + 1, max_attempts, url, exc)
            continue
        if resp.status_code in (401, 403):
            raise AuthError(resp.status_code, resp.text[:200])
        if resp.status_code in RETRY_STATUSES:
            last = HttpError(resp.status_code, resp.text[:200])
            logger.warning("attempt %d/%d to %s got HTTP %d", attempt + 1, max_attempts, url, resp.status_code)
            continue
        if resp.status_code >= 400:
            raise HttpError(resp.status_code, resp.text[:200])
        try:
            return resp.json()
        except ValueError as exc:
            raise HttpError(resp.status_code, f"response is not JSON: {exc}") from exc
    assert last is not None
    raise last
