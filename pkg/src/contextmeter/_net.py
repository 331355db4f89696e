"""Shared HTTP plumbing for the search, rerank, and model backends."""

from __future__ import annotations

import time
from typing import Optional

import requests


def post_json(
    url: str,
    payload: dict,
    timeout: float,
    retries: int,
    error_cls,
    headers: Optional[dict] = None,
    backoff: float = 0.5,
) -> dict:
    """POST JSON with exponential backoff; 4xx fails fast, 5xx retries.

    ``error_cls`` must accept ``(message, retryable=...)``.
    """
    last_error: Optional[Exception] = None
    for attempt in range(retries + 1):
        try:
            response = requests.post(url, json=payload, timeout=timeout, headers=headers)
            if response.status_code >= 500:
                raise error_cls(f"{url} returned {response.status_code}", retryable=True)
            if response.status_code >= 400:
                raise error_cls(f"{url} returned {response.status_code}", retryable=False)
            return response.json()
        except error_cls as exc:
            if not exc.retryable:
                raise
            last_error = exc
        except requests.RequestException as exc:
            last_error = exc
        if attempt < retries:
            time.sleep(backoff * (2 ** attempt))
    raise error_cls(f"{url} failed after {retries + 1} attempts: {last_error}")
