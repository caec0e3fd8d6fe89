"""HTTP adapters for remote generation, embedding, and chat endpoints.

All adapters speak minimal JSON contracts:

- image backend: POST {positive, negative, steps, guidance, width, height,
  seed} -> raw image bytes in the response body.
- embedding provider: POST {kind: "text"|"image", content, model_id} ->
  {"pooled": [...], "tokens": [[...], ...]}.
- chat client: POST {system, user, model_id, temperature} -> {"text": "..."}.

Credentials come from per-adapter environment variables (never from config
files); transport failures and 5xx responses are retried by the callers via
:class:`t2ifuse.generation.TransientBackendError`.
"""

from __future__ import annotations

import base64
import os
from typing import Any

import numpy as np
import requests

from .generation import GenerationParams, TransientBackendError, GenerationError
from .prompting import ElaborationError


def _credential_env(name: str) -> str:
    return name.upper().replace("-", "_") + "_API_KEY"


def _headers(api_key_env: str | None) -> dict[str, str]:
    headers = {"Content-Type": "application/json"}
    if api_key_env:
        key = os.environ.get(api_key_env)
        if not key:
            raise GenerationError(f"missing credential: set ${api_key_env}")
        headers["Authorization"] = f"Bearer {key}"
    return headers


def _post(session, url: str, payload: dict, headers: dict, timeout: float):
    try:
        response = session.post(url, json=payload, headers=headers, timeout=timeout)
    except requests.RequestException as exc:
        raise TransientBackendError(f"transport failure calling {url}: {exc}") from exc
    if response.status_code >= 500:
        raise TransientBackendError(f"{url} returned {response.status_code}")
    if response.status_code >= 400:
        raise GenerationError(f"{url} rejected the request: {response.status_code}")
    return response


class HttpImageBackend:
    """Generic text-to-image endpoint adapter; provider specifics live in the
    endpoint URL and credential env var."""

    def __init__(
        self,
        backend_id: str,
        endpoint: str,
        *,
        api_key_env: str | None = None,
        timeout_s: float = 120.0,
        session: Any | None = None,
    ):
        self.backend_id = backend_id
        self.endpoint = endpoint
        self.api_key_env = api_key_env if api_key_env is not None else _credential_env(backend_id)
        self.timeout_s = timeout_s
        self.session = session if session is not None else requests.Session()

    def generate(self, positive: str, negative: str, params: GenerationParams) -> bytes:
        payload = {
            "positive": positive,
            "negative": negative,
            "steps": params.steps,
            "guidance": params.guidance_scale,
            "width": params.width,
            "height": params.height,
            "seed": params.seed,
        }
        response = _post(self.session, self.endpoint, payload, _headers(self.api_key_env), self.timeout_s)
        return response.content


class HttpEmbeddingProvider:
    """Remote encoder for both text and image content."""

    def __init__(
        self,
        provider_id: str,
        endpoint: str,
        dim: int,
        *,
        model_id: str | None = None,
        api_key_env: str | None = None,
        timeout_s: float = 60.0,
        session: Any | None = None,
    ):
        self.provider_id = provider_id
        self.endpoint = endpoint
        self.dim = dim
        self.model_id = model_id or provider_id
        self.api_key_env = api_key_env if api_key_env is not None else _credential_env(provider_id)
        self.timeout_s = timeout_s
        self.session = session if session is not None else requests.Session()

    def _request(self, kind: str, content: str) -> tuple[np.ndarray, np.ndarray]:
        payload = {"kind": kind, "content": content, "model_id": self.model_id}
        response = _post(self.session, self.endpoint, payload, _headers(self.api_key_env), self.timeout_s)
        body = response.json()
        pooled = np.asarray(body["pooled"], dtype=np.float32)
        tokens = np.asarray(body.get("tokens") or [body["pooled"]], dtype=np.float32)
        return pooled, tokens

    def encode_text(self, text: str) -> tuple[np.ndarray, np.ndarray]:
        return self._request("text", text)

    def encode_image(self, data: bytes) -> tuple[np.ndarray, np.ndarray]:
        return self._request("image", base64.b64encode(data).decode("ascii"))


class HttpChatClient:
    """Chat-completion-style rewrite endpoint; temperature defaults to 0 for
    reproducibility."""

    def __init__(
        self,
        client_id: str,
        endpoint: str,
        *,
        model_id: str | None = None,
        temperature: float = 0.0,
        api_key_env: str | None = None,
        timeout_s: float = 60.0,
        session: Any | None = None,
        retries: int = 3,
    ):
        self.client_id = client_id
        self.endpoint = endpoint
        self.model_id = model_id or client_id
        self.temperature = temperature
        self.api_key_env = api_key_env if api_key_env is not None else _credential_env(client_id)
        self.timeout_s = timeout_s
        self.session = session if session is not None else requests.Session()
        self.retries = retries

    def complete(self, system: str, user: str) -> str:
        payload = {
            "system": system,
            "user": user,
            "model_id": self.model_id,
            "temperature": self.temperature,
        }
        attempt = 0
        while True:
            attempt += 1
            try:
                response = _post(
                    self.session, self.endpoint, payload, _headers(self.api_key_env), self.timeout_s
                )
                break
            except TransientBackendError as exc:
                if attempt >= self.retries:
                    raise ElaborationError(str(exc), attempts=attempt) from exc
        return str(response.json()["text"])
