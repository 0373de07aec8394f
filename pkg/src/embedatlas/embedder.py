"""Client for the external embedder service, plus a deterministic mock.

Wire contract: POST {url}/embed with body

    {"modality": "text",  "inputs": ["query", ...]}
    {"modality": "audio", "inputs": [{"data": "<base64>", "format": "wav"}]}

returning {"dim": int, "embeddings": [[...], ...]}. Responses are validated
(dimension, finiteness) and rows are normalized on receipt. Connectivity
failures raise EmbedderUnreachable; contract violations raise
EmbedderResponseError, so callers can report the two distinctly.

The mock maps any input to a unit vector through a seeded hash, so the whole
pipeline is reproducible without a model. Inputs of the form
"vector:[1.0, 0.0, ...]" (as text, or as UTF-8 audio bytes) decode to that
exact vector, normalized - tests use this to issue semantically meaningful
queries.
"""

from __future__ import annotations

import base64
import hashlib
import json
import threading
from dataclasses import dataclass

import httpx
import numpy as np

MOCK_URL = "mock:"
VECTOR_PREFIX = "vector:"

DEFAULT_TIMEOUT = 10.0
DEFAULT_MAX_CONCURRENCY = 4


class EmbedderError(Exception):
    """Base class for embedder failures."""


class EmbedderUnreachable(EmbedderError):
    """Timeout or connection failure before a response arrived."""


class EmbedderResponseError(EmbedderError):
    """The embedder answered, but outside the wire contract."""


@dataclass(frozen=True)
class EmbedderContract:
    url: str
    dim: int
    timeout: float = DEFAULT_TIMEOUT


def _validate_rows(rows: list, n_inputs: int, dim: int) -> np.ndarray:
    try:
        arr = np.asarray(rows, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise EmbedderResponseError(f"embeddings are not numeric: {exc}") from exc
    if arr.ndim != 2 or arr.shape[0] != n_inputs:
        raise EmbedderResponseError(
            f"expected {n_inputs} embedding rows, got shape {arr.shape}"
        )
    if arr.shape[1] != dim:
        raise EmbedderResponseError(
            f"dimension mismatch: embedder returned {arr.shape[1]}, expected {dim}"
        )
    if not np.isfinite(arr).all():
        raise EmbedderResponseError("non-finite component in embedder response")
    norms = np.linalg.norm(arr, axis=1)
    if (norms == 0.0).any():
        raise EmbedderResponseError("zero vector in embedder response")
    return (arr / norms[:, None]).astype(np.float32)


class MockEmbedder:
    """Pure deterministic embedder: hash input -> seeded Gaussian -> unit."""

    def __init__(self, seed: int = 0):
        self.seed = seed

    def _vector_for(self, modality: str, payload: bytes, dim: int) -> np.ndarray:
        try:
            text = payload.decode("utf-8")
        except UnicodeDecodeError:
            text = None
        if text is not None and text.startswith(VECTOR_PREFIX):
            values = json.loads(text[len(VECTOR_PREFIX) :])
            arr = np.asarray(values, dtype=np.float64)
            if arr.shape != (dim,):
                raise ValueError(
                    f"vector literal has dim {arr.shape}, expected {dim}"
                )
            return arr
        digest = hashlib.sha256(
            f"{self.seed}|{modality}|".encode() + payload
        ).digest()
        rng = np.random.default_rng(np.frombuffer(digest, dtype=np.uint64))
        return rng.standard_normal(dim)

    def embed_text(self, queries: list[str], dim: int) -> np.ndarray:
        rows = [self._vector_for("text", q.encode("utf-8"), dim) for q in queries]
        return _validate_rows([r.tolist() for r in rows], len(queries), dim)

    def embed_audio(self, payload: bytes, fmt: str, dim: int) -> np.ndarray:
        row = self._vector_for("audio", payload, dim)
        return _validate_rows([row.tolist()], 1, dim)[0]


class EmbedderClient:
    """HTTP client for the embed endpoint; bounded concurrency, validated
    responses."""

    def __init__(
        self,
        url: str,
        timeout: float = DEFAULT_TIMEOUT,
        max_concurrency: int = DEFAULT_MAX_CONCURRENCY,
        transport: httpx.BaseTransport | None = None,
    ):
        self.url = url.rstrip("/")
        self.timeout = timeout
        self._semaphore = threading.Semaphore(max_concurrency)
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def close(self) -> None:
        self._client.close()

    def _post(self, body: dict) -> dict:
        with self._semaphore:
            try:
                response = self._client.post(f"{self.url}/embed", json=body)
            except (httpx.TimeoutException, httpx.TransportError) as exc:
                raise EmbedderUnreachable(f"embedder unreachable: {exc}") from exc
        if response.status_code != 200:
            raise EmbedderResponseError(
                f"embedder returned HTTP {response.status_code}"
            )
        try:
            doc = response.json()
        except ValueError as exc:
            raise EmbedderResponseError("embedder returned invalid JSON") from exc
        if not isinstance(doc, dict) or "embeddings" not in doc or "dim" not in doc:
            raise EmbedderResponseError("embedder response missing dim/embeddings")
        return doc

    def embed_text(self, queries: list[str], dim: int) -> np.ndarray:
        if not queries or any(not q for q in queries):
            raise ValueError("queries must be non-empty strings")
        doc = self._post({"modality": "text", "inputs": list(queries)})
        if doc["dim"] != dim:
            raise EmbedderResponseError(
                f"dimension mismatch: embedder returned {doc['dim']}, expected {dim}"
            )
        return _validate_rows(doc["embeddings"], len(queries), dim)

    def embed_audio(self, payload: bytes, fmt: str, dim: int) -> np.ndarray:
        if not payload:
            raise ValueError("audio payload must be non-empty")
        body = {
            "modality": "audio",
            "inputs": [{"data": base64.b64encode(payload).decode("ascii"), "format": fmt}],
        }
        doc = self._post(body)
        if doc["dim"] != dim:
            raise EmbedderResponseError(
                f"dimension mismatch: embedder returned {doc['dim']}, expected {dim}"
            )
        return _validate_rows(doc["embeddings"], 1, dim)[0]


class MockEmbedderBackend:
    """MockEmbedder behind the EmbedderClient interface, for in-process use."""

    def __init__(self, seed: int = 0):
        self._mock = MockEmbedder(seed)

    def close(self) -> None:
        pass

    def embed_text(self, queries: list[str], dim: int) -> np.ndarray:
        if not queries or any(not q for q in queries):
            raise ValueError("queries must be non-empty strings")
        try:
            return self._mock.embed_text(queries, dim)
        except ValueError as exc:
            raise EmbedderResponseError(str(exc)) from exc

    def embed_audio(self, payload: bytes, fmt: str, dim: int) -> np.ndarray:
        if not payload:
            raise ValueError("audio payload must be non-empty")
        try:
            return self._mock.embed_audio(payload, fmt, dim)
        except ValueError as exc:
            raise EmbedderResponseError(str(exc)) from exc


def make_embedder(
    url: str,
    timeout: float = DEFAULT_TIMEOUT,
    max_concurrency: int = DEFAULT_MAX_CONCURRENCY,
    transport: httpx.BaseTransport | None = None,
    mock_seed: int = 0,
):
    """Embedder backend for a URL; the "mock:" scheme selects the in-process
    deterministic mock."""
    if url.startswith(MOCK_URL):
        suffix = url[len(MOCK_URL) :]
        seed = int(suffix) if suffix else mock_seed
        return MockEmbedderBackend(seed)
    return EmbedderClient(
        url, timeout=timeout, max_concurrency=max_concurrency, transport=transport
    )


def create_mock_embedder_app(seed: int = 0, dim: int = 64):
    """ASGI app serving the wire contract from the deterministic mock, for
    integration tests and local serving."""
    from fastapi import FastAPI, HTTPException

    app = FastAPI(title="mock embedder")
    mock = MockEmbedder(seed)

    @app.post("/embed")
    def embed(body: dict):
        modality = body.get("modality")
        inputs = body.get("inputs")
        if modality not in ("text", "audio") or not isinstance(inputs, list) or not inputs:
            raise HTTPException(status_code=422, detail="bad request body")
        rows = []
        try:
            if modality == "text":
                for q in inputs:
                    rows.append(mock._vector_for("text", str(q).encode("utf-8"), dim))
            else:
                for item in inputs:
                    payload = base64.b64decode(item["data"])
                    rows.append(mock._vector_for("audio", payload, dim))
        except (ValueError, KeyError, TypeError) as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        arr = np.asarray(rows, dtype=np.float64)
        norms = np.linalg.norm(arr, axis=1, keepdims=True)
        arr = arr / np.where(norms == 0.0, 1.0, norms)
        return {"dim": dim, "embeddings": arr.tolist()}

    return app
