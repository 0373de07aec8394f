"""HTTP query service: datasets, tiles, point details with neighbors,
text/audio/vector semantic search, and on-demand zero-shot reclassification.

Readers always work from a single immutable dataset snapshot grabbed at
request start, so responses never mix class-set versions; reclassification
builds a complete replacement snapshot off to the side and publishes it with
one atomic reference swap.
"""

from __future__ import annotations

import base64
import binascii
import threading
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request, Response
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from .ann import AnnForest, load_forest, query
from .config import ServiceConfig
from .embedder import EmbedderError, EmbedderUnreachable, make_embedder
from .store import (
    DatasetManifest,
    EmbeddingMatrix,
    PointMetadata,
    load_metadata,
    parse_manifest,
    read_embeddings,
)
from .tiles import (
    Tile,
    TileKey,
    TilePyramid,
    read_pyramid,
    serialize_tile,
    with_class_column,
)
from .tsne import Projection2D, read_projection
from .zeroshot import (
    ClassAssignment,
    ClassSet,
    LabelPlacement,
    MAX_CLASSES,
    UNASSIGNED,
    classify,
    place_labels,
    unassigned_assignment,
)

NORMALIZED_EMBEDDINGS = "normalized.aaem"
FOREST_FILE = "forest.aafo"
PROJECTION_FILE = "projection.aapj"
PYRAMID_DIR = "pyramid"


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str):
        self.status = status
        self.code = code
        self.message = message
        super().__init__(message)


@dataclass
class DatasetState:
    """Immutable snapshot of one served dataset; replaced whole on change."""

    manifest: DatasetManifest
    matrix: EmbeddingMatrix
    forest: AnnForest
    projection: Projection2D
    metadata: dict[int, PointMetadata]
    pyramid: TilePyramid
    tile_bytes: dict[TileKey, bytes]
    class_set: ClassSet | None
    assignment: ClassAssignment
    labels: list[LabelPlacement]
    version: int

    def consistency_errors(self) -> list[str]:
        errors = []
        if self.matrix.n != self.projection.n:
            errors.append("matrix and projection point counts differ")
        elif not np.array_equal(self.matrix.ids, self.projection.ids):
            errors.append("matrix and projection ids differ")
        if self.assignment.n != self.matrix.n:
            errors.append("assignment length differs from matrix")
        total = sum(t.count for t in self.pyramid.tiles.values())
        if total != self.matrix.n:
            errors.append(f"pyramid holds {total} points, matrix {self.matrix.n}")
        if self.pyramid.manifest.total_points != self.matrix.n:
            errors.append("pyramid manifest total differs from matrix")
        if self.class_set is not None:
            assigned = self.assignment.class_index
            valid = (assigned == UNASSIGNED) | (assigned < self.class_set.size)
            if not valid.all():
                errors.append("assignment references classes outside the class set")
        return errors


def _serialize_tiles(pyramid: TilePyramid) -> dict[TileKey, bytes]:
    return {key: serialize_tile(tile) for key, tile in pyramid.tiles.items()}


def load_dataset_state(root: str | Path) -> DatasetState:
    """Load the pipeline artifacts under a dataset root directory."""
    root = Path(root)
    manifest = parse_manifest(root / "manifest.json")
    store_path = root / NORMALIZED_EMBEDDINGS
    if not store_path.is_file():
        raise FileNotFoundError(f"missing {store_path}; run ingest first")
    matrix = read_embeddings(store_path)
    matrix = replace(matrix, normalized=True)
    forest = load_forest(root / FOREST_FILE, expected_dim=matrix.dim)
    projection = read_projection(root / PROJECTION_FILE)
    pyramid = read_pyramid(root / PYRAMID_DIR)
    metadata: dict[int, PointMetadata] = {}
    if manifest.metadata_path:
        metadata = load_metadata(
            root / manifest.metadata_path,
            ids=matrix.ids,
            media_url_template=manifest.media_url_template,
        )
    state = DatasetState(
        manifest=manifest,
        matrix=matrix,
        forest=forest,
        projection=projection,
        metadata=metadata,
        pyramid=pyramid,
        tile_bytes=_serialize_tiles(pyramid),
        class_set=None,
        assignment=unassigned_assignment(matrix.n, version=0),
        labels=[],
        version=0,
    )
    errors = state.consistency_errors()
    if errors:
        raise ValueError(f"dataset {manifest.name} inconsistent: {'; '.join(errors)}")
    return state


class AtlasService:
    """Owns dataset snapshots and the embedder; mutations are serialized per
    dataset, reads are lock-free."""

    def __init__(self, config: ServiceConfig):
        self.config = config
        self.datasets: dict[str, DatasetState] = {}
        self.loading: set[str] = set()
        self.embedder = make_embedder(
            config.embedder_url, timeout=config.embedder_timeout
        )
        self._mutate_locks: dict[str, threading.Lock] = {}

    def add_dataset(self, state: DatasetState) -> None:
        name = state.manifest.name
        self._mutate_locks.setdefault(name, threading.Lock())
        self.datasets[name] = state
        self.loading.discard(name)

    def load_root(self, root: str | Path, classify_defaults: bool = True) -> str:
        state = load_dataset_state(root)
        name = state.manifest.name
        self._mutate_locks.setdefault(name, threading.Lock())
        self.datasets[name] = state
        self.loading.discard(name)
        if classify_defaults and state.manifest.default_classes:
            try:
                self.reclassify(name, list(state.manifest.default_classes), "{class}")
            except EmbedderError:
                pass  # startup classification is best-effort; stays unassigned
        return name

    def load_roots(self, roots, classify_defaults: bool = True) -> list[str]:
        return [self.load_root(root, classify_defaults) for root in roots]

    def state_of(self, name: str) -> DatasetState:
        state = self.datasets.get(name)
        if state is None:
            if name in self.loading:
                raise ApiError(503, "dataset_loading", f"dataset '{name}' is still loading")
            raise ApiError(404, "unknown_dataset", f"unknown dataset '{name}'")
        return state

    def embed_text(self, queries: list[str], dim: int) -> np.ndarray:
        try:
            return self.embedder.embed_text(queries, dim)
        except EmbedderUnreachable as exc:
            raise ApiError(502, "embedder_unreachable", str(exc)) from exc
        except EmbedderError as exc:
            raise ApiError(502, "embedder_error", str(exc)) from exc

    def embed_audio(self, payload: bytes, fmt: str, dim: int) -> np.ndarray:
        if len(payload) > self.config.max_upload_bytes:
            raise ApiError(
                413,
                "payload_too_large",
                f"audio payload {len(payload)} bytes exceeds "
                f"{self.config.max_upload_bytes}",
            )
        if not payload:
            raise ApiError(400, "empty_payload", "audio payload is empty")
        try:
            return self.embedder.embed_audio(payload, fmt, dim)
        except EmbedderUnreachable as exc:
            raise ApiError(502, "embedder_unreachable", str(exc)) from exc
        except EmbedderError as exc:
            raise ApiError(502, "embedder_error", str(exc)) from exc

    def search(self, name: str, q: np.ndarray, k: int) -> list[dict]:
        state = self.state_of(name)
        hits = query(state.forest, state.matrix, q, k=k)
        return [self._result(state, idx, sim) for idx, sim in hits]

    def neighbors_of(self, name: str, point_id: int, k: int) -> list[dict]:
        state = self.state_of(name)
        try:
            row = state.matrix.row_of(point_id)
        except KeyError as exc:
            raise ApiError(404, "unknown_point", str(exc)) from exc
        q = state.matrix.vectors[row].astype(np.float64)
        q /= np.linalg.norm(q)
        hits = query(state.forest, state.matrix, q, k=min(k + 1, state.matrix.n))
        results = [self._result(state, idx, sim) for idx, sim in hits if idx != row]
        return results[:k]

    def _result(self, state: DatasetState, row: int, similarity: float) -> dict:
        point_id = int(state.matrix.ids[row])
        meta = state.metadata.get(point_id)
        class_idx = int(state.assignment.class_index[row])
        result = {
            "id": point_id,
            "similarity": similarity,
            "x": float(state.projection.coords[row, 0]),
            "y": float(state.projection.coords[row, 1]),
            "class_index": None if class_idx == UNASSIGNED else class_idx,
            "class_name": (
                state.class_set.names[class_idx]
                if state.class_set is not None and class_idx != UNASSIGNED
                else None
            ),
            "title": meta.title if meta else None,
            "description": meta.description if meta else None,
            "labels": list(meta.labels) if meta else [],
            "media_url": (
                meta.media_url
                if meta and meta.media_url
                else state.manifest.resolve_media_url(point_id)
            ),
        }
        return result

    def reclassify(self, name: str, class_names: list[str], prompt_template: str) -> int:
        if not 1 <= len(class_names) <= MAX_CLASSES:
            raise ApiError(
                400, "class_count_out_of_range", f"need 1..{MAX_CLASSES} classes"
            )
        if len(set(class_names)) != len(class_names) or any(not c for c in class_names):
            raise ApiError(400, "bad_class_names", "class names must be unique and non-empty")
        if "{class}" not in prompt_template:
            raise ApiError(400, "bad_prompt_template", "template must contain {class}")
        lock = self._mutate_locks.setdefault(name, threading.Lock())
        with lock:
            state = self.state_of(name)
            prompts = [prompt_template.replace("{class}", c) for c in class_names]
            embeddings = self.embed_text(prompts, state.matrix.dim)
            class_set = ClassSet(names=tuple(class_names), embeddings=embeddings)
            new_version = state.version + 1
            assignment = classify(state.matrix, class_set, version=new_version)
            labels = place_labels(state.projection, assignment, class_set)
            pyramid = with_class_column(
                state.pyramid, state.matrix.ids, assignment.class_index
            )
            new_state = replace(
                state,
                class_set=class_set,
                assignment=assignment,
                labels=labels,
                pyramid=pyramid,
                tile_bytes=_serialize_tiles(pyramid),
                version=new_version,
            )
            self.datasets[name] = new_state  # atomic publish
            return new_version


class SearchRequest(BaseModel):
    text: str | None = None
    embedding: list[float] | None = None
    audio_base64: str | None = None
    audio_format: str | None = None
    k: int = 10


class ClassifyRequest(BaseModel):
    class_names: list[str]
    prompt_template: str = "{class}"


def create_app(service: AtlasService) -> FastAPI:
    app = FastAPI(title="embedatlas", version="0.1.0")
    config = service.config

    @app.exception_handler(ApiError)
    def handle_api_error(request: Request, exc: ApiError):
        return JSONResponse(
            status_code=exc.status,
            content={"error": {"code": exc.code, "message": exc.message}},
        )

    @app.exception_handler(RequestValidationError)
    def handle_validation_error(request: Request, exc: RequestValidationError):
        return JSONResponse(
            status_code=400,
            content={"error": {"code": "validation_error", "message": str(exc.errors())}},
        )

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "datasets": sorted(service.datasets)}

    @app.get("/api/datasets")
    def list_datasets(offset: int = 0, limit: int = 50):
        _check_page(offset, limit)
        names = sorted(set(service.datasets) | service.loading)
        page = names[offset : offset + limit]
        items = []
        for name in page:
            state = service.datasets.get(name)
            if state is None:
                items.append({"name": name, "status": "loading"})
                continue
            items.append(
                {
                    "name": name,
                    "status": "ready",
                    "points": state.matrix.n,
                    "dim": state.matrix.dim,
                    "class_set_version": state.version,
                }
            )
        return {"datasets": items, "total": len(names), "offset": offset, "limit": limit}

    @app.get("/api/datasets/{name}/manifest")
    def dataset_manifest(name: str):
        state = service.state_of(name)
        pm = state.pyramid.manifest
        return {
            "name": name,
            "points": state.matrix.n,
            "dim": state.matrix.dim,
            "extent": [pm.extent.min_x, pm.extent.min_y, pm.extent.max_x, pm.extent.max_y],
            "tile_budget": pm.tile_budget,
            "max_zoom": pm.max_zoom,
            "tiles_per_zoom": {str(z): c for z, c in sorted(pm.tiles_per_zoom.items())},
            "class_names": list(state.class_set.names) if state.class_set else [],
            "class_set_version": state.version,
            "default_classes": list(state.manifest.default_classes or []),
            "media_url_template": state.manifest.media_url_template,
            "max_upload_bytes": config.max_upload_bytes,
            "default_neighbors": config.default_neighbors,
        }

    @app.get("/api/datasets/{name}/tiles/{z}/{x}/{y}")
    def get_tile(name: str, z: int, x: int, y: int):
        state = service.state_of(name)
        max_zoom = state.pyramid.manifest.max_zoom
        side = 1 << z if z >= 0 else 0
        if z < 0 or z > max_zoom or not (0 <= x < side and 0 <= y < side):
            raise ApiError(404, "tile_out_of_range", f"no tile ({z}, {x}, {y})")
        key = TileKey(z=z, x=x, y=y)
        payload = state.tile_bytes.get(key)
        if payload is None:
            payload = serialize_tile(_empty_tile(key))
        return Response(
            content=payload,
            media_type="application/octet-stream",
            headers={"X-Class-Version": str(state.version)},
        )

    @app.get("/api/datasets/{name}/points/{point_id}")
    def get_point(name: str, point_id: int, k: int | None = None):
        state = service.state_of(name)
        k = config.default_neighbors if k is None else k
        if not 1 <= k <= config.max_k:
            raise ApiError(400, "k_out_of_range", f"k must be in [1, {config.max_k}]")
        try:
            row = state.matrix.row_of(point_id)
        except KeyError as exc:
            raise ApiError(404, "unknown_point", str(exc)) from exc
        detail = dict(service._result(state, row, 1.0))
        del detail["similarity"]
        detail["confidence"] = float(state.assignment.confidence[row])
        detail["neighbors"] = service.neighbors_of(name, point_id, k)
        detail["class_set_version"] = state.version
        return detail

    @app.post("/api/datasets/{name}/search")
    def search(name: str, body: SearchRequest):
        state = service.state_of(name)
        if not 1 <= body.k <= config.max_k:
            raise ApiError(400, "k_out_of_range", f"k must be in [1, {config.max_k}]")
        provided = [
            q for q in (body.text, body.embedding, body.audio_base64) if q is not None
        ]
        if len(provided) != 1:
            raise ApiError(
                400, "query_required", "provide exactly one of text, embedding, audio_base64"
            )
        if body.text is not None:
            if not body.text.strip():
                raise ApiError(400, "empty_query", "text query is empty")
            q = service.embed_text([body.text], state.matrix.dim)[0]
        elif body.embedding is not None:
            q = np.asarray(body.embedding, dtype=np.float64)
            if q.shape != (state.matrix.dim,):
                raise ApiError(
                    400,
                    "dimension_mismatch",
                    f"embedding has dim {q.shape[0] if q.ndim == 1 else q.shape}, "
                    f"dataset has {state.matrix.dim}",
                )
            if not np.isfinite(q).all() or np.linalg.norm(q) == 0.0:
                raise ApiError(400, "bad_embedding", "embedding must be finite and nonzero")
            q = q / np.linalg.norm(q)
        else:
            try:
                payload = base64.b64decode(body.audio_base64 or "", validate=True)
            except (binascii.Error, ValueError) as exc:
                raise ApiError(400, "bad_audio_base64", str(exc)) from exc
            q = service.embed_audio(payload, body.audio_format or "raw", state.matrix.dim)
        results = service.search(name, q, body.k)
        return {"results": results, "k": body.k, "class_set_version": state.version}

    @app.post("/api/datasets/{name}/classify")
    def classify_endpoint(name: str, body: ClassifyRequest):
        service.state_of(name)
        version = service.reclassify(name, body.class_names, body.prompt_template)
        return {"class_set_version": version}

    @app.get("/api/datasets/{name}/labels")
    def labels(name: str, offset: int = 0, limit: int = 200):
        _check_page(offset, limit)
        state = service.state_of(name)
        items = [
            {
                "class_index": p.class_index,
                "name": p.name,
                "x": p.x,
                "y": p.y,
                "count": p.count,
            }
            for p in state.labels[offset : offset + limit]
        ]
        return {
            "labels": items,
            "total": len(state.labels),
            "offset": offset,
            "limit": limit,
            "class_set_version": state.version,
        }

    @app.get("/api/datasets/{name}/consistency")
    def consistency(name: str):
        state = service.state_of(name)
        errors = state.consistency_errors()
        return {
            "ok": not errors,
            "errors": errors,
            "points": state.matrix.n,
            "class_set_version": state.version,
        }

    return app


def _check_page(offset: int, limit: int) -> None:
    if offset < 0 or not 1 <= limit <= 1000:
        raise ApiError(400, "bad_page", "offset must be >= 0 and limit in [1, 1000]")


def _empty_tile(key: TileKey) -> Tile:
    return Tile(
        key=key,
        ids=np.zeros(0, dtype=np.uint64),
        x=np.zeros(0, dtype=np.float32),
        y=np.zeros(0, dtype=np.float32),
        class_index=np.zeros(0, dtype=np.uint16),
        rank=np.zeros(0, dtype=np.float32),
    )
