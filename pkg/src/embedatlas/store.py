"""Embedding store: dataset manifests, the binary embedding container, row
normalization, cosine similarity, and a synthetic dataset generator.

On-disk embedding container (little-endian):

    magic    4 bytes  b"AAEM"
    version  u32      1
    count    u64      number of points
    dim      u32      vector dimension
    dtype    u8       0 = float32
    reserved 3 bytes  zero
    ids      count * u64
    vectors  count * dim * float32, row-major

Manifests are JSON documents with the fields of :class:`DatasetManifest`.
Point metadata is JSONL, one object per point with a required ``id``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

EMBEDDINGS_MAGIC = b"AAEM"
EMBEDDINGS_VERSION = 1
DTYPE_FLOAT32 = 0

_HEADER = struct.Struct("<4sIQIB3s")


class StoreError(ValueError):
    """Invalid manifest, container file, or embedding contents."""


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    point_count: int
    dim: int
    embeddings_path: str
    metadata_path: str | None = None
    media_url_template: str | None = None
    default_classes: tuple[str, ...] | None = None

    def resolve_media_url(self, point_id: int) -> str | None:
        if self.media_url_template is None:
            return None
        return self.media_url_template.replace("{id}", str(point_id))


@dataclass
class EmbeddingMatrix:
    """N unit-or-raw vectors with stable, sorted, unique uint64 point ids."""

    ids: np.ndarray
    vectors: np.ndarray
    normalized: bool = False

    def __post_init__(self) -> None:
        self.ids = np.ascontiguousarray(self.ids, dtype=np.uint64)
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if self.ids.ndim != 1 or self.vectors.ndim != 2:
            raise StoreError("ids must be 1-D and vectors 2-D")
        if self.ids.shape[0] != self.vectors.shape[0]:
            raise StoreError(
                f"id count {self.ids.shape[0]} != row count {self.vectors.shape[0]}"
            )
        if self.ids.size > 1 and not np.all(self.ids[1:] > self.ids[:-1]):
            raise StoreError("ids must be unique and sorted ascending")
        bad = ~np.isfinite(self.vectors)
        if bad.any():
            row = int(np.nonzero(bad.any(axis=1))[0][0])
            raise StoreError(f"non-finite component in row {row}")
        if self.normalized and self.n > 0:
            norms = np.linalg.norm(self.vectors.astype(np.float64), axis=1)
            if not np.allclose(norms, 1.0, atol=1e-5):
                raise StoreError("normalized flag set but rows are not unit-norm")

    @property
    def n(self) -> int:
        return self.ids.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def row_of(self, point_id: int) -> int:
        """Row index for a point id, raising on unknown ids."""
        pos = int(np.searchsorted(self.ids, np.uint64(point_id)))
        if pos >= self.n or self.ids[pos] != np.uint64(point_id):
            raise KeyError(f"unknown point id {point_id}")
        return pos


@dataclass(frozen=True)
class PointMetadata:
    id: int
    title: str | None = None
    description: str | None = None
    labels: tuple[str, ...] = field(default_factory=tuple)
    media_url: str | None = None


def parse_manifest(path: str | Path) -> DatasetManifest:
    """Parse and validate a dataset manifest, cross-checking the embeddings
    file header against the declared point_count and dim."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise StoreError(f"malformed manifest {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise StoreError("manifest must be a JSON object")

    for key in ("name", "point_count", "dim", "embeddings_path"):
        if key not in doc:
            raise StoreError(f"manifest missing required field '{key}'")
    name = doc["name"]
    point_count = doc["point_count"]
    dim = doc["dim"]
    if not isinstance(name, str) or not name:
        raise StoreError("manifest field 'name' must be a non-empty string")
    if not isinstance(point_count, int) or point_count < 0:
        raise StoreError("manifest field 'point_count' must be a non-negative integer")
    if not isinstance(dim, int) or dim < 1:
        raise StoreError("manifest field 'dim' must be a positive integer")

    template = doc.get("media_url_template")
    if template is not None and "{id}" not in template:
        raise StoreError("media_url_template must contain the '{id}' placeholder")
    classes = doc.get("default_classes")
    if classes is not None:
        if not isinstance(classes, list) or not all(isinstance(c, str) for c in classes):
            raise StoreError("default_classes must be a list of strings")
        classes = tuple(classes)

    manifest = DatasetManifest(
        name=name,
        point_count=point_count,
        dim=dim,
        embeddings_path=doc["embeddings_path"],
        metadata_path=doc.get("metadata_path"),
        media_url_template=template,
        default_classes=classes,
    )

    emb_path = path.parent / manifest.embeddings_path
    if not emb_path.is_file():
        raise FileNotFoundError(f"embeddings file not found: {emb_path}")
    count, hdr_dim = read_embeddings_header(emb_path)
    if count != manifest.point_count:
        raise StoreError(
            f"count mismatch: manifest declares {manifest.point_count}, "
            f"embeddings header has {count}"
        )
    if hdr_dim != manifest.dim:
        raise StoreError(
            f"dim mismatch: manifest declares {manifest.dim}, "
            f"embeddings header has {hdr_dim}"
        )
    return manifest


def write_manifest(path: str | Path, manifest: DatasetManifest) -> None:
    doc: dict = {
        "name": manifest.name,
        "point_count": manifest.point_count,
        "dim": manifest.dim,
        "embeddings_path": manifest.embeddings_path,
    }
    if manifest.metadata_path is not None:
        doc["metadata_path"] = manifest.metadata_path
    if manifest.media_url_template is not None:
        doc["media_url_template"] = manifest.media_url_template
    if manifest.default_classes is not None:
        doc["default_classes"] = list(manifest.default_classes)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def read_embeddings_header(path: str | Path) -> tuple[int, int]:
    """Return (count, dim) from a container header without loading the payload."""
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise StoreError(f"truncated header in {path}")
    magic, version, count, dim, dtype, _reserved = _HEADER.unpack(raw)
    if magic != EMBEDDINGS_MAGIC:
        raise StoreError(f"bad magic {magic!r} in {path}")
    if version != EMBEDDINGS_VERSION:
        raise StoreError(f"unsupported container version {version}")
    if dtype != DTYPE_FLOAT32:
        raise StoreError(f"unsupported dtype code {dtype}")
    return int(count), int(dim)


def read_embeddings(path: str | Path) -> EmbeddingMatrix:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"embeddings file not found: {path}")
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise StoreError(f"truncated header in {path}")
    count, dim = read_embeddings_header(path)
    ids_bytes = count * 8
    vec_bytes = count * dim * 4
    expected = _HEADER.size + ids_bytes + vec_bytes
    if len(data) != expected:
        raise StoreError(
            f"truncated payload in {path}: expected {expected} bytes, got {len(data)}"
        )
    ids = np.frombuffer(data, dtype="<u8", count=count, offset=_HEADER.size)
    vectors = np.frombuffer(
        data, dtype="<f4", count=count * dim, offset=_HEADER.size + ids_bytes
    ).reshape(count, dim)
    return EmbeddingMatrix(ids=ids.copy(), vectors=vectors.copy(), normalized=False)


def load_embeddings(manifest: DatasetManifest, base_dir: str | Path = ".") -> EmbeddingMatrix:
    """Load the container referenced by a manifest, cross-checking its header."""
    path = Path(base_dir) / manifest.embeddings_path
    matrix = read_embeddings(path)
    if matrix.n != manifest.point_count:
        raise StoreError(
            f"count mismatch: manifest declares {manifest.point_count}, file has {matrix.n}"
        )
    if matrix.dim != manifest.dim:
        raise StoreError(
            f"dim mismatch: manifest declares {manifest.dim}, file has {matrix.dim}"
        )
    return matrix


def write_embeddings(path: str | Path, matrix: EmbeddingMatrix) -> None:
    header = _HEADER.pack(
        EMBEDDINGS_MAGIC, EMBEDDINGS_VERSION, matrix.n, matrix.dim, DTYPE_FLOAT32, b"\0\0\0"
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(matrix.ids.astype("<u8").tobytes())
        fh.write(matrix.vectors.astype("<f4").tobytes())


def normalize_rows(matrix: EmbeddingMatrix) -> EmbeddingMatrix:
    """Scale every row to unit Euclidean norm. Zero rows are a hard error."""
    if matrix.n == 0:
        return replace(matrix, normalized=True)
    norms = np.linalg.norm(matrix.vectors.astype(np.float64), axis=1)
    zero = norms == 0.0
    if zero.any():
        bad_id = int(matrix.ids[int(np.nonzero(zero)[0][0])])
        raise StoreError(f"zero-norm row for id {bad_id}")
    unit = (matrix.vectors.astype(np.float64) / norms[:, None]).astype(np.float32)
    return EmbeddingMatrix(ids=matrix.ids, vectors=unit, normalized=True)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two vectors, clamped to [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine undefined for zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def synth_dataset(
    k: int, n: int, d: int, spread: float, seed: int
) -> tuple[EmbeddingMatrix, np.ndarray]:
    """Generate k Gaussian clusters of n unit vectors each around random unit
    centroids. Returns the normalized matrix and ground-truth cluster labels."""
    if k < 1 or n < 1 or d < 2:
        raise ValueError(f"invalid synth parameters k={k} n={n} d={d}")
    if spread <= 0:
        raise ValueError(f"spread must be positive, got {spread}")
    rng = np.random.default_rng(seed)
    centroids = rng.standard_normal((k, d))
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    points = np.repeat(centroids, n, axis=0)
    points += spread * rng.standard_normal((k * n, d))
    norms = np.linalg.norm(points, axis=1, keepdims=True)
    if (norms == 0.0).any():
        raise ValueError("degenerate zero vector generated; change seed or spread")
    points /= norms
    labels = np.repeat(np.arange(k, dtype=np.int32), n)
    matrix = EmbeddingMatrix(
        ids=np.arange(k * n, dtype=np.uint64),
        vectors=points.astype(np.float32),
        normalized=True,
    )
    return matrix, labels


def synth_centroids(k: int, d: int, seed: int) -> np.ndarray:
    """The exact unit centroids synth_dataset(seed) draws before adding noise."""
    rng = np.random.default_rng(seed)
    centroids = rng.standard_normal((k, d))
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    return centroids.astype(np.float32)


def load_metadata(
    path: str | Path,
    ids: np.ndarray | None = None,
    media_url_template: str | None = None,
) -> dict[int, PointMetadata]:
    """Load JSONL point metadata. When ids are given, records referencing
    unknown points are rejected."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"metadata file not found: {path}")
    known = None if ids is None else np.asarray(ids, dtype=np.uint64)
    out: dict[int, PointMetadata] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise StoreError(f"{path}:{lineno}: malformed metadata record") from exc
            if "id" not in rec:
                raise StoreError(f"{path}:{lineno}: metadata record missing 'id'")
            pid = int(rec["id"])
            if known is not None:
                pos = int(np.searchsorted(known, np.uint64(pid)))
                if pos >= known.size or known[pos] != np.uint64(pid):
                    raise StoreError(f"{path}:{lineno}: metadata for unknown id {pid}")
            labels = rec.get("labels") or []
            media = None
            if media_url_template is not None:
                media = media_url_template.replace("{id}", str(pid))
            out[pid] = PointMetadata(
                id=pid,
                title=rec.get("title"),
                description=rec.get("description"),
                labels=tuple(labels),
                media_url=media,
            )
    return out


def write_metadata(path: str | Path, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
