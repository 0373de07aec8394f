"""Zero-shot classification of embedding points against class prompt vectors.

Every point gets the argmax-cosine class plus a softmax confidence; label
anchors are class medoids in projection space so they always sit on a data
point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .store import EmbeddingMatrix
from .tsne import Projection2D

UNASSIGNED = 0xFFFF
MAX_CLASSES = 0xFFFF - 1  # 0xFFFF is the unassigned sentinel

DEFAULT_TEMPERATURE = 0.07
MEDOID_SAMPLE_LIMIT = 2000

_CLASSIFY_CHUNK = 8192


@dataclass(frozen=True)
class ClassSet:
    names: tuple[str, ...]
    embeddings: np.ndarray  # (n_classes, dim) float32 unit rows

    def __post_init__(self) -> None:
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(
            self, "embeddings", np.ascontiguousarray(self.embeddings, dtype=np.float32)
        )
        if len(self.names) < 1:
            raise ValueError("class set needs at least one class")
        if len(self.names) > MAX_CLASSES:
            raise ValueError(f"too many classes: {len(self.names)} > {MAX_CLASSES}")
        if len(set(self.names)) != len(self.names):
            raise ValueError("class names must be unique")
        if any(not name for name in self.names):
            raise ValueError("class names must be non-empty")
        if self.embeddings.shape != (len(self.names), self.embeddings.shape[1]):
            raise ValueError("class embeddings must be one row per class")
        norms = np.linalg.norm(self.embeddings.astype(np.float64), axis=1)
        if not np.allclose(norms, 1.0, atol=1e-5):
            raise ValueError("class embeddings must be unit-norm")

    @property
    def size(self) -> int:
        return len(self.names)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


@dataclass
class ClassAssignment:
    class_index: np.ndarray  # uint16, UNASSIGNED sentinel allowed
    confidence: np.ndarray  # float32
    version: int = 0

    def __post_init__(self) -> None:
        self.class_index = np.ascontiguousarray(self.class_index, dtype=np.uint16)
        self.confidence = np.ascontiguousarray(self.confidence, dtype=np.float32)
        if self.class_index.shape != self.confidence.shape:
            raise ValueError("class_index and confidence lengths differ")
        if not np.isfinite(self.confidence).all():
            raise ValueError("confidence must be finite")

    @property
    def n(self) -> int:
        return self.class_index.shape[0]


@dataclass(frozen=True)
class LabelPlacement:
    class_index: int
    name: str
    x: float
    y: float
    count: int


def unassigned_assignment(n: int, version: int = 0) -> ClassAssignment:
    return ClassAssignment(
        class_index=np.full(n, UNASSIGNED, dtype=np.uint16),
        confidence=np.ones(n, dtype=np.float32),
        version=version,
    )


def confidence_softmax(similarities: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Numerically stable softmax over the last axis."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    sims = np.asarray(similarities, dtype=np.float64)
    if not np.isfinite(sims).all():
        raise ValueError("similarities must be finite")
    scaled = sims / temperature
    scaled = scaled - scaled.max(axis=-1, keepdims=True)
    exp = np.exp(scaled)
    return exp / exp.sum(axis=-1, keepdims=True)


def classify(
    matrix: EmbeddingMatrix,
    class_set: ClassSet,
    temperature: float = DEFAULT_TEMPERATURE,
    version: int = 0,
) -> ClassAssignment:
    """Assign each point its argmax-cosine class (ties to the lowest class
    index) with the softmax confidence at the argmax."""
    if not matrix.normalized:
        raise ValueError("classification requires a normalized matrix")
    if matrix.dim != class_set.dim:
        raise ValueError(
            f"dimension mismatch: matrix {matrix.dim}, classes {class_set.dim}"
        )
    class_t = class_set.embeddings.astype(np.float64).T
    indices = np.empty(matrix.n, dtype=np.uint16)
    confidence = np.empty(matrix.n, dtype=np.float32)
    for start in range(0, matrix.n, _CLASSIFY_CHUNK):
        stop = min(start + _CLASSIFY_CHUNK, matrix.n)
        sims = matrix.vectors[start:stop].astype(np.float64) @ class_t
        best = sims.argmax(axis=1)  # first occurrence wins ties
        probs = confidence_softmax(sims, temperature)
        indices[start:stop] = best.astype(np.uint16)
        confidence[start:stop] = probs[np.arange(stop - start), best].astype(np.float32)
    return ClassAssignment(class_index=indices, confidence=confidence, version=version)


def _medoid(coords: np.ndarray) -> int:
    """Index of the member minimizing summed Euclidean distance to the rest."""
    d2 = ((coords[:, None, :] - coords[None, :, :]) ** 2).sum(axis=2)
    return int(np.sqrt(d2).sum(axis=1).argmin())


def place_labels(
    projection: Projection2D,
    assignment: ClassAssignment,
    class_set: ClassSet,
    sample_limit: int = MEDOID_SAMPLE_LIMIT,
    seed: int = 0,
) -> list[LabelPlacement]:
    """One anchor per non-empty class at the class medoid in 2D; classes
    larger than sample_limit are medoid-ed over a seeded subsample."""
    if assignment.n != projection.n:
        raise ValueError(
            f"id mismatch: assignment covers {assignment.n} points, projection {projection.n}"
        )
    coords = projection.coords.astype(np.float64)
    placements: list[LabelPlacement] = []
    for c in range(class_set.size):
        members = np.nonzero(assignment.class_index == c)[0]
        if members.size == 0:
            continue
        if members.size > sample_limit:
            rng = np.random.default_rng([seed, c])
            pool = members[np.sort(rng.choice(members.size, size=sample_limit, replace=False))]
        else:
            pool = members
        anchor = pool[_medoid(coords[pool])]
        placements.append(
            LabelPlacement(
                class_index=c,
                name=class_set.names[c],
                x=float(coords[anchor, 0]),
                y=float(coords[anchor, 1]),
                count=int(members.size),
            )
        )
    return placements
