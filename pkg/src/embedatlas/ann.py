"""Approximate k-nearest-neighbor search over unit-normalized embeddings.

The index is a forest of random-hyperplane trees: each split samples two
distinct points and divides the items by the hyperplane equidistant between
them. Queries descend all trees through a single priority queue keyed by
margin distance, gather candidate leaves until a search budget is met, then
rank candidates by exact cosine. A brute-force scan (`exact_knn`) serves as
the verification oracle.

Forest file layout (little-endian):

    magic     4 bytes  b"AAFO"
    version   u32      1
    dim       u32
    n_trees   u32
    leaf_size u32
    seed      u64
    trees     n_trees preorder node streams; tag u8 per node:
              0 = split: dim * float32 normal, float32 offset
              1 = leaf:  u32 count, count * u32 item indices
"""

from __future__ import annotations

import heapq
import itertools
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .store import EmbeddingMatrix

FOREST_MAGIC = b"AAFO"
FOREST_VERSION = 1

DEFAULT_N_TREES = 20
DEFAULT_LEAF_SIZE = 32
MIN_SEARCH_K = 2000

_SPLIT_ATTEMPTS = 3


class ForestFormatError(ValueError):
    """Corrupt or incompatible forest file."""


@dataclass
class SplitNode:
    normal: np.ndarray  # float32, unit norm
    offset: float
    left: "SplitNode | LeafNode | None" = None
    right: "SplitNode | LeafNode | None" = None


@dataclass
class LeafNode:
    items: np.ndarray  # uint32 row indices

    # leaves exceed leaf_size only for degenerate all-identical item groups,
    # which admit no separating hyperplane


Node = SplitNode | LeafNode


@dataclass
class AnnForest:
    trees: list[Node]
    n_trees: int
    leaf_size: int
    seed: int
    dim: int


def default_search_k(k: int, n_trees: int) -> int:
    return max(k * n_trees, MIN_SEARCH_K)


def split_items(
    items: np.ndarray, vectors: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, float, np.ndarray, np.ndarray] | None:
    """Split an item set by a random two-point hyperplane.

    Returns (normal, offset, left_items, right_items), or None when the items
    hold fewer than two distinct vectors and no hyperplane exists. After three
    failed sampling attempts on splittable data, falls back to a random
    balanced assignment under a random hyperplane.
    """
    pts = vectors[items].astype(np.float64)
    for _ in range(_SPLIT_ATTEMPTS):
        i, j = rng.choice(items.shape[0], size=2, replace=False)
        diff = pts[i] - pts[j]
        norm = float(np.linalg.norm(diff))
        if norm == 0.0:
            continue
        normal = (diff / norm).astype(np.float32)
        offset = np.float32(normal.astype(np.float64) @ ((pts[i] + pts[j]) / 2.0))
        margins = pts @ normal.astype(np.float64)
        left_mask = margins < np.float64(offset)
        if left_mask.any() and not left_mask.all():
            return normal, float(offset), items[left_mask], items[~left_mask]
    if np.unique(pts, axis=0).shape[0] < 2:
        return None
    # balanced fallback: assignment is random, the stored hyperplane only
    # guides query descent
    normal = rng.standard_normal(vectors.shape[1])
    normal = (normal / np.linalg.norm(normal)).astype(np.float32)
    perm = rng.permutation(items.shape[0])
    half = items.shape[0] // 2
    return normal, 0.0, items[perm[:half]], items[perm[half:]]


def _build_tree(vectors: np.ndarray, leaf_size: int, rng: np.random.Generator) -> Node:
    n = vectors.shape[0]
    root_items = np.arange(n, dtype=np.uint32)

    def make_node(items: np.ndarray) -> tuple[Node, tuple | None]:
        if items.shape[0] <= leaf_size:
            return LeafNode(items=items), None
        split = split_items(items, vectors, rng)
        if split is None:
            return LeafNode(items=items), None
        normal, offset, left_items, right_items = split
        return SplitNode(normal=normal, offset=offset), (left_items, right_items)

    root, children = make_node(root_items)
    stack: list[tuple[SplitNode, np.ndarray, np.ndarray]] = []
    if children is not None:
        stack.append((root, *children))
    while stack:
        parent, left_items, right_items = stack.pop()
        for side, side_items in (("left", left_items), ("right", right_items)):
            node, sub = make_node(side_items)
            setattr(parent, side, node)
            if sub is not None:
                stack.append((node, *sub))
    return root


def build_forest(
    matrix: EmbeddingMatrix,
    n_trees: int = DEFAULT_N_TREES,
    leaf_size: int = DEFAULT_LEAF_SIZE,
    seed: int = 0,
) -> AnnForest:
    if not matrix.normalized:
        raise ValueError("forest requires a normalized matrix")
    if matrix.n < 1:
        raise ValueError("cannot index an empty matrix")
    if n_trees < 1 or leaf_size < 1:
        raise ValueError(f"invalid forest parameters n_trees={n_trees} leaf_size={leaf_size}")
    if seed < 0:
        raise ValueError("seed must be non-negative")
    trees = [
        _build_tree(matrix.vectors, leaf_size, np.random.default_rng([seed, t]))
        for t in range(n_trees)
    ]
    return AnnForest(
        trees=trees, n_trees=n_trees, leaf_size=leaf_size, seed=seed, dim=matrix.dim
    )


def iter_leaves(node: Node):
    stack = [node]
    while stack:
        cur = stack.pop()
        if isinstance(cur, LeafNode):
            yield cur
        else:
            stack.append(cur.right)
            stack.append(cur.left)


def _check_query_vector(q: np.ndarray, dim: int) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if q.shape[0] != dim:
        raise ValueError(f"dimension mismatch: query has {q.shape[0]}, index has {dim}")
    if abs(np.linalg.norm(q) - 1.0) > 1e-5:
        raise ValueError("query vector must be unit-norm")
    return q


def _rank_candidates(
    matrix: EmbeddingMatrix, candidates: np.ndarray, q: np.ndarray, k: int
) -> list[tuple[int, float]]:
    rows = matrix.vectors[candidates].astype(np.float64)
    sims = rows @ q
    order = np.lexsort((candidates, -sims))[:k]
    return [(int(candidates[i]), float(sims[i])) for i in order]


def query(
    forest: AnnForest,
    matrix: EmbeddingMatrix,
    q: np.ndarray,
    k: int,
    search_k: int | None = None,
) -> list[tuple[int, float]]:
    """Approximate top-k by cosine, sorted descending with ties broken by
    ascending index. k > N returns all N points."""
    if forest.dim != matrix.dim:
        raise ValueError(f"dimension mismatch: forest {forest.dim}, matrix {matrix.dim}")
    q = _check_query_vector(q, forest.dim)
    if k < 1:
        raise ValueError("k must be >= 1")
    if search_k is None:
        search_k = default_search_k(k, forest.n_trees)
    if search_k < k:
        raise ValueError(f"search_k={search_k} must be >= k={k}")

    counter = itertools.count()
    heap: list[tuple[float, int, Node]] = []
    for root in forest.trees:
        heapq.heappush(heap, (-np.inf, next(counter), root))

    gathered: list[np.ndarray] = []
    n_gathered = 0
    while heap and n_gathered < search_k:
        neg_priority, _, node = heapq.heappop(heap)
        priority = -neg_priority
        if isinstance(node, LeafNode):
            gathered.append(node.items)
            n_gathered += node.items.shape[0]
            continue
        margin = float(node.normal.astype(np.float64) @ q) - node.offset
        heapq.heappush(heap, (-min(priority, -margin), next(counter), node.left))
        heapq.heappush(heap, (-min(priority, +margin), next(counter), node.right))

    candidates = np.unique(np.concatenate(gathered)) if gathered else np.array([], dtype=np.uint32)
    return _rank_candidates(matrix, candidates, q, min(k, matrix.n))


def exact_knn(matrix: EmbeddingMatrix, q: np.ndarray, k: int) -> list[tuple[int, float]]:
    """Exact top-k by full scan; the oracle for `query`."""
    q = _check_query_vector(q, matrix.dim)
    if k < 1:
        raise ValueError("k must be >= 1")
    candidates = np.arange(matrix.n, dtype=np.uint32)
    return _rank_candidates(matrix, candidates, q, min(k, matrix.n))


def recall_at_k(approx: list[int], exact: list[int]) -> float:
    if len(approx) != len(exact):
        raise ValueError(f"length mismatch: {len(approx)} vs {len(exact)}")
    if not exact:
        return 1.0
    return len(set(approx) & set(exact)) / len(exact)


def save_forest(path: str | Path, forest: AnnForest) -> None:
    chunks = [
        struct.pack(
            "<4sIIIIQ",
            FOREST_MAGIC,
            FOREST_VERSION,
            forest.dim,
            forest.n_trees,
            forest.leaf_size,
            forest.seed,
        )
    ]
    for root in forest.trees:
        stack = [root]
        while stack:
            node = stack.pop()
            if isinstance(node, LeafNode):
                chunks.append(struct.pack("<BI", 1, node.items.shape[0]))
                chunks.append(node.items.astype("<u4").tobytes())
            else:
                chunks.append(b"\x00")
                chunks.append(node.normal.astype("<f4").tobytes())
                chunks.append(struct.pack("<f", node.offset))
                stack.append(node.right)
                stack.append(node.left)
    Path(path).write_bytes(b"".join(chunks))


def load_forest(path: str | Path, expected_dim: int | None = None) -> AnnForest:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"forest file not found: {path}")
    buf = path.read_bytes()
    header = struct.Struct("<4sIIIIQ")
    if len(buf) < header.size:
        raise ForestFormatError(f"truncated header in {path}")
    magic, version, dim, n_trees, leaf_size, seed = header.unpack_from(buf, 0)
    if magic != FOREST_MAGIC:
        raise ForestFormatError(f"bad magic {magic!r} in {path}")
    if version != FOREST_VERSION:
        raise ForestFormatError(f"unsupported forest version {version}")
    if expected_dim is not None and dim != expected_dim:
        raise ForestFormatError(f"dimension mismatch: file has {dim}, expected {expected_dim}")

    off = header.size

    def read_node() -> tuple[Node, bool]:
        nonlocal off
        if off >= len(buf):
            raise ForestFormatError(f"truncated node stream in {path}")
        tag = buf[off]
        off += 1
        if tag == 1:
            (count,) = struct.unpack_from("<I", buf, off)
            off += 4
            end = off + 4 * count
            if end > len(buf):
                raise ForestFormatError(f"truncated leaf in {path}")
            items = np.frombuffer(buf, dtype="<u4", count=count, offset=off).copy()
            off = end
            return LeafNode(items=items), False
        if tag == 0:
            end = off + 4 * dim + 4
            if end > len(buf):
                raise ForestFormatError(f"truncated split in {path}")
            normal = np.frombuffer(buf, dtype="<f4", count=dim, offset=off).copy()
            (offset_val,) = struct.unpack_from("<f", buf, off + 4 * dim)
            off = end
            return SplitNode(normal=normal, offset=float(offset_val)), True
        raise ForestFormatError(f"unknown node tag {tag} in {path}")

    trees: list[Node] = []
    for _ in range(n_trees):
        root, is_split = read_node()
        if is_split:
            stack: list[tuple[SplitNode, str]] = [(root, "left")]
            while stack:
                parent, side = stack.pop()
                node, node_is_split = read_node()
                setattr(parent, side, node)
                if side == "left":
                    stack.append((parent, "right"))
                if node_is_split:
                    stack.append((node, "left"))
        trees.append(root)
    if off != len(buf):
        raise ForestFormatError(f"trailing bytes in {path}")
    return AnnForest(trees=trees, n_trees=n_trees, leaf_size=leaf_size, seed=seed, dim=dim)
