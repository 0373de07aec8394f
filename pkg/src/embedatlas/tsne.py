"""Barnes-Hut t-SNE projection of the embedding matrix to 2D.

Input affinities are kNN-sparse: each point's conditional Gaussian affinities
are calibrated to a target perplexity by binary search on the bandwidth, then
symmetrized and normalized to total mass 1. Optimization is gradient descent
with early exaggeration, a momentum schedule, and per-dimension adaptive
gains. The repulsive term is approximated with a quadtree (cells summarized
when side/distance < theta); `exact_gradient` is the O(N^2) oracle.

Projection file layout (little-endian):

    magic   4 bytes  b"AAPJ"
    version u32      1
    count   u64
    ids     count * u64
    coords  count * 2 * float32
    [optional KL history: u32 count, count * float32]
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse

from . import _bh
from .ann import AnnForest, default_search_k, query
from .store import EmbeddingMatrix

PROJECTION_MAGIC = b"AAPJ"
PROJECTION_VERSION = 1

KL_RECORD_INTERVAL = 50
Q_FLOOR = 1e-12

_LN2 = math.log(2.0)


class TsneDivergenceError(RuntimeError):
    def __init__(self, iteration: int):
        self.iteration = iteration
        super().__init__(f"optimization diverged at iteration {iteration}")


@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = 30.0
    theta: float = 0.5
    iterations: int = 1000
    learning_rate: float = 200.0
    early_exaggeration_factor: float = 12.0
    early_exaggeration_iters: int = 250
    momentum_initial: float = 0.5
    momentum_final: float = 0.8
    momentum_switch_iter: int = 250
    seed: int = 0
    knn_multiplier: int = 3
    search_k: int | None = None

    def validate(self, n: int | None = None) -> None:
        if self.perplexity <= 1:
            raise ValueError("perplexity must exceed 1")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must be in [0, 1]")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.early_exaggeration_factor < 1:
            raise ValueError("early_exaggeration_factor must be >= 1")
        if not 0 <= self.early_exaggeration_iters <= self.iterations:
            raise ValueError("early_exaggeration_iters must be in [0, iterations]")
        for m in (self.momentum_initial, self.momentum_final):
            if not 0.0 <= m < 1.0:
                raise ValueError("momentum values must be in [0, 1)")
        if self.knn_multiplier < 3:
            raise ValueError("knn_multiplier must be >= 3")
        if n is not None and self.perplexity * self.knn_multiplier >= n:
            raise ValueError(
                f"perplexity {self.perplexity} x knn_multiplier {self.knn_multiplier} "
                f"must stay below N={n}"
            )


@dataclass
class SparseAffinities:
    """Symmetric, zero-diagonal joint affinities in CSR form, total mass 1."""

    n: int
    indptr: np.ndarray  # int64, n + 1
    indices: np.ndarray  # int32
    data: np.ndarray  # float64

    @classmethod
    def from_conditional(cls, rows: np.ndarray, cols: np.ndarray, vals: np.ndarray, n: int):
        """Symmetrize conditional affinities: p_ij = (p_j|i + p_i|j) / 2N,
        renormalized to total 1."""
        cond = scipy.sparse.csr_matrix(
            (vals.astype(np.float64), (rows, cols)), shape=(n, n)
        )
        joint = (cond + cond.T) * (1.0 / (2.0 * n))
        total = joint.sum()
        if total <= 0:
            raise ValueError("affinity mass vanished during symmetrization")
        joint = joint * (1.0 / total)
        joint.sort_indices()
        joint.eliminate_zeros()
        out = cls(
            n=n,
            indptr=joint.indptr.astype(np.int64),
            indices=joint.indices.astype(np.int32),
            data=joint.data.astype(np.float64),
        )
        out.check()
        return out

    def to_scipy(self) -> scipy.sparse.csr_matrix:
        return scipy.sparse.csr_matrix((self.data, self.indices, self.indptr), shape=(self.n, self.n))

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def total(self) -> float:
        return float(self.data.sum())

    def check(self) -> None:
        if (self.data < 0).any():
            raise ValueError("affinities must be non-negative")
        sp = self.to_scipy()
        if sp.diagonal().any():
            raise ValueError("affinity diagonal must be zero")
        asym = np.abs(sp - sp.T).max() if sp.nnz else 0.0
        if asym > 1e-9:
            raise ValueError(f"affinities asymmetric by {asym}")
        if abs(self.total() - 1.0) > 1e-6:
            raise ValueError(f"affinity total {self.total()} != 1")


@dataclass
class Projection2D:
    ids: np.ndarray  # uint64
    coords: np.ndarray  # float32 (n, 2)
    kl_history: np.ndarray = field(default_factory=lambda: np.zeros(0, np.float32))

    def __post_init__(self) -> None:
        self.ids = np.ascontiguousarray(self.ids, dtype=np.uint64)
        self.coords = np.ascontiguousarray(self.coords, dtype=np.float32)
        self.kl_history = np.asarray(self.kl_history, dtype=np.float32)
        if self.coords.shape != (self.ids.shape[0], 2):
            raise ValueError("coords must be (n, 2) matching ids")
        if not np.isfinite(self.coords).all():
            raise ValueError("coordinates must be finite")

    @property
    def n(self) -> int:
        return self.ids.shape[0]


@dataclass
class BhQuadtree:
    """Flat-array quadtree over 2D points; leaves are coincident bundles."""

    center_x: np.ndarray
    center_y: np.ndarray
    half_size: np.ndarray
    children: np.ndarray  # (n_nodes, 4) int64, -1 = absent
    is_leaf: np.ndarray  # uint8
    count: np.ndarray  # int64
    com_x: np.ndarray
    com_y: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.center_x.shape[0]


def build_quadtree(points: np.ndarray, max_depth: int = _bh.MAX_DEPTH) -> BhQuadtree:
    points = _check_coords(points)
    cx, cy, half, children, is_leaf, count, com_x, com_y = _bh.build_quadtree_arrays(
        points, max_depth
    )
    return BhQuadtree(
        center_x=cx,
        center_y=cy,
        half_size=half,
        children=children,
        is_leaf=is_leaf,
        count=count,
        com_x=com_x,
        com_y=com_y,
    )


def _check_coords(points: np.ndarray) -> np.ndarray:
    points = np.ascontiguousarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2:
        raise ValueError("coordinates must be (n, 2)")
    if not np.isfinite(points).all():
        raise ValueError("coordinates must be finite")
    return points


def calibrate_row(
    distances: np.ndarray, perplexity: float, tol: float = 1e-5, max_iter: int = 200
) -> tuple[np.ndarray, float]:
    """Calibrate one point's Gaussian affinities over squared kNN distances.

    Binary-searches the bandwidth until the row entropy matches
    log2(perplexity) within tol (or the iteration cap); returns the
    normalized row and the converged sigma.
    """
    distances = np.asarray(distances, dtype=np.float64)
    if distances.ndim != 1 or distances.shape[0] < 2:
        raise ValueError("need at least 2 neighbor distances")
    if not np.isfinite(distances).all():
        raise ValueError("non-finite distances")
    if not 0 < perplexity <= distances.shape[0]:
        raise ValueError(
            f"perplexity {perplexity} must be in (0, neighbor count {distances.shape[0]}]"
        )
    rows, sigmas = _calibrate_rows(distances[None, :], perplexity, tol, max_iter)
    return rows[0], float(sigmas[0])


def _calibrate_rows(
    d2: np.ndarray, perplexity: float, tol: float = 1e-5, max_iter: int = 200
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized per-row bandwidth search; beta = 1 / (2 sigma^2)."""
    n, m = d2.shape
    target = math.log2(perplexity)
    shifted = d2 - d2.min(axis=1, keepdims=True)
    beta = np.ones(n)
    beta_lo = np.full(n, -np.inf)
    beta_hi = np.full(n, np.inf)
    probs = np.empty_like(shifted)
    active = np.arange(n)
    for _ in range(max_iter):
        w = np.exp(-shifted[active] * beta[active, None])
        s = w.sum(axis=1)
        p = w / s[:, None]
        probs[active] = p
        with np.errstate(divide="ignore", invalid="ignore"):
            logp = np.where(p > 0, np.log(p), 0.0)
        entropy_bits = -(p * logp).sum(axis=1) / _LN2
        diff = entropy_bits - target
        unconverged = np.abs(diff) > tol
        active = active[unconverged]
        if active.size == 0:
            break
        diff = diff[unconverged]
        too_flat = diff > 0  # entropy above target: tighten the kernel
        up = active[too_flat]
        beta_lo[up] = beta[up]
        beta[up] = np.where(np.isinf(beta_hi[up]), beta[up] * 2.0, (beta[up] + beta_hi[up]) / 2.0)
        down = active[~too_flat]
        beta_hi[down] = beta[down]
        beta[down] = np.where(
            np.isneginf(beta_lo[down]), beta[down] / 2.0, (beta[down] + beta_lo[down]) / 2.0
        )
    sigmas = np.sqrt(1.0 / (2.0 * beta))
    return probs, sigmas


def build_affinities(
    matrix: EmbeddingMatrix, forest: AnnForest, config: TsneConfig
) -> SparseAffinities:
    """kNN-sparse symmetric affinities: retrieve knn_multiplier * perplexity
    approximate neighbors per point (clamped to N-1), calibrate, symmetrize,
    normalize."""
    config.validate()
    n = matrix.n
    n_neighbors = min(int(round(config.knn_multiplier * config.perplexity)), n - 1)
    if n_neighbors < 2 or config.perplexity > n_neighbors:
        raise ValueError(
            f"insufficient neighbors: {n_neighbors} for perplexity {config.perplexity}"
        )
    search_k = config.search_k
    if search_k is None:
        search_k = default_search_k(n_neighbors + 1, forest.n_trees)

    neighbor_idx = np.empty((n, n_neighbors), dtype=np.int64)
    neighbor_d2 = np.empty((n, n_neighbors), dtype=np.float64)
    for i in range(n):
        hits = query(forest, matrix, matrix.vectors[i], k=n_neighbors + 1, search_k=search_k)
        col = 0
        for idx, sim in hits:
            if idx == i or col == n_neighbors:
                continue
            neighbor_idx[i, col] = idx
            # unit vectors: squared Euclidean distance is 2 - 2 cos
            neighbor_d2[i, col] = max(0.0, 2.0 - 2.0 * sim)
            col += 1
        if col < n_neighbors:
            raise ValueError(f"insufficient neighbors retrieved for point {i}")

    rows_p, _ = _calibrate_rows(neighbor_d2, config.perplexity)
    row_ids = np.repeat(np.arange(n, dtype=np.int64), n_neighbors)
    return SparseAffinities.from_conditional(
        row_ids, neighbor_idx.ravel(), rows_p.ravel(), n
    )


def exact_gradient(coords: np.ndarray, affinities: SparseAffinities) -> np.ndarray:
    """Exact O(N^2) KL gradient: 4 sum_j (p_ij - q_ij)(y_i - y_j)(1+|y_i-y_j|^2)^-1."""
    y = _check_coords(coords)
    n = y.shape[0]
    diff = y[:, None, :] - y[None, :, :]
    d2 = (diff**2).sum(axis=2)
    qn = 1.0 / (1.0 + d2)
    np.fill_diagonal(qn, 0.0)
    z = max(qn.sum(), Q_FLOOR)
    p_dense = affinities.to_dense()
    w = (p_dense - qn / z) * qn
    return 4.0 * (w.sum(axis=1)[:, None] * y - w @ y)


def bh_gradient(coords: np.ndarray, affinities: SparseAffinities, theta: float) -> np.ndarray:
    """Barnes-Hut KL gradient; theta = 0 reproduces exact_gradient."""
    if not 0.0 <= theta <= 1.0:
        raise ValueError("theta must be in [0, 1]")
    y = _check_coords(coords)
    tree = build_quadtree(y)
    return _bh_gradient_with_tree(y, tree, affinities.indptr, affinities.indices, affinities.data, theta)


def _bh_gradient_with_tree(
    y: np.ndarray,
    tree: BhQuadtree,
    indptr: np.ndarray,
    indices: np.ndarray,
    data: np.ndarray,
    theta: float,
) -> np.ndarray:
    rep, z = _bh.repulsion_pass(
        y,
        tree.half_size,
        tree.children,
        tree.is_leaf,
        tree.count,
        tree.com_x,
        tree.com_y,
        theta,
    )
    att = _bh.attraction_pass(y, indptr, indices, data)
    return 4.0 * (att - rep / max(z, Q_FLOOR))


def kl_divergence(affinities: SparseAffinities, coords: np.ndarray) -> float:
    """KL(P || Q) over stored nonzero affinities with q floored at 1e-12."""
    y = _check_coords(coords)
    z = max(_bh.student_t_total(y), Q_FLOOR)
    return float(
        _bh.kl_terms(y, affinities.indptr, affinities.indices, affinities.data, z, Q_FLOOR)
    )


def run_tsne(
    matrix: EmbeddingMatrix,
    forest: AnnForest,
    config: TsneConfig,
    progress: Callable[[int, float], None] | None = None,
) -> Projection2D:
    """Project the matrix to 2D. Deterministic for a fixed config and seed.

    Y starts from Gaussian(0, 1e-4) noise; affinities are multiplied by the
    early-exaggeration factor for the first early_exaggeration_iters
    iterations. KL against the unexaggerated affinities is recorded every 50
    iterations and after the final one.
    """
    if matrix.n < 8:
        raise ValueError(f"t-SNE needs at least 8 points, got {matrix.n}")
    config.validate(matrix.n)
    affinities = build_affinities(matrix, forest, config)
    return _optimize(matrix.ids, affinities, config, progress)


def _optimize(
    ids: np.ndarray,
    affinities: SparseAffinities,
    config: TsneConfig,
    progress: Callable[[int, float], None] | None = None,
) -> Projection2D:
    n = affinities.n
    rng = np.random.default_rng(config.seed)
    y = rng.normal(0.0, 1e-4, size=(n, 2))
    velocity = np.zeros_like(y)
    gains = np.ones_like(y)

    exaggerating = config.early_exaggeration_iters > 0 and config.early_exaggeration_factor > 1.0
    data_run = affinities.data * config.early_exaggeration_factor if exaggerating else affinities.data
    kl_values: list[float] = []

    def record(iteration: int) -> None:
        kl = kl_divergence(affinities, y)
        kl_values.append(kl)
        if progress is not None:
            progress(iteration, kl)

    for i in range(config.iterations):
        if exaggerating and i == config.early_exaggeration_iters:
            data_run = affinities.data
            exaggerating = False
        if i % KL_RECORD_INTERVAL == 0:
            record(i)
        tree = build_quadtree(y)
        grad = _bh_gradient_with_tree(
            y, tree, affinities.indptr, affinities.indices, data_run, config.theta
        )
        along_descent = grad * velocity < 0.0
        gains = np.where(along_descent, gains + 0.2, gains * 0.8)
        np.clip(gains, 0.01, None, out=gains)
        momentum = (
            config.momentum_initial if i < config.momentum_switch_iter else config.momentum_final
        )
        velocity = momentum * velocity - config.learning_rate * (gains * grad)
        y += velocity
        if not np.isfinite(y).all():
            raise TsneDivergenceError(i)
    record(config.iterations)

    return Projection2D(
        ids=ids,
        coords=y.astype(np.float32),
        kl_history=np.array(kl_values, dtype=np.float32),
    )


def first_post_exaggeration_index(config: TsneConfig) -> int:
    """Index into kl_history of the first value recorded at or after the
    early-exaggeration phase ends."""
    return math.ceil(config.early_exaggeration_iters / KL_RECORD_INTERVAL)


def write_projection(path: str | Path, projection: Projection2D) -> None:
    chunks = [
        struct.pack("<4sIQ", PROJECTION_MAGIC, PROJECTION_VERSION, projection.n),
        projection.ids.astype("<u8").tobytes(),
        projection.coords.astype("<f4").tobytes(),
    ]
    if projection.kl_history.size:
        chunks.append(struct.pack("<I", projection.kl_history.size))
        chunks.append(projection.kl_history.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_projection(path: str | Path) -> Projection2D:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"projection file not found: {path}")
    buf = path.read_bytes()
    header = struct.Struct("<4sIQ")
    if len(buf) < header.size:
        raise ValueError(f"truncated header in {path}")
    magic, version, count = header.unpack_from(buf, 0)
    if magic != PROJECTION_MAGIC:
        raise ValueError(f"bad magic {magic!r} in {path}")
    if version != PROJECTION_VERSION:
        raise ValueError(f"unsupported projection version {version}")
    off = header.size
    need = off + count * 8 + count * 8
    if len(buf) < need:
        raise ValueError(f"truncated payload in {path}")
    ids = np.frombuffer(buf, dtype="<u8", count=count, offset=off).copy()
    off += count * 8
    coords = (
        np.frombuffer(buf, dtype="<f4", count=count * 2, offset=off).reshape(count, 2).copy()
    )
    off += count * 8
    kl = np.zeros(0, dtype=np.float32)
    if off < len(buf):
        (kl_count,) = struct.unpack_from("<I", buf, off)
        off += 4
        if len(buf) < off + 4 * kl_count:
            raise ValueError(f"truncated KL history in {path}")
        kl = np.frombuffer(buf, dtype="<f4", count=kl_count, offset=off).copy()
        off += 4 * kl_count
    if off != len(buf):
        raise ValueError(f"trailing bytes in {path}")
    return Projection2D(ids=ids, coords=coords, kl_history=kl)
