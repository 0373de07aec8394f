"""Deterministic quadtree tile pyramid over a 2D projection.

Detail is cumulative: a viewport's data is the union of every intersecting
tile at zooms up to the current one, so the renderer never re-downloads
coarse points while zooming. Placement order is a per-point rank drawn from a
seeded mix hash, making every tile an unbiased sample of its cell: a point
lands in the shallowest tile whose cell contains it and whose occupancy is
still below the budget. Cells are half-open; boundary points belong to the
higher-index cell and the extent max edge to the last cell.

Tile file layout (little-endian):

    magic   4 bytes  b"AATL"
    version u8       1
    z       u8
    x       u32
    y       u32
    count   u32
    columns: count * u64 ids, count * f32 x, count * f32 y,
             count * u16 class, count * f32 rank
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tsne import Projection2D
from .zeroshot import ClassAssignment, UNASSIGNED

TILE_MAGIC = b"AATL"
TILE_VERSION = 1
TILE_HEADER = struct.Struct("<4sBBIII")
POINT_BYTES = 8 + 4 + 4 + 2 + 4

MAX_ZOOM_CAP = 24
DEFAULT_TILE_BUDGET = 20000

EXTENT_PAD_FRACTION = 0.01


class TileFormatError(ValueError):
    """Corrupt or incompatible tile bytes."""


@dataclass(frozen=True, order=True)
class TileKey:
    z: int
    x: int
    y: int

    def __post_init__(self) -> None:
        if self.z < 0:
            raise ValueError(f"zoom must be non-negative, got {self.z}")
        side = 1 << self.z
        if not (0 <= self.x < side and 0 <= self.y < side):
            raise ValueError(f"tile ({self.x}, {self.y}) out of range at zoom {self.z}")


@dataclass(frozen=True)
class Extent:
    min_x: float
    min_y: float
    max_x: float
    max_y: float

    def __post_init__(self) -> None:
        if not (self.max_x > self.min_x and self.max_y > self.min_y):
            raise ValueError("extent must be non-degenerate")

    @property
    def width(self) -> float:
        return self.max_x - self.min_x

    @property
    def height(self) -> float:
        return self.max_y - self.min_y

    def normalize(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        u = (np.asarray(x, dtype=np.float64) - self.min_x) / self.width
        v = (np.asarray(y, dtype=np.float64) - self.min_y) / self.height
        return u, v


@dataclass
class Tile:
    key: TileKey
    ids: np.ndarray  # uint64
    x: np.ndarray  # float32
    y: np.ndarray  # float32
    class_index: np.ndarray  # uint16
    rank: np.ndarray  # float32

    def __post_init__(self) -> None:
        self.ids = np.ascontiguousarray(self.ids, dtype=np.uint64)
        self.x = np.ascontiguousarray(self.x, dtype=np.float32)
        self.y = np.ascontiguousarray(self.y, dtype=np.float32)
        self.class_index = np.ascontiguousarray(self.class_index, dtype=np.uint16)
        self.rank = np.ascontiguousarray(self.rank, dtype=np.float32)
        n = self.ids.shape[0]
        for col in (self.x, self.y, self.class_index, self.rank):
            if col.shape[0] != n:
                raise ValueError("tile columns must have equal lengths")

    @property
    def count(self) -> int:
        return self.ids.shape[0]


@dataclass
class PyramidManifest:
    extent: Extent
    tile_budget: int
    max_zoom: int
    total_points: int
    tiles_per_zoom: dict[int, int]
    seed: int


@dataclass
class TilePyramid:
    manifest: PyramidManifest
    tiles: dict[TileKey, Tile]


def compute_extent(projection: Projection2D) -> Extent:
    """Tight bounding box padded 1% per side; degenerate axes padded to unit
    size centered on the data."""
    if projection.n < 1:
        raise ValueError("cannot compute extent of an empty projection")
    coords = projection.coords.astype(np.float64)
    lo = coords.min(axis=0)
    hi = coords.max(axis=0)
    bounds = []
    for axis in range(2):
        span = hi[axis] - lo[axis]
        if span == 0.0:
            bounds.append((lo[axis] - 0.5, hi[axis] + 0.5))
        else:
            pad = span * EXTENT_PAD_FRACTION
            bounds.append((lo[axis] - pad, hi[axis] + pad))
    return Extent(
        min_x=bounds[0][0], min_y=bounds[1][0], max_x=bounds[0][1], max_y=bounds[1][1]
    )


_SPLITMIX_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_SPLITMIX_M1 = np.uint64(0xBF58476D1CE4E5B9)
_SPLITMIX_M2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    z = x + _SPLITMIX_GAMMA
    z = (z ^ (z >> np.uint64(30))) * _SPLITMIX_M1
    z = (z ^ (z >> np.uint64(27))) * _SPLITMIX_M2
    return z ^ (z >> np.uint64(31))


def assign_ranks(ids: np.ndarray, seed: int) -> np.ndarray:
    """Stable uniform rank in [0, 1) per id: splitmix64 of the seeded id,
    top 53 bits scaled. Bit-exact across runs and platforms."""
    ids = np.asarray(ids, dtype=np.uint64)
    if np.unique(ids).size != ids.size:
        raise ValueError("ids must be unique")
    seed_hash = _splitmix64(np.array([np.uint64(seed)], dtype=np.uint64))[0]
    mixed = _splitmix64(ids ^ seed_hash)
    return (mixed >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def build_pyramid(
    projection: Projection2D,
    assignment: ClassAssignment | None = None,
    tile_budget: int = DEFAULT_TILE_BUDGET,
    seed: int = 0,
) -> TilePyramid:
    """Place every point in exactly one tile, rank order deciding who
    surfaces at coarse zooms. Zoom is capped at MAX_ZOOM_CAP, where tiles
    absorb any remainder unbounded."""
    if tile_budget < 1:
        raise ValueError("tile_budget must be >= 1")
    n = projection.n
    if n < 1:
        raise ValueError("cannot tile an empty projection")
    if assignment is None:
        class_by_row = np.full(n, UNASSIGNED, dtype=np.uint16)
    else:
        if assignment.n != n:
            raise ValueError(
                f"id mismatch: assignment covers {assignment.n} points, projection {n}"
            )
        class_by_row = assignment.class_index

    extent = compute_extent(projection)
    ranks = assign_ranks(projection.ids, seed)
    u, v = extent.normalize(projection.coords[:, 0], projection.coords[:, 1])
    ranks32 = ranks.astype(np.float32)

    # rank-ascending placement order, ties broken by id
    remaining = np.lexsort((projection.ids, ranks))
    tiles: dict[TileKey, Tile] = {}
    tiles_per_zoom: dict[int, int] = {}
    z = 0
    while remaining.size:
        side = 1 << z
        cx = np.clip((u[remaining] * side).astype(np.int64), 0, side - 1)
        cy = np.clip((v[remaining] * side).astype(np.int64), 0, side - 1)
        cell = cx * side + cy
        grp = np.argsort(cell, kind="stable")
        ordered = remaining[grp]
        cells = cell[grp]
        is_start = np.ones(cells.shape[0], dtype=bool)
        is_start[1:] = cells[1:] != cells[:-1]
        group_start = np.maximum.accumulate(np.where(is_start, np.arange(cells.shape[0]), 0))
        within = np.arange(cells.shape[0]) - group_start
        keep = within < tile_budget if z < MAX_ZOOM_CAP else np.ones_like(within, dtype=bool)

        placed = ordered[keep]
        placed_cells = cells[keep]
        starts = np.nonzero(
            np.concatenate(([True], placed_cells[1:] != placed_cells[:-1]))
            if placed_cells.size
            else np.zeros(0, dtype=bool)
        )[0]
        bounds = np.append(starts, placed_cells.size)
        for gi in range(starts.size):
            rows = placed[bounds[gi] : bounds[gi + 1]]
            c = int(placed_cells[bounds[gi]])
            key = TileKey(z=z, x=c // side, y=c % side)
            tiles[key] = Tile(
                key=key,
                ids=projection.ids[rows],
                x=projection.coords[rows, 0],
                y=projection.coords[rows, 1],
                class_index=class_by_row[rows],
                rank=ranks32[rows],
            )
        if starts.size:
            tiles_per_zoom[z] = int(starts.size)
        remaining = ordered[~keep]
        z += 1

    manifest = PyramidManifest(
        extent=extent,
        tile_budget=tile_budget,
        max_zoom=max(tiles_per_zoom) if tiles_per_zoom else 0,
        total_points=n,
        tiles_per_zoom=tiles_per_zoom,
        seed=seed,
    )
    return TilePyramid(manifest=manifest, tiles=tiles)


def with_class_column(
    pyramid: TilePyramid, ids_sorted: np.ndarray, class_by_row: np.ndarray
) -> TilePyramid:
    """Rebuild tiles with a new class column; coordinates and ranks are
    reused untouched."""
    ids_sorted = np.asarray(ids_sorted, dtype=np.uint64)
    class_by_row = np.asarray(class_by_row, dtype=np.uint16)
    tiles: dict[TileKey, Tile] = {}
    for key, tile in pyramid.tiles.items():
        rows = np.searchsorted(ids_sorted, tile.ids)
        if (rows >= ids_sorted.size).any() or (ids_sorted[rows] != tile.ids).any():
            raise ValueError("pyramid ids missing from the supplied id index")
        tiles[key] = Tile(
            key=key,
            ids=tile.ids,
            x=tile.x,
            y=tile.y,
            class_index=class_by_row[rows],
            rank=tile.rank,
        )
    return TilePyramid(manifest=pyramid.manifest, tiles=tiles)


def tiles_for_viewport(
    extent: Extent, viewport: tuple[float, float, float, float], z: int
) -> list[TileKey]:
    """All keys at zooms 0..z whose cells intersect the viewport; ancestors
    included since detail is cumulative. Disjoint viewports yield []."""
    if z < 0:
        raise ValueError("zoom must be non-negative")
    vx0, vy0, vx1, vy1 = viewport
    if not (vx1 >= vx0 and vy1 >= vy0):
        raise ValueError("viewport must have non-negative size")
    (u0, u1), (v0, v1) = (
        ((vx0 - extent.min_x) / extent.width, (vx1 - extent.min_x) / extent.width),
        ((vy0 - extent.min_y) / extent.height, (vy1 - extent.min_y) / extent.height),
    )
    if u1 < 0.0 or u0 > 1.0 or v1 < 0.0 or v0 > 1.0:
        return []
    keys: list[TileKey] = []
    for zoom in range(z + 1):
        side = 1 << zoom
        x_lo = int(np.clip(np.floor(u0 * side), 0, side - 1))
        x_hi = int(np.clip(np.floor(u1 * side), 0, side - 1))
        y_lo = int(np.clip(np.floor(v0 * side), 0, side - 1))
        y_hi = int(np.clip(np.floor(v1 * side), 0, side - 1))
        for x in range(x_lo, x_hi + 1):
            for y in range(y_lo, y_hi + 1):
                keys.append(TileKey(z=zoom, x=x, y=y))
    return keys


def serialize_tile(tile: Tile) -> bytes:
    header = TILE_HEADER.pack(
        TILE_MAGIC, TILE_VERSION, tile.key.z, tile.key.x, tile.key.y, tile.count
    )
    return b"".join(
        (
            header,
            tile.ids.astype("<u8").tobytes(),
            tile.x.astype("<f4").tobytes(),
            tile.y.astype("<f4").tobytes(),
            tile.class_index.astype("<u2").tobytes(),
            tile.rank.astype("<f4").tobytes(),
        )
    )


def deserialize_tile(buf: bytes) -> Tile:
    if len(buf) < TILE_HEADER.size:
        raise TileFormatError("truncated tile header")
    magic, version, z, x, y, count = TILE_HEADER.unpack_from(buf, 0)
    if magic != TILE_MAGIC:
        raise TileFormatError(f"bad magic {magic!r}")
    if version != TILE_VERSION:
        raise TileFormatError(f"unsupported tile version {version}")
    expected = TILE_HEADER.size + count * POINT_BYTES
    if len(buf) != expected:
        raise TileFormatError(f"tile length {len(buf)} != expected {expected}")
    off = TILE_HEADER.size
    ids = np.frombuffer(buf, dtype="<u8", count=count, offset=off).copy()
    off += count * 8
    xs = np.frombuffer(buf, dtype="<f4", count=count, offset=off).copy()
    off += count * 4
    ys = np.frombuffer(buf, dtype="<f4", count=count, offset=off).copy()
    off += count * 4
    classes = np.frombuffer(buf, dtype="<u2", count=count, offset=off).copy()
    off += count * 2
    ranks = np.frombuffer(buf, dtype="<f4", count=count, offset=off).copy()
    return Tile(
        key=TileKey(z=z, x=x, y=y), ids=ids, x=xs, y=ys, class_index=classes, rank=ranks
    )


def manifest_to_dict(manifest: PyramidManifest) -> dict:
    return {
        "extent": [
            manifest.extent.min_x,
            manifest.extent.min_y,
            manifest.extent.max_x,
            manifest.extent.max_y,
        ],
        "tile_budget": manifest.tile_budget,
        "max_zoom": manifest.max_zoom,
        "total_points": manifest.total_points,
        "tiles_per_zoom": {str(z): c for z, c in sorted(manifest.tiles_per_zoom.items())},
        "seed": manifest.seed,
    }


def manifest_from_dict(doc: dict) -> PyramidManifest:
    ext = doc["extent"]
    return PyramidManifest(
        extent=Extent(min_x=ext[0], min_y=ext[1], max_x=ext[2], max_y=ext[3]),
        tile_budget=int(doc["tile_budget"]),
        max_zoom=int(doc["max_zoom"]),
        total_points=int(doc["total_points"]),
        tiles_per_zoom={int(z): int(c) for z, c in doc["tiles_per_zoom"].items()},
        seed=int(doc["seed"]),
    )


def write_pyramid(root: str | Path, pyramid: TilePyramid) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "manifest.json").write_text(
        json.dumps(manifest_to_dict(pyramid.manifest), indent=2) + "\n", encoding="utf-8"
    )
    for key, tile in pyramid.tiles.items():
        tile_dir = root / "tiles" / str(key.z)
        tile_dir.mkdir(parents=True, exist_ok=True)
        (tile_dir / f"{key.x}_{key.y}.aatl").write_bytes(serialize_tile(tile))


def read_pyramid(root: str | Path) -> TilePyramid:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"pyramid manifest not found: {manifest_path}")
    manifest = manifest_from_dict(json.loads(manifest_path.read_text(encoding="utf-8")))
    tiles: dict[TileKey, Tile] = {}
    for path in sorted((root / "tiles").glob("*/*.aatl")):
        tile = deserialize_tile(path.read_bytes())
        tiles[tile.key] = tile
    return TilePyramid(manifest=manifest, tiles=tiles)
