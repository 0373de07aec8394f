/** Tile cache keyed by (key, class-set version) and the viewport cover math.
 *
 * The cache only ever holds tiles of a single version: a newer version seen
 * on any response flushes everything cached, so a render pass can never mix
 * class colorings. Fetches run through a small scheduler with bounded
 * parallelism; rendering never waits on them.
 */

import type { ApiClient } from './api';
import type { DecodedTile, Extent, TileKey } from './types';
import { tileKeyString } from './types';

export function tilesForViewport(
  extent: Extent,
  viewport: [number, number, number, number],
  z: number,
): TileKey[] {
  const [minX, minY, maxX, maxY] = extent;
  const width = maxX - minX;
  const height = maxY - minY;
  const [vx0, vy0, vx1, vy1] = viewport;
  const u0 = (vx0 - minX) / width;
  const u1 = (vx1 - minX) / width;
  const v0 = (vy0 - minY) / height;
  const v1 = (vy1 - minY) / height;
  if (u1 < 0 || u0 > 1 || v1 < 0 || v0 > 1) return [];
  const keys: TileKey[] = [];
  for (let zoom = 0; zoom <= z; zoom++) {
    const side = 1 << zoom;
    const clampCell = (value: number) => Math.min(side - 1, Math.max(0, Math.floor(value)));
    const xLo = clampCell(u0 * side);
    const xHi = clampCell(u1 * side);
    const yLo = clampCell(v0 * side);
    const yHi = clampCell(v1 * side);
    for (let x = xLo; x <= xHi; x++) {
      for (let y = yLo; y <= yHi; y++) {
        keys.push({ z: zoom, x, y });
      }
    }
  }
  return keys;
}

export class TileCache {
  private tiles = new Map<string, DecodedTile>();
  private currentVersion: number | null = null;
  flushes = 0;

  get version(): number | null {
    return this.currentVersion;
  }

  get size(): number {
    return this.tiles.size;
  }

  get(key: TileKey): DecodedTile | undefined {
    return this.tiles.get(tileKeyString(key));
  }

  has(key: TileKey): boolean {
    return this.tiles.has(tileKeyString(key));
  }

  /** Adopt a version; a change wipes every cached tile. */
  observeVersion(version: number): void {
    if (this.currentVersion === null) {
      this.currentVersion = version;
      return;
    }
    if (version > this.currentVersion) {
      this.tiles.clear();
      this.flushes += 1;
      this.currentVersion = version;
    }
  }

  /** Insert a tile; stale-version tiles are dropped, newer ones flush first. */
  put(tile: DecodedTile): boolean {
    this.observeVersion(tile.version);
    if (tile.version < (this.currentVersion ?? 0)) return false;
    this.tiles.set(tileKeyString(tile.key), tile);
    return true;
  }

  clear(): void {
    this.tiles.clear();
  }
}

const MAX_IN_FLIGHT = 6;

export class TileFetcher {
  private queue: TileKey[] = [];
  private queued = new Set<string>();
  private inFlight = new Set<string>();
  private idleResolvers: (() => void)[] = [];

  constructor(
    private api: ApiClient,
    private dataset: string,
    private cache: TileCache,
    private onTile: () => void,
    private onError: (key: TileKey, error: unknown) => void = () => {},
  ) {}

  get pending(): number {
    return this.queue.length + this.inFlight.size;
  }

  /** Queue whatever is neither cached nor already queued, then pump. */
  request(keys: TileKey[]): void {
    for (const key of keys) {
      const id = tileKeyString(key);
      if (this.cache.has(key) || this.queued.has(id) || this.inFlight.has(id)) continue;
      this.queue.push(key);
      this.queued.add(id);
    }
    this.pump();
  }

  private pump(): void {
    while (this.inFlight.size < MAX_IN_FLIGHT && this.queue.length > 0) {
      const key = this.queue.shift()!;
      const id = tileKeyString(key);
      this.queued.delete(id);
      this.inFlight.add(id);
      this.api
        .tile(this.dataset, key)
        .then((tile) => {
          this.cache.put(tile);
          this.onTile();
        })
        .catch((error) => this.onError(key, error))
        .finally(() => {
          this.inFlight.delete(id);
          this.pump();
          this.notifyIfIdle();
        });
    }
    this.notifyIfIdle();
  }

  private notifyIfIdle(): void {
    if (this.pending === 0) {
      const resolvers = this.idleResolvers;
      this.idleResolvers = [];
      for (const resolve of resolvers) resolve();
    }
  }

  /** Resolves once no fetch is queued or in flight. */
  idle(): Promise<void> {
    if (this.pending === 0) return Promise.resolve();
    return new Promise((resolve) => this.idleResolvers.push(resolve));
  }
}
