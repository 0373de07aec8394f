import { describe, expect, it } from 'vitest';

import { TileCache, tilesForViewport } from '../src/tiles';
import type { DecodedTile, Extent } from '../src/types';

function tile(z: number, x: number, y: number, version: number): DecodedTile {
  return {
    key: { z, x, y },
    version,
    count: 0,
    ids: new Float64Array(0),
    xs: new Float32Array(0),
    ys: new Float32Array(0),
    classes: new Uint16Array(0),
    ranks: new Float32Array(0),
  };
}

describe('TileCache version discipline', () => {
  it('caches tiles of the current version', () => {
    const cache = new TileCache();
    expect(cache.put(tile(0, 0, 0, 1))).toBe(true);
    expect(cache.put(tile(1, 0, 0, 1))).toBe(true);
    expect(cache.size).toBe(2);
    expect(cache.version).toBe(1);
  });

  it('a newer version flushes everything cached', () => {
    const cache = new TileCache();
    cache.put(tile(0, 0, 0, 1));
    cache.put(tile(1, 1, 1, 1));
    cache.observeVersion(2);
    expect(cache.size).toBe(0);
    expect(cache.flushes).toBe(1);
    expect(cache.version).toBe(2);
  });

  it('a newer tile arrival also flushes, then is kept', () => {
    const cache = new TileCache();
    cache.put(tile(0, 0, 0, 1));
    expect(cache.put(tile(1, 0, 1, 2))).toBe(true);
    expect(cache.size).toBe(1);
    expect(cache.get({ z: 1, x: 0, y: 1 })).toBeDefined();
    expect(cache.get({ z: 0, x: 0, y: 0 })).toBeUndefined();
  });

  it('stale-version tiles are dropped, never mixed', () => {
    const cache = new TileCache();
    cache.observeVersion(3);
    expect(cache.put(tile(0, 0, 0, 2))).toBe(false);
    expect(cache.size).toBe(0);
  });

  it('same version does not flush', () => {
    const cache = new TileCache();
    cache.put(tile(0, 0, 0, 1));
    cache.observeVersion(1);
    expect(cache.size).toBe(1);
    expect(cache.flushes).toBe(0);
  });
});

describe('tilesForViewport', () => {
  const extent: Extent = [0, 0, 1, 1];

  it('full extent at zoom 0 is the root', () => {
    expect(tilesForViewport(extent, [0, 0, 1, 1], 0)).toEqual([{ z: 0, x: 0, y: 0 }]);
  });

  it('full extent at zoom 1 includes the root and all 4 children', () => {
    const keys = tilesForViewport(extent, [0, 0, 1, 1], 1);
    expect(keys).toHaveLength(5);
    expect(keys).toContainEqual({ z: 0, x: 0, y: 0 });
    for (const x of [0, 1]) {
      for (const y of [0, 1]) {
        expect(keys).toContainEqual({ z: 1, x, y });
      }
    }
  });

  it('a quarter viewport needs only its quadrant plus ancestors', () => {
    expect(tilesForViewport(extent, [0, 0, 0.45, 0.45], 1)).toEqual([
      { z: 0, x: 0, y: 0 },
      { z: 1, x: 0, y: 0 },
    ]);
  });

  it('a disjoint viewport yields nothing', () => {
    expect(tilesForViewport(extent, [5, 5, 6, 6], 2)).toEqual([]);
  });
});
