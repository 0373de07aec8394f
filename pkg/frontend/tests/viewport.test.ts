import { describe, expect, it } from 'vitest';

import { Viewport } from '../src/viewport';
import type { Extent } from '../src/types';

const extent: Extent = [0, 0, 100, 50];

describe('Viewport', () => {
  it('starts centered on the extent at zoom 0', () => {
    const vp = new Viewport(extent, 4);
    expect(vp.centerX).toBe(50);
    expect(vp.centerY).toBe(25);
    expect(vp.tileZoom).toBe(0);
  });

  it('screen/world transforms are inverse', () => {
    const vp = new Viewport(extent, 4);
    vp.zoom = 1.7;
    vp.centerOn(30, 20);
    const [sx, sy] = vp.worldToScreen(42.5, 17.25, 800, 600);
    const [wx, wy] = vp.screenToWorld(sx, sy, 800, 600);
    expect(wx).toBeCloseTo(42.5, 9);
    expect(wy).toBeCloseTo(17.25, 9);
  });

  it('tile zoom floors the continuous zoom and clamps to the pyramid', () => {
    const vp = new Viewport(extent, 3);
    vp.zoom = 2.9;
    expect(vp.tileZoom).toBe(2);
    vp.zoom = 9;
    expect(vp.tileZoom).toBe(3);
  });

  it('zooming keeps the anchor point fixed', () => {
    const vp = new Viewport(extent, 6);
    const before = vp.screenToWorld(600, 100, 800, 600);
    vp.zoomBy(1.0, 600, 100, 800, 600);
    const after = vp.screenToWorld(600, 100, 800, 600);
    expect(after[0]).toBeCloseTo(before[0], 6);
    expect(after[1]).toBeCloseTo(before[1], 6);
  });

  it('panning moves the center and clamps to the extent', () => {
    const vp = new Viewport(extent, 4);
    vp.panPixels(-100000, 0, 800, 600);
    expect(vp.centerX).toBe(100);
    // dragging far down-right pushes the center to the extent minimum
    vp.panPixels(100000, 100000, 800, 600);
    expect(vp.centerX).toBe(0);
    expect(vp.centerY).toBe(0);
  });
});
