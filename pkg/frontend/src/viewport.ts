/** Pan/zoom camera over the projection plane.
 *
 * Zoom is continuous; the tile zoom used for fetching is its floor, clamped
 * to the pyramid's range. At zoom 0 the whole extent fits the canvas.
 */

import type { Extent } from './types';

export class Viewport {
  centerX: number;
  centerY: number;
  zoom = 0;

  constructor(
    public extent: Extent,
    public maxZoom: number,
  ) {
    this.centerX = (extent[0] + extent[2]) / 2;
    this.centerY = (extent[1] + extent[3]) / 2;
  }

  get tileZoom(): number {
    return Math.min(this.maxZoom, Math.max(0, Math.floor(this.zoom)));
  }

  /** World units per screen pixel for a given canvas size. */
  scale(canvasW: number, canvasH: number): number {
    const width = this.extent[2] - this.extent[0];
    const height = this.extent[3] - this.extent[1];
    const base = Math.min(canvasW / width, canvasH / height);
    return base * 2 ** this.zoom;
  }

  worldToScreen(
    wx: number,
    wy: number,
    canvasW: number,
    canvasH: number,
  ): [number, number] {
    const s = this.scale(canvasW, canvasH);
    return [(wx - this.centerX) * s + canvasW / 2, (wy - this.centerY) * s + canvasH / 2];
  }

  screenToWorld(
    sx: number,
    sy: number,
    canvasW: number,
    canvasH: number,
  ): [number, number] {
    const s = this.scale(canvasW, canvasH);
    return [(sx - canvasW / 2) / s + this.centerX, (sy - canvasH / 2) / s + this.centerY];
  }

  visibleRect(canvasW: number, canvasH: number): [number, number, number, number] {
    const [x0, y0] = this.screenToWorld(0, 0, canvasW, canvasH);
    const [x1, y1] = this.screenToWorld(canvasW, canvasH, canvasW, canvasH);
    return [x0, y0, x1, y1];
  }

  panPixels(dx: number, dy: number, canvasW: number, canvasH: number): void {
    const s = this.scale(canvasW, canvasH);
    this.centerX -= dx / s;
    this.centerY -= dy / s;
    this.clamp();
  }

  /** Zoom by delta keeping the world point under the anchor pixel fixed. */
  zoomBy(delta: number, anchorX: number, anchorY: number, canvasW: number, canvasH: number): void {
    const [wx, wy] = this.screenToWorld(anchorX, anchorY, canvasW, canvasH);
    this.zoom = Math.min(this.maxZoom + 2, Math.max(0, this.zoom + delta));
    const s = this.scale(canvasW, canvasH);
    this.centerX = wx - (anchorX - canvasW / 2) / s;
    this.centerY = wy - (anchorY - canvasH / 2) / s;
    this.clamp();
  }

  centerOn(wx: number, wy: number): void {
    this.centerX = wx;
    this.centerY = wy;
    this.clamp();
  }

  private clamp(): void {
    this.centerX = Math.min(this.extent[2], Math.max(this.extent[0], this.centerX));
    this.centerY = Math.min(this.extent[3], Math.max(this.extent[1], this.centerY));
  }
}
