/** Point drawing behind a small layer interface.
 *
 * The app renders through DrawLayer so tests can substitute a recording
 * fake; Canvas2dLayer is the browser implementation, batching fills by
 * (color, alpha) state to keep per-point cost low.
 */

import { classColor } from './colors';

export interface DrawLayer {
  begin(width: number, height: number): void;
  drawPoint(sx: number, sy: number, classIndex: number, alpha: number, size: number): void;
  drawMarker(sx: number, sy: number, kind: 'search' | 'selection'): void;
  end(): void;
}

export class Canvas2dLayer implements DrawLayer {
  private ctx: CanvasRenderingContext2D;
  private lastStyle = '';
  private lastAlpha = -1;

  constructor(private canvas: HTMLCanvasElement) {
    const ctx = canvas.getContext('2d');
    if (!ctx) throw new Error('2D canvas context unavailable');
    this.ctx = ctx;
  }

  begin(width: number, height: number): void {
    if (this.canvas.width !== width) this.canvas.width = width;
    if (this.canvas.height !== height) this.canvas.height = height;
    this.ctx.clearRect(0, 0, width, height);
    this.lastStyle = '';
    this.lastAlpha = -1;
  }

  drawPoint(sx: number, sy: number, classIndex: number, alpha: number, size: number): void {
    const style = classColor(classIndex);
    if (style !== this.lastStyle) {
      this.ctx.fillStyle = style;
      this.lastStyle = style;
    }
    if (alpha !== this.lastAlpha) {
      this.ctx.globalAlpha = alpha;
      this.lastAlpha = alpha;
    }
    this.ctx.fillRect(sx - size / 2, sy - size / 2, size, size);
  }

  drawMarker(sx: number, sy: number, kind: 'search' | 'selection'): void {
    this.ctx.globalAlpha = 1;
    this.lastAlpha = 1;
    this.ctx.strokeStyle = kind === 'search' ? '#ff3d00' : '#ffffff';
    this.ctx.lineWidth = 2;
    this.ctx.beginPath();
    this.ctx.arc(sx, sy, kind === 'search' ? 6 : 8, 0, Math.PI * 2);
    this.ctx.stroke();
  }

  end(): void {
    this.ctx.globalAlpha = 1;
  }
}
