import { ApiClient } from './api';
import { AtlasApp } from './app';
import { Canvas2dLayer } from './renderer';
import './style.css';

async function boot(): Promise<void> {
  const root = document.getElementById('app');
  if (!root) throw new Error('missing #app element');

  const api = new ApiClient('');
  const health = await fetch('/healthz').then((r) => r.json() as Promise<{ datasets: string[] }>);
  const dataset = new URLSearchParams(location.search).get('dataset') ?? health.datasets[0];
  if (!dataset) {
    root.textContent = 'no datasets loaded; start the server with --dataset-root';
    return;
  }

  const mapHost = document.createElement('div');
  const canvas = document.createElement('canvas');
  const width = Math.max(640, window.innerWidth - 360);
  const height = Math.max(480, window.innerHeight - 220);

  const app = new AtlasApp(root, api, dataset, new Canvas2dLayer(canvas), { width, height });
  await app.init();

  const map = root.querySelector('[data-role=map]');
  if (map) {
    map.insertBefore(canvas, map.firstChild);
  } else {
    mapHost.append(canvas);
    root.append(mapHost);
  }

  let dragging = false;
  let lastX = 0;
  let lastY = 0;
  let moved = false;
  canvas.addEventListener('mousedown', (event) => {
    dragging = true;
    moved = false;
    lastX = event.offsetX;
    lastY = event.offsetY;
  });
  canvas.addEventListener('mousemove', (event) => {
    if (!dragging) return;
    const dx = event.offsetX - lastX;
    const dy = event.offsetY - lastY;
    if (Math.abs(dx) + Math.abs(dy) > 2) moved = true;
    app.viewport.panPixels(dx, dy, width, height);
    lastX = event.offsetX;
    lastY = event.offsetY;
    app.renderOnce();
  });
  window.addEventListener('mouseup', (event) => {
    if (dragging && !moved) {
      void app.clickAt(lastX, lastY);
    }
    dragging = false;
    void event;
  });
  canvas.addEventListener('wheel', (event) => {
    event.preventDefault();
    app.viewport.zoomBy(-event.deltaY / 400, event.offsetX, event.offsetY, width, height);
    app.renderOnce();
  });

  const loop = (): void => {
    app.renderOnce();
    // a steady cadence keeps newly fetched tiles appearing without
    // per-fetch invalidation plumbing
    setTimeout(() => requestAnimationFrame(loop), 250);
  };
  requestAnimationFrame(loop);
}

void boot();
