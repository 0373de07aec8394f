/** Atlas application: streaming tile renderer, class labels, search bar,
 * classify panel, and the point detail pane. One render loop owns all state
 * transitions; tile fetches happen asynchronously and never block a frame.
 */

import { ApiClient, ApiError } from './api';
import { DIMMED_ALPHA, classColor } from './colors';
import type { DrawLayer } from './renderer';
import { Store } from './state';
import { TileCache, TileFetcher, tilesForViewport } from './tiles';
import type { DatasetManifest, LabelPlacement, PointDetail, SearchResult } from './types';
import { UNASSIGNED_CLASS } from './types';
import { Viewport } from './viewport';

export interface RenderStats {
  tilesRequested: number;
  tilesDrawn: number;
  pointsDrawn: number;
}

export interface PickResult {
  id: number;
  x: number;
  y: number;
}

const POINT_SIZE = 3;
const PICK_RADIUS_PX = 8;

export class AtlasApp {
  readonly store = new Store();
  readonly cache = new TileCache();
  manifest!: DatasetManifest;
  viewport!: Viewport;
  labels: LabelPlacement[] = [];
  detail: PointDetail | null = null;
  lastError: string | null = null;

  private fetcher!: TileFetcher;
  private width: number;
  private height: number;
  private dom: {
    labelLayer: HTMLElement;
    detailPane: HTMLElement;
    statusLine: HTMLElement;
    resultsGrid: HTMLElement;
  };

  constructor(
    private root: HTMLElement,
    private api: ApiClient,
    private dataset: string,
    private layer: DrawLayer,
    size: { width: number; height: number } = { width: 800, height: 600 },
  ) {
    this.width = size.width;
    this.height = size.height;
    this.root.innerHTML = `
      <div class="atlas-toolbar">
        <form class="atlas-search" data-role="search-form">
          <input type="text" data-role="search-input" placeholder="describe a sound..." />
          <input type="file" data-role="audio-input" accept="audio/*" />
          <button type="submit" data-role="search-button">search</button>
          <button type="button" data-role="clear-search">clear</button>
        </form>
        <form class="atlas-classify" data-role="classify-form">
          <input type="text" data-role="class-input"
                 placeholder="classes, comma-separated" />
          <button type="submit" data-role="classify-button">classify</button>
        </form>
      </div>
      <div class="atlas-main">
        <div class="atlas-map" data-role="map">
          <div class="atlas-labels" data-role="label-layer"></div>
        </div>
        <aside class="atlas-detail" data-role="detail-pane" hidden></aside>
      </div>
      <div class="atlas-results" data-role="results-grid"></div>
      <div class="atlas-status" data-role="status"></div>
    `;
    this.dom = {
      labelLayer: this.query('[data-role=label-layer]'),
      detailPane: this.query('[data-role=detail-pane]'),
      statusLine: this.query('[data-role=status]'),
      resultsGrid: this.query('[data-role=results-grid]'),
    };
    this.bindEvents();
  }

  private query<T extends HTMLElement = HTMLElement>(selector: string): T {
    const el = this.root.querySelector<T>(selector);
    if (!el) throw new Error(`missing element ${selector}`);
    return el;
  }

  private bindEvents(): void {
    const searchForm = this.query<HTMLFormElement>('[data-role=search-form]');
    searchForm.addEventListener('submit', (event) => {
      event.preventDefault();
      const text = this.query<HTMLInputElement>('[data-role=search-input]').value.trim();
      const files = this.query<HTMLInputElement>('[data-role=audio-input]').files;
      if (files && files.length > 0) {
        void this.searchAudioFile(files[0]!);
      } else if (text) {
        void this.searchText(text);
      }
    });
    this.query('[data-role=clear-search]').addEventListener('click', () => {
      this.store.set({ searchResults: null });
      this.renderResultsGrid([]);
      this.renderOnce();
    });
    const classifyForm = this.query<HTMLFormElement>('[data-role=classify-form]');
    classifyForm.addEventListener('submit', (event) => {
      event.preventDefault();
      const raw = this.query<HTMLInputElement>('[data-role=class-input]').value;
      const names = raw
        .split(',')
        .map((s) => s.trim())
        .filter((s) => s.length > 0);
      if (names.length > 0) void this.applyClasses(names);
    });
  }

  async init(): Promise<void> {
    this.manifest = await this.api.manifest(this.dataset);
    this.cache.observeVersion(this.manifest.class_set_version);
    this.viewport = new Viewport(this.manifest.extent, this.manifest.max_zoom);
    this.fetcher = new TileFetcher(
      this.api,
      this.dataset,
      this.cache,
      () => this.renderOnce(),
      (key, error) => this.setStatus(`tile ${key.z}/${key.x}/${key.y} failed: ${error}`),
    );
    await this.refreshLabels();
    this.renderOnce();
  }

  /** Await all queued tile fetches (test hook; the UI never blocks on it). */
  settle(): Promise<void> {
    return this.fetcher.idle();
  }

  renderOnce(): RenderStats {
    const needed = tilesForViewport(
      this.manifest.extent,
      this.viewport.visibleRect(this.width, this.height),
      this.viewport.tileZoom,
    );
    this.fetcher.request(needed);

    const { highlightedClass, searchResults, selectedId } = this.store.get();
    this.layer.begin(this.width, this.height);
    let tilesDrawn = 0;
    let pointsDrawn = 0;
    for (const key of needed) {
      const tile = this.cache.get(key);
      if (!tile) continue; // stale coarser tiles stay up; nothing blocks
      tilesDrawn += 1;
      for (let i = 0; i < tile.count; i++) {
        const [sx, sy] = this.viewport.worldToScreen(
          tile.xs[i]!,
          tile.ys[i]!,
          this.width,
          this.height,
        );
        if (sx < -4 || sy < -4 || sx > this.width + 4 || sy > this.height + 4) continue;
        const cls = tile.classes[i]!;
        const alpha =
          highlightedClass === null || cls === highlightedClass ? 1.0 : DIMMED_ALPHA;
        this.layer.drawPoint(sx, sy, cls, alpha, POINT_SIZE);
        pointsDrawn += 1;
      }
    }
    if (searchResults) {
      for (const hit of searchResults) {
        const [sx, sy] = this.viewport.worldToScreen(hit.x, hit.y, this.width, this.height);
        this.layer.drawMarker(sx, sy, 'search');
      }
    }
    if (selectedId !== null && this.detail) {
      const [sx, sy] = this.viewport.worldToScreen(
        this.detail.x,
        this.detail.y,
        this.width,
        this.height,
      );
      this.layer.drawMarker(sx, sy, 'selection');
    }
    this.layer.end();
    this.renderLabelLayer();
    return { tilesRequested: needed.length, tilesDrawn, pointsDrawn };
  }

  /** Nearest cached point within the pick radius of a screen position. */
  pickAt(sx: number, sy: number): PickResult | null {
    const needed = tilesForViewport(
      this.manifest.extent,
      this.viewport.visibleRect(this.width, this.height),
      this.viewport.tileZoom,
    );
    let best: PickResult | null = null;
    let bestD2 = PICK_RADIUS_PX * PICK_RADIUS_PX;
    for (const key of needed) {
      const tile = this.cache.get(key);
      if (!tile) continue;
      for (let i = 0; i < tile.count; i++) {
        const [px, py] = this.viewport.worldToScreen(
          tile.xs[i]!,
          tile.ys[i]!,
          this.width,
          this.height,
        );
        const d2 = (px - sx) * (px - sx) + (py - sy) * (py - sy);
        if (d2 <= bestD2) {
          bestD2 = d2;
          best = { id: tile.ids[i]!, x: tile.xs[i]!, y: tile.ys[i]! };
        }
      }
    }
    return best;
  }

  async clickAt(sx: number, sy: number): Promise<void> {
    const hit = this.pickAt(sx, sy);
    if (hit) {
      await this.selectPoint(hit.id);
    }
  }

  async selectPoint(id: number): Promise<void> {
    this.detail = await this.api.point(this.dataset, id);
    this.store.set({ selectedId: id });
    this.renderDetailPane(this.detail);
    this.renderOnce();
  }

  toggleHighlight(classIndex: number): void {
    this.store.toggleHighlight(classIndex);
    this.renderOnce();
  }

  async searchText(text: string): Promise<void> {
    try {
      const response = await this.api.searchText(this.dataset, text, 9);
      this.store.set({ searchResults: response.results });
      this.renderResultsGrid(response.results);
      this.setStatus(`${response.results.length} results`);
    } catch (error) {
      this.reportError(error);
    }
    this.renderOnce();
  }

  async searchAudioFile(file: File): Promise<void> {
    if (file.size > this.manifest.max_upload_bytes) {
      this.setStatus(
        `audio file is ${file.size} bytes; limit is ${this.manifest.max_upload_bytes}`,
      );
      return;
    }
    const buffer = await readFileBytes(file);
    const base64 = bytesToBase64(new Uint8Array(buffer));
    const format = (file.name.split('.').pop() ?? 'raw').toLowerCase();
    try {
      const response = await this.api.searchAudio(this.dataset, base64, format, 9);
      this.store.set({ searchResults: response.results });
      this.renderResultsGrid(response.results);
      this.setStatus(`${response.results.length} results`);
    } catch (error) {
      this.reportError(error);
    }
    this.renderOnce();
  }

  async applyClasses(classNames: string[]): Promise<void> {
    try {
      const { class_set_version } = await this.api.classify(this.dataset, classNames);
      // refresh manifest and labels; the version change flushes the cache
      this.manifest = await this.api.manifest(this.dataset);
      this.cache.observeVersion(class_set_version);
      await this.refreshLabels();
      this.store.set({ highlightedClass: null });
      this.setStatus(`classified into ${classNames.length} classes (v${class_set_version})`);
    } catch (error) {
      this.reportError(error);
    }
    this.renderOnce();
  }

  private async refreshLabels(): Promise<void> {
    const response = await this.api.labels(this.dataset);
    this.labels = response.labels;
    this.cache.observeVersion(response.class_set_version);
  }

  private renderLabelLayer(): void {
    const { highlightedClass } = this.store.get();
    this.dom.labelLayer.replaceChildren(
      ...this.labels.map((label) => {
        const el = document.createElement('button');
        el.className = 'atlas-label';
        el.dataset.classIndex = String(label.class_index);
        if (highlightedClass === label.class_index) el.classList.add('highlighted');
        const [sx, sy] = this.viewport.worldToScreen(
          label.x,
          label.y,
          this.width,
          this.height,
        );
        el.style.left = `${sx}px`;
        el.style.top = `${sy}px`;
        el.style.borderColor = classColor(label.class_index);
        el.textContent = `${label.name} (${label.count})`;
        el.addEventListener('click', () => this.toggleHighlight(label.class_index));
        return el;
      }),
    );
  }

  private renderDetailPane(detail: PointDetail): void {
    const pane = this.dom.detailPane;
    pane.hidden = false;
    pane.replaceChildren();
    const title = document.createElement('h2');
    title.textContent = detail.title ?? `point ${detail.id}`;
    pane.append(title);
    if (detail.class_name) {
      const cls = document.createElement('p');
      cls.className = 'detail-class';
      cls.textContent = `${detail.class_name} (${(detail.confidence * 100).toFixed(1)}%)`;
      pane.append(cls);
    }
    if (detail.description) {
      const desc = document.createElement('p');
      desc.textContent = detail.description;
      pane.append(desc);
    }
    if (detail.labels.length > 0) {
      const labels = document.createElement('p');
      labels.className = 'detail-labels';
      labels.textContent = detail.labels.join(', ');
      pane.append(labels);
    }
    if (detail.media_url) {
      const audio = document.createElement('audio');
      audio.controls = true;
      audio.src = detail.media_url;
      pane.append(audio);
    }
    const gridTitle = document.createElement('h3');
    gridTitle.textContent = 'most similar';
    pane.append(gridTitle);
    const grid = document.createElement('div');
    grid.className = 'similar-grid';
    for (const neighbor of detail.neighbors) {
      grid.append(this.neighborCard(neighbor));
    }
    pane.append(grid);
  }

  private neighborCard(neighbor: SearchResult): HTMLElement {
    const card = document.createElement('button');
    card.className = 'similar-card';
    card.dataset.pointId = String(neighbor.id);
    const name = neighbor.title ?? `point ${neighbor.id}`;
    card.textContent = `${name} · ${(neighbor.similarity * 100).toFixed(0)}%`;
    card.style.borderColor = classColor(neighbor.class_index);
    card.addEventListener('click', () => {
      // clicking a neighbor re-centers the viewport on it and opens it
      this.viewport.centerOn(neighbor.x, neighbor.y);
      void this.selectPoint(neighbor.id);
    });
    return card;
  }

  private renderResultsGrid(results: SearchResult[]): void {
    this.dom.resultsGrid.replaceChildren(...results.map((r) => this.neighborCard(r)));
  }

  private setStatus(message: string): void {
    this.lastError = null;
    this.dom.statusLine.textContent = message;
  }

  private reportError(error: unknown): void {
    const message =
      error instanceof ApiError ? `${error.code}: ${error.message}` : String(error);
    this.lastError = message;
    this.dom.statusLine.textContent = message;
  }
}

function readFileBytes(file: File): Promise<ArrayBuffer> {
  if (typeof file.arrayBuffer === 'function') return file.arrayBuffer();
  // FileReader fallback for DOM implementations without Blob.arrayBuffer
  return new Promise((resolve, reject) => {
    const reader = new FileReader();
    reader.onload = () => resolve(reader.result as ArrayBuffer);
    reader.onerror = () => reject(reader.error);
    reader.readAsArrayBuffer(file);
  });
}

function bytesToBase64(bytes: Uint8Array): string {
  let binary = '';
  const chunk = 0x8000;
  for (let i = 0; i < bytes.length; i += chunk) {
    binary += String.fromCharCode(...bytes.subarray(i, i + chunk));
  }
  return btoa(binary);
}

/** Mark unassigned points for callers that care (palette treats both). */
export function isUnassigned(classIndex: number): boolean {
  return classIndex === UNASSIGNED_CLASS;
}
