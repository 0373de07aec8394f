/** HTTP client for the atlas API, including the binary tile decoder. */

import type {
  DatasetManifest,
  DecodedTile,
  LabelsResponse,
  PointDetail,
  SearchResponse,
  TileKey,
} from './types';

const TILE_MAGIC = 0x4c544141; // "AATL" little-endian
const TILE_HEADER_BYTES = 18;

export class ApiError extends Error {
  constructor(
    public status: number,
    public code: string,
    message: string,
  ) {
    super(message);
  }
}

async function throwApiError(response: Response): Promise<never> {
  let code = 'http_error';
  let message = `HTTP ${response.status}`;
  try {
    const body = (await response.json()) as { error?: { code?: string; message?: string } };
    if (body.error) {
      code = body.error.code ?? code;
      message = body.error.message ?? message;
    }
  } catch {
    // non-JSON error body; keep defaults
  }
  throw new ApiError(response.status, code, message);
}

export function decodeTile(buffer: ArrayBuffer, version: number): DecodedTile {
  if (buffer.byteLength < TILE_HEADER_BYTES) {
    throw new Error('truncated tile header');
  }
  const view = new DataView(buffer);
  if (view.getUint32(0, true) !== TILE_MAGIC) {
    throw new Error('bad tile magic');
  }
  if (view.getUint8(4) !== 1) {
    throw new Error(`unsupported tile version ${view.getUint8(4)}`);
  }
  const z = view.getUint8(5);
  const x = view.getUint32(6, true);
  const y = view.getUint32(10, true);
  const count = view.getUint32(14, true);
  const expected = TILE_HEADER_BYTES + count * (8 + 4 + 4 + 2 + 4);
  if (buffer.byteLength !== expected) {
    throw new Error(`tile length ${buffer.byteLength} != expected ${expected}`);
  }
  // columns are packed without padding, so copy each into an aligned buffer
  let offset = TILE_HEADER_BYTES;
  const idsRaw = new BigUint64Array(buffer.slice(offset, offset + count * 8));
  offset += count * 8;
  const xs = new Float32Array(buffer.slice(offset, offset + count * 4));
  offset += count * 4;
  const ys = new Float32Array(buffer.slice(offset, offset + count * 4));
  offset += count * 4;
  const classes = new Uint16Array(buffer.slice(offset, offset + count * 2));
  offset += count * 2;
  const ranks = new Float32Array(buffer.slice(offset, offset + count * 4));
  const ids = new Float64Array(count);
  for (let i = 0; i < count; i++) {
    ids[i] = Number(idsRaw[i]);
  }
  return { key: { z, x, y }, version, count, ids, xs, ys, classes, ranks };
}

export class ApiClient {
  constructor(private baseUrl: string = '') {}

  private async getJson<T>(path: string): Promise<T> {
    const response = await fetch(`${this.baseUrl}${path}`);
    if (!response.ok) await throwApiError(response);
    return (await response.json()) as T;
  }

  private async postJson<T>(path: string, body: unknown): Promise<T> {
    const response = await fetch(`${this.baseUrl}${path}`, {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify(body),
    });
    if (!response.ok) await throwApiError(response);
    return (await response.json()) as T;
  }

  manifest(dataset: string): Promise<DatasetManifest> {
    return this.getJson(`/api/datasets/${dataset}/manifest`);
  }

  labels(dataset: string): Promise<LabelsResponse> {
    return this.getJson(`/api/datasets/${dataset}/labels`);
  }

  point(dataset: string, id: number, k?: number): Promise<PointDetail> {
    const query = k === undefined ? '' : `?k=${k}`;
    return this.getJson(`/api/datasets/${dataset}/points/${id}${query}`);
  }

  searchText(dataset: string, text: string, k: number): Promise<SearchResponse> {
    return this.postJson(`/api/datasets/${dataset}/search`, { text, k });
  }

  searchAudio(
    dataset: string,
    base64: string,
    format: string,
    k: number,
  ): Promise<SearchResponse> {
    return this.postJson(`/api/datasets/${dataset}/search`, {
      audio_base64: base64,
      audio_format: format,
      k,
    });
  }

  classify(dataset: string, classNames: string[]): Promise<{ class_set_version: number }> {
    return this.postJson(`/api/datasets/${dataset}/classify`, { class_names: classNames });
  }

  async tile(dataset: string, key: TileKey): Promise<DecodedTile> {
    const response = await fetch(
      `${this.baseUrl}/api/datasets/${dataset}/tiles/${key.z}/${key.x}/${key.y}`,
    );
    if (!response.ok) await throwApiError(response);
    const version = Number(response.headers.get('X-Class-Version') ?? '0');
    return decodeTile(await response.arrayBuffer(), version);
  }
}
