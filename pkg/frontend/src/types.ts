/** Wire types for the atlas HTTP API. */

export type Extent = [number, number, number, number]; // min_x, min_y, max_x, max_y

export interface DatasetManifest {
  name: string;
  points: number;
  dim: number;
  extent: Extent;
  tile_budget: number;
  max_zoom: number;
  tiles_per_zoom: Record<string, number>;
  class_names: string[];
  class_set_version: number;
  default_classes: string[];
  media_url_template: string | null;
  max_upload_bytes: number;
  default_neighbors: number;
}

export interface SearchResult {
  id: number;
  similarity: number;
  x: number;
  y: number;
  class_index: number | null;
  class_name: string | null;
  title: string | null;
  description: string | null;
  labels: string[];
  media_url: string | null;
}

export interface PointDetail {
  id: number;
  x: number;
  y: number;
  class_index: number | null;
  class_name: string | null;
  title: string | null;
  description: string | null;
  labels: string[];
  media_url: string | null;
  confidence: number;
  neighbors: SearchResult[];
  class_set_version: number;
}

export interface LabelPlacement {
  class_index: number;
  name: string;
  x: number;
  y: number;
  count: number;
}

export interface LabelsResponse {
  labels: LabelPlacement[];
  total: number;
  offset: number;
  limit: number;
  class_set_version: number;
}

export interface SearchResponse {
  results: SearchResult[];
  k: number;
  class_set_version: number;
}

export interface TileKey {
  z: number;
  x: number;
  y: number;
}

/** Decoded columnar tile; ids are converted to numbers (safe below 2^53). */
export interface DecodedTile {
  key: TileKey;
  version: number;
  count: number;
  ids: Float64Array;
  xs: Float32Array;
  ys: Float32Array;
  classes: Uint16Array;
  ranks: Float32Array;
}

export const UNASSIGNED_CLASS = 0xffff;

export function tileKeyString(key: TileKey): string {
  return `${key.z}/${key.x}/${key.y}`;
}
