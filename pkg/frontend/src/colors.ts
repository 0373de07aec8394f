/** Categorical palette for class colors; unassigned points render gray. */

export const PALETTE = [
  '#4e79a7',
  '#f28e2b',
  '#e15759',
  '#76b7b2',
  '#59a14f',
  '#edc948',
  '#b07aa1',
  '#ff9da7',
  '#9c755f',
  '#bab0ac',
  '#86bcb6',
  '#d37295',
  '#a0cbe8',
  '#ffbe7d',
  '#8cd17d',
  '#f1ce63',
];

export const UNASSIGNED_COLOR = '#9aa0a6';
export const DIMMED_ALPHA = 0.15;

export function classColor(classIndex: number | null): string {
  if (classIndex === null || classIndex === 0xffff) return UNASSIGNED_COLOR;
  return PALETTE[classIndex % PALETTE.length]!;
}
