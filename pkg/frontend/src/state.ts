/** Selection and highlight state with change notification. */

import type { SearchResult } from './types';

export interface SelectionState {
  selectedId: number | null;
  highlightedClass: number | null;
  searchResults: SearchResult[] | null;
}

type Listener = (state: SelectionState) => void;

export class Store {
  private state: SelectionState = {
    selectedId: null,
    highlightedClass: null,
    searchResults: null,
  };
  private listeners: Listener[] = [];

  get(): SelectionState {
    return this.state;
  }

  set(partial: Partial<SelectionState>): void {
    this.state = { ...this.state, ...partial };
    for (const listener of this.listeners) listener(this.state);
  }

  subscribe(listener: Listener): () => void {
    this.listeners.push(listener);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== listener);
    };
  }

  toggleHighlight(classIndex: number): void {
    this.set({
      highlightedClass: this.state.highlightedClass === classIndex ? null : classIndex,
    });
  }
}
