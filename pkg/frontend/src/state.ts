/** Client-side view state.
 *
 * The store only mirrors what the service said plus the investigator's own
 * selections; analytics state changes exclusively through service calls.
 * Selections are clamped to ids that exist in the active snapshot, so a
 * stale lasso or a mistyped seed can never reference unknown samples.
 */

import type { DatasetDetail, ExpansionCandidate } from "./api.js";

export type QueueFilter = "all" | "pending" | "reviewed";

export interface ExpansionState {
  seeds: string[];
  threshold: number;
  maxHops: number;
  candidates: ExpansionCandidate[];
  /** Params echoed by the last expansion response; null before the first run. */
  lastParams: Record<string, unknown> | null;
}

const DEFAULT_EXPANSION: ExpansionState = {
  seeds: [],
  threshold: 0.9,
  maxHops: 3,
  candidates: [],
  lastParams: null,
};

export class ViewState {
  dataset: DatasetDetail | null = null;
  snapshotIds: ReadonlySet<string> = new Set();
  modelVersion: number | null = null;
  selectedSamples: ReadonlySet<string> = new Set();
  selectedClusters: ReadonlySet<number> = new Set();
  expansion: ExpansionState = { ...DEFAULT_EXPANSION };
  queueFilter: QueueFilter = "all";

  private listeners = new Set<() => void>();

  subscribe(listener: () => void): () => void {
    this.listeners.add(listener);
    return () => this.listeners.delete(listener);
  }

  private emit(): void {
    for (const listener of this.listeners) listener();
  }

  /** Switch datasets: selections and expansion state reset with the snapshot. */
  setDataset(detail: DatasetDetail | null, snapshotIds: Iterable<string>): void {
    this.dataset = detail;
    this.snapshotIds = new Set(snapshotIds);
    this.modelVersion = detail && detail.model_versions.length
      ? detail.model_versions[detail.model_versions.length - 1]
      : null;
    this.selectedSamples = new Set();
    this.selectedClusters = new Set();
    this.expansion = { ...DEFAULT_EXPANSION };
    this.emit();
  }

  /** Refresh the snapshot id universe (e.g. once the projection arrives). */
  setSnapshotIds(ids: Iterable<string>): void {
    this.snapshotIds = new Set(ids);
    this.selectedSamples = new Set(
      [...this.selectedSamples].filter((id) => this.snapshotIds.has(id)));
    this.expansion = {
      ...this.expansion,
      seeds: this.expansion.seeds.filter((id) => this.snapshotIds.has(id)),
    };
    this.emit();
  }

  setModelVersion(version: number | null): void {
    this.modelVersion = version;
    this.emit();
  }

  selectSamples(ids: Iterable<string>): void {
    this.selectedSamples = new Set(
      [...ids].filter((id) => this.snapshotIds.has(id)));
    this.emit();
  }

  selectClusters(ids: Iterable<number>): void {
    this.selectedClusters = new Set(ids);
    this.emit();
  }

  clearSelection(): void {
    this.selectedSamples = new Set();
    this.selectedClusters = new Set();
    this.emit();
  }

  setExpansion(update: Partial<ExpansionState>): void {
    this.expansion = { ...this.expansion, ...update };
    if (update.seeds) {
      this.expansion.seeds = update.seeds.filter((id) => this.snapshotIds.has(id));
    }
    this.emit();
  }

  /** Add one confirmed seed; unknown ids are ignored. Returns whether added. */
  addSeed(sampleId: string): boolean {
    if (!this.snapshotIds.has(sampleId)) return false;
    if (this.expansion.seeds.includes(sampleId)) return false;
    this.expansion = {
      ...this.expansion,
      seeds: [...this.expansion.seeds, sampleId],
    };
    this.emit();
    return true;
  }

  setQueueFilter(filter: QueueFilter): void {
    this.queueFilter = filter;
    this.emit();
  }
}
