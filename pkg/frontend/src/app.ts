/** Application shell: wires the scatter and panels to the HTTP client.
 *
 * The app owns all fetched data (projection rows, model summary, member
 * z-scores, queue page) and hands plain values to the renderers. User
 * actions run through a serialized operation chain so tests — and fast
 * double clicks — get deterministic ordering; `flush()` awaits the chain.
 */

import {
  ApiError,
  newRequestId,
  TriageClient,
} from "./api.js";
import type {
  AuditEntry,
  FetchLike,
  MemberRow,
  ModelSummary,
  ProjectionRow,
  QueuePage,
  RefineOp,
  TriageItem,
  Verdict,
} from "./api.js";
import { ClusterPanel, ExpansionPanel, QueuePanel } from "./panels.js";
import { ScatterPlot } from "./scatter.js";
import { ViewState } from "./state.js";
import type { QueueFilter } from "./state.js";

export interface AppConfig {
  /** Service endpoint, e.g. "http://127.0.0.1:8000". */
  baseUrl: string;
  token?: string;
  fetchImpl?: FetchLike;
}

export class TriageApp {
  readonly client: TriageClient;
  readonly state = new ViewState();
  readonly scatter: ScatterPlot;
  readonly clusterPanel: ClusterPanel;
  readonly expansionPanel: ExpansionPanel;
  readonly queuePanel: QueuePanel;

  readonly status: HTMLElement;
  readonly datasetInput: HTMLInputElement;
  readonly modelSelect: HTMLSelectElement;

  // fetched state, straight from responses
  private summary: ModelSummary | null = null;
  private projectionRows: ProjectionRow[] = [];
  private queuePage: QueuePage | null = null;
  private serverSeeds: ReadonlySet<string> = new Set();
  private zById = new Map<string, number>();
  private topZ = new Map<number, MemberRow[]>();
  private medoids = new Map<number, string>();
  private queueItemsByCluster = new Map<number, TriageItem>();

  // review bookkeeping
  private auditByItem = new Map<string, AuditEntry[]>();
  private savingVerdicts = new Map<string, Verdict>();
  private itemErrors = new Map<string, string>();
  private openAudit = new Set<string>();
  private verdictRequestIds = new Map<string, string>();

  private opChain: Promise<void> = Promise.resolve();

  constructor(root: HTMLElement, config: AppConfig) {
    this.client = new TriageClient(config);

    const header = document.createElement("header");
    this.datasetInput = document.createElement("input");
    this.datasetInput.dataset.role = "dataset-input";
    this.datasetInput.placeholder = "dataset id";
    const openBtn = document.createElement("button");
    openBtn.dataset.role = "open-dataset";
    openBtn.textContent = "Open";
    openBtn.addEventListener("click", () => {
      const id = this.datasetInput.value.trim();
      if (id) this.track(() => this.openDataset(id));
    });
    this.modelSelect = document.createElement("select");
    this.modelSelect.dataset.role = "model-select";
    this.modelSelect.addEventListener("change", () => {
      const version = Number(this.modelSelect.value);
      this.track(() => this.useModelVersion(version));
    });
    const zoomIn = document.createElement("button");
    zoomIn.dataset.role = "zoom-in";
    zoomIn.textContent = "+";
    zoomIn.addEventListener("click", () => this.scatter.zoom(1.5));
    const zoomOut = document.createElement("button");
    zoomOut.dataset.role = "zoom-out";
    zoomOut.textContent = "−";
    zoomOut.addEventListener("click", () => this.scatter.zoom(1 / 1.5));
    this.status = document.createElement("span");
    this.status.dataset.role = "app-status";
    header.append(this.datasetInput, openBtn, this.modelSelect, zoomIn, zoomOut, this.status);

    const main = document.createElement("main");
    const scatterSection = document.createElement("section");
    scatterSection.dataset.role = "scatter-section";
    this.scatter = new ScatterPlot(scatterSection, {
      annotate: (row) => {
        const z = this.zById.get(row.sample_id);
        return [`z: ${z === undefined ? "—" : z.toFixed(3)}`];
      },
    });
    this.scatter.onLasso = (ids) => {
      this.state.selectSamples(ids);
      this.renderAll();
    };
    const legend = document.createElement("p");
    legend.dataset.role = "scatter-legend";
    legend.textContent = "colors = cluster assignment · red ring = confirmed fraud";
    scatterSection.append(legend);

    const aside = document.createElement("aside");
    const clusterRoot = document.createElement("section");
    clusterRoot.dataset.role = "cluster-panel";
    const expansionRoot = document.createElement("section");
    expansionRoot.dataset.role = "expansion-panel";
    const queueRoot = document.createElement("section");
    queueRoot.dataset.role = "queue-panel";
    aside.append(clusterRoot, expansionRoot, queueRoot);
    main.append(scatterSection, aside);
    root.append(header, main);

    this.clusterPanel = new ClusterPanel(clusterRoot, {
      onRefine: (ops) => this.track(() => this.runRefine(ops)),
      onToggleCluster: (clusterId) => {
        const picked = new Set(this.state.selectedClusters);
        if (picked.has(clusterId)) picked.delete(clusterId);
        else picked.add(clusterId);
        this.state.selectClusters(picked);
        this.renderAll();
      },
    });
    this.expansionPanel = new ExpansionPanel(expansionRoot, {
      onAddSeed: (sampleId) => {
        if (!this.state.addSeed(sampleId)) {
          this.setStatus(`unknown sample id ${sampleId}`);
        }
        this.renderAll();
      },
      onParams: (update) => {
        this.state.setExpansion({
          threshold: update.threshold ?? this.state.expansion.threshold,
          maxHops: update.maxHops ?? this.state.expansion.maxHops,
        });
        this.renderAll();
      },
      onExpand: () => this.track(() => this.runExpand()),
      onConfirmCandidate: (sampleId) => {
        this.state.addSeed(sampleId);
        this.renderAll();
      },
    });
    this.queuePanel = new QueuePanel(queueRoot, {
      onVerdict: (item, verdict, reviewer) =>
        this.track(() => this.submitVerdict(item, verdict, reviewer)),
      onFilter: (filter: QueueFilter) => {
        this.state.setQueueFilter(filter);
        this.renderAll();
      },
      onToggleAudit: (itemId) => {
        if (this.openAudit.has(itemId)) this.openAudit.delete(itemId);
        else this.openAudit.add(itemId);
        this.renderAll();
      },
    });

    this.renderAll();
  }

  /** Serialize an operation behind every previously queued one. */
  track(op: () => Promise<void>): Promise<void> {
    const next = this.opChain.then(op, op);
    this.opChain = next.catch(() => undefined);
    return next.catch(() => undefined);
  }

  /** Resolves when all queued operations have settled. */
  flush(): Promise<void> {
    return this.opChain;
  }

  setStatus(message: string): void {
    this.status.textContent = message;
  }

  // -- data loading ------------------------------------------------------------

  async openDataset(datasetId: string): Promise<void> {
    this.setStatus(`loading ${datasetId}…`);
    const detail = await this.client.getDataset(datasetId);
    this.state.setDataset(detail, []);
    this.datasetInput.value = datasetId;
    this.summary = null;
    this.projectionRows = [];
    this.queuePage = null;
    this.serverSeeds = new Set();
    this.zById.clear();
    this.topZ.clear();
    this.medoids.clear();
    this.queueItemsByCluster.clear();
    this.auditByItem.clear();
    this.savingVerdicts.clear();
    this.itemErrors.clear();
    this.openAudit.clear();
    this.verdictRequestIds.clear();
    await this.refreshAnalytics();
    await this.refreshQueue();
    this.setStatus(`${detail.dataset_id}: ${detail.count} samples, dim ${detail.dimension}`);
    this.renderAll();
  }

  private async useModelVersion(version: number): Promise<void> {
    this.state.setModelVersion(version);
    await this.refreshAnalytics();
    this.renderAll();
  }

  /** Re-fetch everything that depends on the active model version. */
  private async refreshAnalytics(): Promise<void> {
    const dataset = this.state.dataset;
    if (!dataset) return;
    const id = dataset.dataset_id;
    const model = this.state.modelVersion ?? undefined;

    this.summary = await this.swallow404(() => this.client.clusterSummary(id, model));

    const projection = await this.swallow404(() =>
      this.client.projection(id, { modelVersion: model }));
    this.projectionRows = projection ? projection.rows : [];

    this.zById.clear();
    this.topZ.clear();
    this.medoids.clear();
    if (this.summary) {
      for (const cluster of this.summary.clusters) {
        const page = await this.client.clusterMembers(id, cluster.cluster_id,
                                                      { sort: "z", modelVersion: model });
        this.topZ.set(cluster.cluster_id, page.items.slice(0, 3));
        let medoid: MemberRow | null = null;
        for (const member of page.items) {
          this.zById.set(member.sample_id, member.z);
          if (!medoid || member.centroid_distance < medoid.centroid_distance) {
            medoid = member;
          }
        }
        if (medoid) this.medoids.set(cluster.cluster_id, medoid.sample_id);
      }
    }

    const ids = new Set(this.projectionRows.map((row) => row.sample_id));
    for (const sampleId of this.zById.keys()) ids.add(sampleId);
    this.state.setSnapshotIds(ids);
  }

  private async refreshQueue(): Promise<void> {
    const dataset = this.state.dataset;
    if (!dataset) return;
    this.queuePage = await this.swallow404(() => this.client.queue(dataset.dataset_id));
    this.queueItemsByCluster.clear();
    if (this.queuePage) {
      this.serverSeeds = new Set(this.queuePage.seeds);
      for (const item of this.queuePage.items) {
        if (item.kind === "cluster") {
          this.queueItemsByCluster.set(Number(item.target_id), item);
          // the service's cluster representative list is medoid-first
          if (item.representatives.length) {
            this.medoids.set(Number(item.target_id), item.representatives[0]);
          }
        }
      }
    }
  }

  private async swallow404<T>(call: () => Promise<T>): Promise<T | null> {
    try {
      return await call();
    } catch (err) {
      if (err instanceof ApiError && err.status === 404) return null;
      throw err;
    }
  }

  // -- user actions -------------------------------------------------------------

  private async runRefine(ops: RefineOp[]): Promise<void> {
    const dataset = this.state.dataset;
    if (!dataset || !this.summary) return;
    try {
      const result = await this.client.refine(dataset.dataset_id, ops, {
        modelVersion: this.summary.version,
        requestId: newRequestId(),
      });
      const detail = await this.client.getDataset(dataset.dataset_id);
      this.state.dataset = detail;
      this.state.setModelVersion(result.model_version);
      await this.refreshAnalytics();
      this.setStatus(`refined: model v${result.base_version} → v${result.model_version}`);
    } catch (err) {
      this.setStatus(`refine failed: ${describe(err)}`);
    }
    this.renderAll();
  }

  private async runExpand(): Promise<void> {
    const dataset = this.state.dataset;
    if (!dataset) return;
    const { seeds, threshold, maxHops } = this.state.expansion;
    try {
      const result = await this.client.expand(dataset.dataset_id, {
        seeds: seeds.length ? seeds : undefined,
        threshold,
        maxHops,
        requestId: newRequestId(),
      });
      this.state.setExpansion({
        candidates: result.candidates,
        lastParams: result.params,
        seeds: result.seeds,
      });
      this.setStatus(`expansion: ${result.candidates.length} candidates`);
    } catch (err) {
      this.setStatus(`expansion failed: ${describe(err)}`);
    }
    this.renderAll();
  }

  private async submitVerdict(item: TriageItem, verdict: Verdict,
                              reviewer: string): Promise<void> {
    const dataset = this.state.dataset;
    if (!dataset) return;
    if (!reviewer) {
      this.itemErrors.set(item.item_id, "reviewer is required");
      this.renderAll();
      return;
    }
    // one request id per (item, verdict): a double click resubmits the same
    // request and the service replays the original response
    const key = `${item.item_id}|${verdict}`;
    let requestId = this.verdictRequestIds.get(key);
    if (!requestId) {
      requestId = newRequestId();
      this.verdictRequestIds.set(key, requestId);
    }
    this.itemErrors.delete(item.item_id);
    this.savingVerdicts.set(item.item_id, verdict);
    this.renderAll(); // optimistic: the row shows the verdict immediately
    try {
      const result = await this.client.recordVerdict({
        datasetId: dataset.dataset_id,
        itemId: item.item_id,
        verdict,
        reviewer,
        requestId,
      });
      this.recordAudit(result.audit_entry);
      this.serverSeeds = new Set(result.seeds);
      this.setStatus(`${item.item_id}: ${result.item.review_state}`);
    } catch (err) {
      if (err instanceof ApiError && err.code === "already_reviewed") {
        this.itemErrors.set(item.item_id, `conflict: ${err.message}`);
      } else {
        this.itemErrors.set(item.item_id, describe(err));
      }
    } finally {
      this.savingVerdicts.delete(item.item_id);
    }
    await this.refreshQueue(); // reconcile with what the service recorded
    this.renderAll();
  }

  private recordAudit(entry: AuditEntry): void {
    const entries = this.auditByItem.get(entry.item_id) ?? [];
    if (!entries.some((known) => known.seq === entry.seq)) {
      entries.push(entry);
      entries.sort((a, b) => a.seq - b.seq);
    }
    this.auditByItem.set(entry.item_id, entries);
  }

  auditEntries(itemId: string): AuditEntry[] {
    return [...(this.auditByItem.get(itemId) ?? [])];
  }

  // -- rendering ----------------------------------------------------------------

  renderAll(): void {
    this.modelSelect.replaceChildren();
    for (const version of this.state.dataset?.model_versions ?? []) {
      const opt = document.createElement("option");
      opt.value = String(version);
      opt.textContent = `model v${version}`;
      this.modelSelect.append(opt);
    }
    if (this.state.modelVersion !== null) {
      this.modelSelect.value = String(this.state.modelVersion);
    }

    this.scatter.setData(this.projectionRows, this.serverSeeds);
    this.scatter.setHighlight(this.state.selectedSamples);

    this.clusterPanel.render({
      summary: this.summary,
      selectedClusters: this.state.selectedClusters,
      selectedSamples: this.state.selectedSamples,
      queueItems: this.queueItemsByCluster,
      topZ: this.topZ,
      medoids: this.medoids,
    });
    this.expansionPanel.render(this.state.expansion);
    this.queuePanel.render({
      page: this.queuePage,
      filter: this.state.queueFilter,
      seeds: this.serverSeeds,
      audit: this.auditByItem,
      saving: this.savingVerdicts,
      errors: this.itemErrors,
      openAudit: this.openAudit,
    });
  }
}

function describe(err: unknown): string {
  if (err instanceof ApiError) return `${err.code}: ${err.message}`;
  return err instanceof Error ? err.message : String(err);
}

export function createApp(root: HTMLElement, config: AppConfig): TriageApp {
  return new TriageApp(root, config);
}
