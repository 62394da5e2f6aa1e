/** Side panels: cluster inspection, seed expansion, and the review queue.
 *
 * Panels are plain renderers — they rebuild their DOM from data the app
 * fetched and forward clicks to app callbacks. Every figure shown (sizes,
 * means, z-scores, priorities, scores) is a value the service returned.
 */

import type {
  AuditEntry,
  ExpansionCandidate,
  MemberRow,
  ModelSummary,
  QueuePage,
  RefineOp,
  TriageItem,
  Verdict,
} from "./api.js";
import type { ExpansionState, QueueFilter } from "./state.js";

function el<K extends keyof HTMLElementTagNameMap>(
    tag: K, role?: string, text?: string): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (role) node.dataset.role = role;
  if (text !== undefined) node.textContent = text;
  return node;
}

function fmt(value: number | null | undefined, digits = 4): string {
  if (value === null || value === undefined) return "—";
  return Number(value).toFixed(digits);
}

// -- cluster panel -------------------------------------------------------------

export interface ClusterPanelData {
  summary: ModelSummary | null;
  selectedClusters: ReadonlySet<number>;
  selectedSamples: ReadonlySet<string>;
  /** Queue item per cluster id, when the queue flagged it. */
  queueItems: ReadonlyMap<number, TriageItem>;
  /** Top members by z per cluster, as served by the members endpoint. */
  topZ: ReadonlyMap<number, MemberRow[]>;
  /** The medoid per cluster id, as served in queue representatives. */
  medoids: ReadonlyMap<number, string>;
}

export interface ClusterPanelHandlers {
  onRefine(ops: RefineOp[]): void;
  onToggleCluster(clusterId: number): void;
}

export class ClusterPanel {
  private readonly body: HTMLElement;
  private readonly zMaxInput: HTMLInputElement;
  private readonly trimInput: HTMLInputElement;

  constructor(private readonly root: HTMLElement,
              private readonly handlers: ClusterPanelHandlers) {
    root.append(el("h2", undefined, "Clusters"));

    const actions = el("div", "cluster-actions");
    this.zMaxInput = el("input", "zmax-input");
    this.zMaxInput.type = "number";
    this.zMaxInput.step = "0.1";
    this.zMaxInput.value = "4";
    const removeBtn = el("button", "remove-outliers", "Remove outliers above z");
    removeBtn.addEventListener("click", () => {
      handlers.onRefine([{ op: "remove_outliers", z_max: Number(this.zMaxInput.value) }]);
    });
    this.trimInput = el("input", "trim-input");
    this.trimInput.type = "number";
    this.trimInput.step = "1";
    this.trimInput.value = "100";
    const trimBtn = el("button", "trim-button", "Trim to percentile");
    trimBtn.addEventListener("click", () => {
      handlers.onRefine([{ op: "trim", percentile: Number(this.trimInput.value) }]);
    });
    const mergeBtn = el("button", "merge-button", "Merge selected pair");
    mergeBtn.addEventListener("click", () => {
      const picked = [...this.lastSelected].sort((a, b) => a - b);
      if (picked.length === 2) {
        handlers.onRefine([{ op: "merge", a: picked[0], b: picked[1] }]);
      }
    });
    actions.append(this.zMaxInput, removeBtn, this.trimInput, trimBtn, mergeBtn);
    root.append(actions);

    this.body = el("div", "cluster-body");
    root.append(this.body);
  }

  private lastSelected: ReadonlySet<number> = new Set();

  render(data: ClusterPanelData): void {
    this.lastSelected = data.selectedClusters;
    this.body.replaceChildren();

    const sel = el("p", "selection-info");
    sel.textContent = data.selectedSamples.size
      ? `${data.selectedSamples.size} samples selected`
      : "no samples selected";
    this.body.append(sel);

    if (!data.summary) {
      this.body.append(el("p", "cluster-empty", "No cluster model yet — run a k-means job."));
      return;
    }

    const meta = el("p", "model-info");
    meta.textContent = `model v${data.summary.version} · metric ${data.summary.metric}`
      + ` · k=${data.summary.k} · inertia ${fmt(data.summary.inertia)}`;
    this.body.append(meta);

    for (const cluster of data.summary.clusters) {
      const row = el("div", "cluster-row");
      row.dataset.clusterId = String(cluster.cluster_id);
      if (data.selectedClusters.has(cluster.cluster_id)) row.classList.add("selected");

      const head = el("button", "cluster-toggle",
                      `cluster ${cluster.cluster_id} · size ${cluster.size}`);
      head.addEventListener("click", () => this.handlers.onToggleCluster(cluster.cluster_id));
      row.append(head);

      const stats = el("span", "cluster-stats");
      stats.textContent = ` μ ${fmt(cluster.mean_distance)} σ ${fmt(cluster.std_distance)}`;
      row.append(stats);

      const medoid = data.medoids.get(cluster.cluster_id);
      row.append(el("span", "cluster-medoid", medoid ? ` medoid ${medoid}` : " medoid —"));

      const reps = data.topZ.get(cluster.cluster_id) ?? [];
      if (reps.length) {
        const list = el("span", "cluster-topz",
                        " top-z " + reps.map((m) => `${m.sample_id} (${fmt(m.z, 2)})`).join(", "));
        row.append(list);
      }

      const flagged = data.queueItems.get(cluster.cluster_id);
      if (flagged) row.append(el("span", "cluster-flag", " ⚑ in review queue"));

      const splitBtn = el("button", "cluster-split", "Split");
      splitBtn.addEventListener("click", () => {
        this.handlers.onRefine([{ op: "split", cluster_id: cluster.cluster_id }]);
      });
      row.append(splitBtn);

      this.body.append(row);
    }
  }
}

// -- seed expansion panel --------------------------------------------------------

export interface ExpansionPanelHandlers {
  onAddSeed(sampleId: string): void;
  onParams(update: { threshold?: number; maxHops?: number }): void;
  onExpand(): void;
  onConfirmCandidate(sampleId: string): void;
}

export class ExpansionPanel {
  private readonly seedList: HTMLElement;
  private readonly candidateList: HTMLOListElement;
  private readonly note: HTMLElement;
  private readonly reexpand: HTMLButtonElement;
  readonly thresholdInput: HTMLInputElement;
  readonly hopsInput: HTMLInputElement;

  constructor(root: HTMLElement, private readonly handlers: ExpansionPanelHandlers) {
    root.append(el("h2", undefined, "Seed expansion"));

    const seedForm = el("div", "seed-form");
    const seedInput = el("input", "seed-input");
    seedInput.placeholder = "sample id";
    const addBtn = el("button", "add-seed", "Add seed");
    addBtn.addEventListener("click", () => {
      const value = seedInput.value.trim();
      if (value) handlers.onAddSeed(value);
      seedInput.value = "";
    });
    seedForm.append(seedInput, addBtn);
    root.append(seedForm);

    this.seedList = el("div", "seed-list");
    root.append(this.seedList);

    const params = el("div", "expansion-params");
    this.thresholdInput = el("input", "threshold-input");
    this.thresholdInput.type = "number";
    this.thresholdInput.step = "0.01";
    this.thresholdInput.addEventListener("change", () => {
      handlers.onParams({ threshold: Number(this.thresholdInput.value) });
    });
    this.hopsInput = el("input", "hops-input");
    this.hopsInput.type = "number";
    this.hopsInput.step = "1";
    this.hopsInput.addEventListener("change", () => {
      handlers.onParams({ maxHops: Number(this.hopsInput.value) });
    });
    const expandBtn = el("button", "expand-button", "Expand");
    expandBtn.addEventListener("click", () => handlers.onExpand());
    this.reexpand = el("button", "reexpand-button", "Re-expand");
    this.reexpand.style.display = "none";
    this.reexpand.addEventListener("click", () => handlers.onExpand());
    params.append("threshold", this.thresholdInput, "max hops", this.hopsInput,
                  expandBtn, this.reexpand);
    root.append(params);

    this.note = el("p", "expansion-note");
    root.append(this.note);

    this.candidateList = el("ol", "candidate-list");
    root.append(this.candidateList);
  }

  render(expansion: ExpansionState): void {
    this.thresholdInput.value = String(expansion.threshold);
    this.hopsInput.value = String(expansion.maxHops);

    this.seedList.replaceChildren();
    for (const seed of expansion.seeds) {
      this.seedList.append(el("span", "seed-chip", seed));
    }

    this.reexpand.style.display = expansion.lastParams ? "" : "none";
    this.reexpand.textContent = `Re-expand (${expansion.seeds.length} seeds)`;

    if (!expansion.lastParams) {
      this.note.textContent = expansion.seeds.length
        ? "Ready — run an expansion."
        : "Add a confirmed sample id to start.";
    } else if (!expansion.candidates.length) {
      this.note.textContent =
        "No candidates: the seeds have no similar enough neighbors at this threshold.";
    } else {
      this.note.textContent =
        `${expansion.candidates.length} candidates, ranked by similarity.`;
    }

    this.candidateList.replaceChildren();
    for (const candidate of expansion.candidates) {
      this.candidateList.append(this.candidateRow(candidate, expansion.seeds));
    }
  }

  private candidateRow(candidate: ExpansionCandidate, seeds: string[]): HTMLLIElement {
    const row = el("li", "candidate-row");
    row.dataset.sampleId = candidate.sample_id;
    row.append(el("span", "candidate-id", candidate.sample_id));
    row.append(el("span", "candidate-score", ` score ${fmt(candidate.score)}`));
    row.append(el("span", "candidate-hops", ` hops ${candidate.hops}`));
    const confirm = el("button", "candidate-confirm", "Confirm");
    if (seeds.includes(candidate.sample_id)) {
      confirm.disabled = true;
      confirm.textContent = "Seed";
    }
    confirm.addEventListener("click", () => {
      this.handlers.onConfirmCandidate(candidate.sample_id);
    });
    row.append(confirm);
    return row;
  }
}

// -- review queue panel ----------------------------------------------------------

export interface QueuePanelData {
  page: QueuePage | null;
  filter: QueueFilter;
  /** Server-confirmed fraud seeds; members in this set get a badge. */
  seeds: ReadonlySet<string>;
  /** Audit entries received this session, grouped by item. */
  audit: ReadonlyMap<string, AuditEntry[]>;
  /** Items with an in-flight optimistic verdict. */
  saving: ReadonlyMap<string, Verdict>;
  /** Inline per-item errors (validation, AlreadyReviewed conflicts). */
  errors: ReadonlyMap<string, string>;
  openAudit: ReadonlySet<string>;
}

export interface QueuePanelHandlers {
  onVerdict(item: TriageItem, verdict: Verdict, reviewer: string): void;
  onFilter(filter: QueueFilter): void;
  onToggleAudit(itemId: string): void;
}

const VERDICT_BUTTONS: Array<[Verdict, string, string]> = [
  ["confirmed_fraud", "verdict-fraud", "Confirm fraud"],
  ["confirmed_genuine", "verdict-genuine", "Genuine"],
  ["skipped", "verdict-skip", "Skip"],
];

export class QueuePanel {
  readonly reviewerInput: HTMLInputElement;
  private readonly filterSelect: HTMLSelectElement;
  private readonly meta: HTMLElement;
  private readonly list: HTMLElement;

  constructor(root: HTMLElement, private readonly handlers: QueuePanelHandlers) {
    root.append(el("h2", undefined, "Review queue"));

    const controls = el("div", "queue-controls");
    this.reviewerInput = el("input", "reviewer-input");
    this.reviewerInput.placeholder = "reviewer (required)";
    this.filterSelect = el("select", "queue-filter");
    for (const value of ["all", "pending", "reviewed"] as QueueFilter[]) {
      const opt = document.createElement("option");
      opt.value = value;
      opt.textContent = value;
      this.filterSelect.append(opt);
    }
    this.filterSelect.addEventListener("change", () => {
      this.handlers.onFilter(this.filterSelect.value as QueueFilter);
    });
    controls.append(this.reviewerInput, this.filterSelect);
    root.append(controls);

    this.meta = el("p", "queue-meta");
    root.append(this.meta);
    this.list = el("div", "queue-list");
    root.append(this.list);
  }

  render(data: QueuePanelData): void {
    this.filterSelect.value = data.filter;
    this.list.replaceChildren();
    if (!data.page) {
      this.meta.textContent = "No queue yet — the queue appears once a cluster model exists.";
      return;
    }
    this.meta.textContent = `${data.page.total} items · ${data.page.seeds.length} confirmed seeds`
      + ` · audit length ${data.page.audit_length}`;

    for (const item of data.page.items) {
      const reviewed = item.review_state !== "pending";
      if (data.filter === "pending" && reviewed) continue;
      if (data.filter === "reviewed" && !reviewed) continue;
      this.list.append(this.itemRow(item, data));
    }
  }

  private itemRow(item: TriageItem, data: QueuePanelData): HTMLElement {
    const row = el("article", "queue-item");
    row.dataset.itemId = item.item_id;
    row.dataset.reviewState = item.review_state;

    const title = el("strong", "item-title",
                     `${item.item_id} · ${item.provenance} · priority ${fmt(item.priority, 3)}`);
    row.append(title);

    const saving = data.saving.get(item.item_id);
    const badge = el("span", "item-state");
    badge.textContent = saving
      ? ` saving ${saving}…`
      : item.review_state === "pending"
        ? " pending"
        : ` ${item.review_state} by ${item.reviewer ?? "?"}`;
    row.append(badge);

    if (item.representatives.length) {
      row.append(el("span", "item-reps",
                    ` reps: ${item.representatives.join(", ")}`));
    }

    if (item.kind === "cluster") {
      const members = el("div", "item-members");
      members.append(el("span", undefined, `${item.members.length} members: `));
      for (const member of item.members) {
        const chip = el("span", "member-chip", member);
        chip.dataset.sampleId = member;
        if (data.seeds.has(member)) chip.classList.add("seed");
        members.append(chip);
      }
      row.append(members);
    }

    const actions = el("div", "item-actions");
    for (const [verdict, role, label] of VERDICT_BUTTONS) {
      const btn = el("button", role, label);
      btn.disabled = item.review_state !== "pending" && !data.saving.has(item.item_id);
      btn.addEventListener("click", () => {
        this.handlers.onVerdict(item, verdict, this.reviewerInput.value.trim());
      });
      actions.append(btn);
    }
    const entries = data.audit.get(item.item_id) ?? [];
    const auditBtn = el("button", "audit-toggle", `audit (${entries.length})`);
    auditBtn.addEventListener("click", () => this.handlers.onToggleAudit(item.item_id));
    actions.append(auditBtn);
    row.append(actions);

    const error = data.errors.get(item.item_id);
    if (error) row.append(el("p", "item-error", error));

    if (data.openAudit.has(item.item_id)) {
      const log = el("ul", "audit-log");
      for (const entry of entries) {
        log.append(el("li", "audit-entry",
                      `#${entry.seq} ${entry.verdict} by ${entry.reviewer}`
                      + ` · ${entry.samples.length} samples`));
      }
      if (!entries.length) log.append(el("li", "audit-entry", "no entries this session"));
      row.append(log);
    }

    return row;
  }
}
