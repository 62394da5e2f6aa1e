/** Typed client for the triage service HTTP API.
 *
 * Every number the UI displays comes out of these response shapes; the
 * client never post-processes beyond JSON parsing, so the service stays the
 * single source of truth.
 */

export interface FetchResponseLike {
  ok: boolean;
  status: number;
  statusText: string;
  text(): Promise<string>;
}

export interface FetchInitLike {
  method?: string;
  headers?: Record<string, string>;
  body?: string;
}

/** Structural subset of fetch, so tests can swap in a plain node transport. */
export type FetchLike = (url: string, init?: FetchInitLike) => Promise<FetchResponseLike>;

export interface ClientConfig {
  /** Service origin, e.g. "http://127.0.0.1:8000". */
  baseUrl: string;
  /** Bearer token; omit when the service runs without auth. */
  token?: string;
  /** Transport override; defaults to the global fetch. */
  fetchImpl?: FetchLike;
}

export interface ErrorBody {
  code: string;
  message: string;
  detail: unknown;
}

export class ApiError extends Error {
  readonly status: number;
  readonly code: string;
  readonly detail: unknown;

  constructor(status: number, body: ErrorBody) {
    super(body.message);
    this.name = "ApiError";
    this.status = status;
    this.code = body.code;
    this.detail = body.detail;
  }
}

// -- response shapes ---------------------------------------------------------

export interface DatasetSummary {
  dataset_id: string;
  snapshot_version: number;
  count: number;
  dimension: number;
  provenance: string;
}

export interface DatasetDetail extends DatasetSummary {
  model_versions: number[];
  projection_jobs: string[];
  has_queue: boolean;
}

export interface ImportRecord {
  id: string;
  vec: number[];
  label?: string;
  split?: string;
  meta?: Record<string, unknown>;
}

export type JobKind = "kmeans" | "tsne" | "train" | "metrics";
export type JobState = "queued" | "running" | "done" | "failed" | "canceled";

export interface JobInfo {
  job_id: string;
  dataset_id: string;
  kind: JobKind;
  params: Record<string, unknown>;
  state: JobState;
  progress: number;
  result: Record<string, unknown> | null;
  error: string | null;
}

export interface ClusterStats {
  cluster_id: number;
  size: number;
  mean_distance: number;
  std_distance: number;
}

export interface ModelSummary {
  dataset_id: string;
  snapshot_version: number;
  metric: string;
  k: number;
  version: number;
  inertia: number;
  noise: string[];
  clusters: ClusterStats[];
  ops_log: Array<Record<string, unknown>>;
  params: Record<string, unknown>;
}

export interface MemberRow {
  sample_id: string;
  z: number;
  centroid_distance: number;
  label: string | null;
}

export interface Page<T> {
  total: number;
  offset: number;
  limit: number | null;
  items: T[];
}

export type RefineOp =
  | { op: "split"; cluster_id: number }
  | { op: "merge"; a: number; b: number }
  | { op: "remove_outliers"; z_max: number }
  | { op: "trim"; percentile: number };

export interface RefineResult {
  model_version: number;
  base_version: number;
  k: number;
  ops_log: Array<Record<string, unknown>>;
}

export interface ProjectionRow {
  sample_id: string;
  x: number;
  y: number;
  label: string | null;
  cluster_id: number | null;
}

export interface Projection {
  job: string;
  kl_divergence: number;
  params: Record<string, unknown>;
  rows: ProjectionRow[];
}

export interface AnomalyRow {
  sample_id: string;
  z: number;
  cluster_id: number;
  centroid_distance: number;
}

export interface AnomalyListing {
  model_version: number;
  anomalies: AnomalyRow[];
}

export interface ExpansionCandidate {
  sample_id: string;
  score: number;
  hops: number;
}

export interface Expansion {
  seeds: string[];
  params: Record<string, unknown>;
  candidates: ExpansionCandidate[];
}

export type Verdict = "confirmed_fraud" | "confirmed_genuine" | "skipped";

export interface TriageItem {
  item_id: string;
  kind: "cluster" | "sample";
  target_id: string;
  priority: number;
  provenance: string;
  review_state: "pending" | Verdict;
  reviewer: string | null;
  timestamp: number | null;
  representatives: string[];
  members: string[];
}

export interface QueuePage extends Page<TriageItem> {
  seeds: string[];
  audit_length: number;
}

export interface AuditEntry {
  seq: number;
  item_id: string;
  kind: string;
  verdict: Verdict;
  reviewer: string;
  timestamp: number;
  samples: string[];
}

export interface VerdictResult {
  item: TriageItem;
  audit_entry: AuditEntry;
  seeds: string[];
}

// -- client ------------------------------------------------------------------

export function newRequestId(): string {
  const c = (globalThis as { crypto?: Crypto }).crypto;
  if (c && typeof c.randomUUID === "function") return c.randomUUID();
  return `req-${Date.now().toString(36)}-${Math.random().toString(36).slice(2, 10)}`;
}

type Query = Record<string, string | number | null | undefined>;

export class TriageClient {
  constructor(private readonly config: ClientConfig) {}

  private async request<T>(method: string, path: string,
                           body?: unknown, query?: Query): Promise<T> {
    const url = new URL(path, this.config.baseUrl);
    for (const [key, value] of Object.entries(query ?? {})) {
      if (value !== undefined && value !== null) url.searchParams.set(key, String(value));
    }
    const headers: Record<string, string> = {};
    if (this.config.token) headers["Authorization"] = `Bearer ${this.config.token}`;
    if (body !== undefined) headers["Content-Type"] = "application/json";
    const doFetch: FetchLike =
      this.config.fetchImpl ?? (globalThis.fetch.bind(globalThis) as FetchLike);
    const resp = await doFetch(url.toString(), {
      method,
      headers,
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    const text = await resp.text();
    let parsed: unknown = null;
    try {
      parsed = text ? JSON.parse(text) : null;
    } catch {
      parsed = null;
    }
    if (!resp.ok) {
      const fallback: ErrorBody = {
        code: `http_${resp.status}`,
        message: text || resp.statusText,
        detail: {},
      };
      throw new ApiError(resp.status, isErrorBody(parsed) ? parsed : fallback);
    }
    return parsed as T;
  }

  health(): Promise<{ status: string }> {
    return this.request("GET", "/health");
  }

  listDatasets(): Promise<{ datasets: DatasetSummary[] }> {
    return this.request("GET", "/datasets");
  }

  importDataset(req: {
    dataset_id: string;
    records: ImportRecord[];
    provenance?: string;
    requestId?: string;
  }): Promise<DatasetSummary> {
    return this.request("POST", "/datasets", {
      dataset_id: req.dataset_id,
      records: req.records,
      provenance: req.provenance,
      request_id: req.requestId,
    });
  }

  getDataset(datasetId: string): Promise<DatasetDetail> {
    return this.request("GET", `/datasets/${encodeURIComponent(datasetId)}`);
  }

  submitJob(datasetId: string, kind: JobKind, params: Record<string, unknown>,
            requestId?: string): Promise<{ job_id: string; kind: JobKind }> {
    return this.request("POST", `/datasets/${encodeURIComponent(datasetId)}/jobs`,
                        { kind, params, request_id: requestId });
  }

  jobStatus(jobId: string): Promise<JobInfo> {
    return this.request("GET", `/jobs/${encodeURIComponent(jobId)}`);
  }

  cancelJob(jobId: string): Promise<{ job_id: string; state: JobState; canceling: boolean }> {
    return this.request("DELETE", `/jobs/${encodeURIComponent(jobId)}`);
  }

  /** Poll a job until it reaches a terminal state; the caller inspects it. */
  async waitForJob(jobId: string, opts?: { pollMs?: number; timeoutMs?: number }):
      Promise<JobInfo> {
    const pollMs = opts?.pollMs ?? 100;
    const deadline = Date.now() + (opts?.timeoutMs ?? 60_000);
    for (;;) {
      const job = await this.jobStatus(jobId);
      if (job.state === "done" || job.state === "failed" || job.state === "canceled") {
        return job;
      }
      if (Date.now() > deadline) throw new Error(`job ${jobId} still ${job.state}`);
      await new Promise((resolve) => setTimeout(resolve, pollMs));
    }
  }

  clusterSummary(datasetId: string, modelVersion?: number): Promise<ModelSummary> {
    return this.request("GET", `/datasets/${encodeURIComponent(datasetId)}/clusters`,
                        undefined, { model: modelVersion });
  }

  clusterMembers(datasetId: string, clusterId: number, opts?: {
    sort?: "id" | "z";
    limit?: number;
    offset?: number;
    modelVersion?: number;
  }): Promise<Page<MemberRow>> {
    return this.request(
      "GET",
      `/datasets/${encodeURIComponent(datasetId)}/clusters/${clusterId}/members`,
      undefined,
      { sort: opts?.sort, limit: opts?.limit, offset: opts?.offset, model: opts?.modelVersion });
  }

  refine(datasetId: string, ops: RefineOp[], opts?: {
    modelVersion?: number;
    requestId?: string;
  }): Promise<RefineResult> {
    return this.request("POST", `/datasets/${encodeURIComponent(datasetId)}/refine`, {
      ops,
      model: opts?.modelVersion,
      request_id: opts?.requestId,
    });
  }

  projection(datasetId: string, opts?: { job?: string; modelVersion?: number }):
      Promise<Projection> {
    return this.request("GET", `/datasets/${encodeURIComponent(datasetId)}/projection`,
                        undefined, { job: opts?.job, model: opts?.modelVersion });
  }

  anomalies(datasetId: string, opts?: { top?: number; modelVersion?: number }):
      Promise<AnomalyListing> {
    return this.request("GET", `/datasets/${encodeURIComponent(datasetId)}/anomalies`,
                        undefined, { top: opts?.top, model: opts?.modelVersion });
  }

  expand(datasetId: string, req?: {
    seeds?: string[];
    threshold?: number;
    maxHops?: number;
    kNeighbors?: number;
    minSimilarity?: number;
    requestId?: string;
  }): Promise<Expansion> {
    return this.request("POST", `/datasets/${encodeURIComponent(datasetId)}/expand`, {
      seeds: req?.seeds,
      threshold: req?.threshold,
      max_hops: req?.maxHops,
      k_neighbors: req?.kNeighbors,
      min_similarity: req?.minSimilarity,
      request_id: req?.requestId,
    });
  }

  queue(datasetId: string, opts?: { limit?: number; offset?: number }): Promise<QueuePage> {
    return this.request("GET", `/datasets/${encodeURIComponent(datasetId)}/queue`,
                        undefined, { limit: opts?.limit, offset: opts?.offset });
  }

  recordVerdict(req: {
    datasetId: string;
    itemId: string;
    verdict: Verdict;
    reviewer: string;
    requestId?: string;
  }): Promise<VerdictResult> {
    return this.request("POST", "/verdicts", {
      dataset_id: req.datasetId,
      item_id: req.itemId,
      verdict: req.verdict,
      reviewer: req.reviewer,
      request_id: req.requestId,
    });
  }
}

function isErrorBody(value: unknown): value is ErrorBody {
  return (
    typeof value === "object" &&
    value !== null &&
    typeof (value as ErrorBody).code === "string" &&
    typeof (value as ErrorBody).message === "string"
  );
}
