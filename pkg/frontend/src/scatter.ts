/** Canvas scatter of the 2-D projection.
 *
 * Renders up to tens of thousands of points by thinning with a screen-space
 * grid: one point per grid cell is drawn, so zooming out collapses dense
 * regions while zooming back in reveals them again. Hit-testing (hover and
 * lasso) always runs against the full row set, never the thinned one, so
 * display thinning cannot hide samples from selection.
 */

import type { ProjectionRow } from "./api.js";

export interface ScatterOptions {
  width?: number;
  height?: number;
  /** Hard ceiling on drawn points (grid thinning usually stays far below). */
  maxVisible?: number;
  pointRadius?: number;
  /** Extra lines for the hover tooltip, e.g. a fetched z-score. */
  annotate?: (row: ProjectionRow) => string[];
}

export interface VisiblePoint {
  row: ProjectionRow;
  sx: number;
  sy: number;
}

const GOLDEN_ANGLE = 137.50776405003785;

/** Deterministic color per cluster id: stable across refreshes and sessions
 * for a fixed model version, since cluster ids are part of the model. */
export function clusterColor(clusterId: number | null): string {
  if (clusterId === null || clusterId === undefined) return "hsl(0, 0%, 62%)";
  const hue = ((clusterId * GOLDEN_ANGLE) % 360 + 360) % 360;
  return `hsl(${hue.toFixed(3)}, 65%, 46%)`;
}

export function pointInPolygon(x: number, y: number,
                               polygon: Array<[number, number]>): boolean {
  let inside = false;
  for (let i = 0, j = polygon.length - 1; i < polygon.length; j = i++) {
    const [xi, yi] = polygon[i];
    const [xj, yj] = polygon[j];
    const crosses = (yi > y) !== (yj > y) &&
      x < ((xj - xi) * (y - yi)) / (yj - yi) + xi;
    if (crosses) inside = !inside;
  }
  return inside;
}

export class ScatterPlot {
  readonly canvas: HTMLCanvasElement;
  readonly emptyState: HTMLElement;
  readonly tooltip: HTMLElement;
  onLasso: ((ids: string[]) => void) | null = null;

  private rows: ProjectionRow[] = [];
  private overlays: ReadonlySet<string> = new Set();
  private highlighted: ReadonlySet<string> = new Set();
  private readonly width: number;
  private readonly height: number;
  private readonly maxVisible: number;
  private readonly pointRadius: number;
  private readonly annotate: (row: ProjectionRow) => string[];
  private scale = 1;
  private bounds = { minX: 0, maxX: 1, minY: 0, maxY: 1 };
  private lassoPath: Array<[number, number]> | null = null;

  constructor(container: HTMLElement, options: ScatterOptions = {}) {
    this.width = options.width ?? 800;
    this.height = options.height ?? 560;
    this.maxVisible = options.maxVisible ?? 25_000;
    this.pointRadius = options.pointRadius ?? 2.5;
    this.annotate = options.annotate ?? (() => []);

    this.canvas = document.createElement("canvas");
    this.canvas.width = this.width;
    this.canvas.height = this.height;
    this.canvas.dataset.role = "scatter-canvas";
    this.emptyState = document.createElement("p");
    this.emptyState.dataset.role = "scatter-empty";
    this.emptyState.textContent = "Nothing to plot yet — import a dataset and run a projection job.";
    this.tooltip = document.createElement("div");
    this.tooltip.dataset.role = "scatter-tooltip";
    this.tooltip.style.display = "none";
    container.append(this.canvas, this.emptyState, this.tooltip);

    this.canvas.addEventListener("mousedown", (ev) => this.lassoStart(ev.offsetX, ev.offsetY));
    this.canvas.addEventListener("mousemove", (ev) => {
      if (this.lassoPath) this.lassoMove(ev.offsetX, ev.offsetY);
      else this.hover(ev.offsetX, ev.offsetY);
    });
    this.canvas.addEventListener("mouseup", () => this.lassoEnd());
    this.canvas.addEventListener("mouseleave", () => {
      this.tooltip.style.display = "none";
    });
  }

  setData(rows: ProjectionRow[], overlays?: Iterable<string>): void {
    this.rows = rows.slice();
    if (overlays) this.overlays = new Set(overlays);
    if (rows.length) {
      const xs = rows.map((r) => r.x);
      const ys = rows.map((r) => r.y);
      this.bounds = {
        minX: Math.min(...xs),
        maxX: Math.max(...xs),
        minY: Math.min(...ys),
        maxY: Math.max(...ys),
      };
    }
    this.draw();
  }

  /** Distinct marks for confirmed-fraud samples. */
  setOverlays(ids: Iterable<string>): void {
    this.overlays = new Set(ids);
    this.draw();
  }

  isOverlay(sampleId: string): boolean {
    return this.overlays.has(sampleId);
  }

  setHighlight(ids: Iterable<string>): void {
    this.highlighted = new Set(ids);
    this.draw();
  }

  get rowCount(): number {
    return this.rows.length;
  }

  zoom(factor: number): void {
    this.scale = Math.min(64, Math.max(1 / 64, this.scale * factor));
    this.draw();
  }

  get zoomLevel(): number {
    return this.scale;
  }

  /** Screen coordinates of a row at the current zoom, for tests and marks. */
  screenOf(row: ProjectionRow): [number, number] {
    const { minX, maxX, minY, maxY } = this.bounds;
    const spanX = maxX - minX || 1;
    const spanY = maxY - minY || 1;
    const margin = 12;
    const cx = this.width / 2;
    const cy = this.height / 2;
    const nx = margin + ((row.x - minX) / spanX) * (this.width - 2 * margin);
    const ny = margin + ((row.y - minY) / spanY) * (this.height - 2 * margin);
    return [cx + (nx - cx) * this.scale, cy + (ny - cy) * this.scale];
  }

  /** Rows that survive screen-space grid thinning at the current zoom. */
  visiblePoints(): VisiblePoint[] {
    const cell = Math.max(3, this.pointRadius * 2);
    const seen = new Set<string>();
    const visible: VisiblePoint[] = [];
    for (const row of this.rows) {
      const [sx, sy] = this.screenOf(row);
      if (sx < -cell || sy < -cell || sx > this.width + cell || sy > this.height + cell) {
        continue;
      }
      const key = `${Math.floor(sx / cell)}:${Math.floor(sy / cell)}`;
      const mustDraw = this.overlays.has(row.sample_id) || this.highlighted.has(row.sample_id);
      if (!mustDraw) {
        if (seen.has(key)) continue;
        seen.add(key);
      }
      visible.push({ row, sx, sy });
      if (visible.length >= this.maxVisible) break;
    }
    return visible;
  }

  draw(): void {
    this.emptyState.style.display = this.rows.length ? "none" : "";
    const ctx = this.canvas.getContext("2d");
    if (!ctx) return; // non-rendering DOM (tests); geometry still works
    ctx.clearRect(0, 0, this.width, this.height);
    if (!this.rows.length) return;
    for (const { row, sx, sy } of this.visiblePoints()) {
      ctx.fillStyle = clusterColor(row.cluster_id);
      ctx.beginPath();
      ctx.arc(sx, sy, this.pointRadius, 0, Math.PI * 2);
      ctx.fill();
      if (this.highlighted.has(row.sample_id)) {
        ctx.strokeStyle = "#111";
        ctx.lineWidth = 1.5;
        ctx.stroke();
      }
      if (this.overlays.has(row.sample_id)) {
        ctx.strokeStyle = "#d21f3c";
        ctx.lineWidth = 2;
        ctx.beginPath();
        ctx.arc(sx, sy, this.pointRadius + 2.5, 0, Math.PI * 2);
        ctx.stroke();
      }
    }
    if (this.lassoPath && this.lassoPath.length > 1) {
      ctx.strokeStyle = "#3366cc";
      ctx.setLineDash([4, 3]);
      ctx.beginPath();
      ctx.moveTo(this.lassoPath[0][0], this.lassoPath[0][1]);
      for (const [x, y] of this.lassoPath.slice(1)) ctx.lineTo(x, y);
      ctx.stroke();
      ctx.setLineDash([]);
    }
  }

  /** Nearest row within a small pick radius of a screen position. */
  hitTest(sx: number, sy: number): ProjectionRow | null {
    const pick = this.pointRadius + 3;
    let best: ProjectionRow | null = null;
    let bestDist = pick * pick;
    for (const row of this.rows) {
      const [px, py] = this.screenOf(row);
      const d = (px - sx) * (px - sx) + (py - sy) * (py - sy);
      if (d <= bestDist) {
        best = row;
        bestDist = d;
      }
    }
    return best;
  }

  /** Sample ids inside a lasso polygon given in screen coordinates. */
  lassoSelect(polygon: Array<[number, number]>): string[] {
    if (polygon.length < 3) return [];
    const ids: string[] = [];
    for (const row of this.rows) {
      const [sx, sy] = this.screenOf(row);
      if (pointInPolygon(sx, sy, polygon)) ids.push(row.sample_id);
    }
    this.onLasso?.(ids);
    return ids;
  }

  private lassoStart(x: number, y: number): void {
    this.lassoPath = [[x, y]];
  }

  private lassoMove(x: number, y: number): void {
    this.lassoPath?.push([x, y]);
    this.draw();
  }

  private lassoEnd(): void {
    const path = this.lassoPath;
    this.lassoPath = null;
    if (path && path.length >= 3) this.lassoSelect(path);
    this.draw();
  }

  /** Update the tooltip for a screen position; returns the row under it. */
  hover(x: number, y: number): ProjectionRow | null {
    const row = this.hitTest(x, y);
    if (!row) {
      this.tooltip.style.display = "none";
      return null;
    }
    const lines = [
      row.sample_id,
      `label: ${row.label ?? "—"}`,
      `cluster: ${row.cluster_id ?? "—"}`,
      ...this.annotate(row),
    ];
    this.tooltip.textContent = lines.join("\n");
    this.tooltip.style.display = "";
    this.tooltip.style.left = `${x + 12}px`;
    this.tooltip.style.top = `${y + 12}px`;
    return row;
  }
}
