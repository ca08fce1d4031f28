/**
 * Annotation board: authoring state plus a polling loop that keeps every
 * open view's overlays in sync (2 s interval; collaboration stays simple
 * and server-authoritative).
 */

import { OverlayRecord, WorkbenchApi } from "./api.js";

export const STATUSES = ["ahead", "on-time", "behind", "deviation"] as const;
export type Status = (typeof STATUSES)[number];

export const STATUS_CSS: Record<Status, string> = {
  ahead: "rgb(33, 166, 54)",
  "on-time": "rgba(255, 255, 255, 0.9)",
  behind: "rgb(209, 31, 31)",
  deviation: "rgb(26, 38, 140)",
};

export const POLL_INTERVAL_MS = 2000;

export interface BoardView {
  imageId: string;
  date?: string;
  overlays: OverlayRecord[];
  error?: string;
}

type Scheduler = (fn: () => void, ms: number) => unknown;

export class AnnotationBoard {
  views: Map<string, BoardView> = new Map();
  status: Status = "on-time";
  note = "";
  author = "navigator";
  polling = false;
  onUpdate: (() => void) | null = null;

  constructor(
    private api: WorkbenchApi,
    private schedule: Scheduler = (fn, ms) => setTimeout(fn, ms),
  ) {}

  openView(imageId: string, date?: string): void {
    if (!this.views.has(imageId)) {
      this.views.set(imageId, { imageId, date, overlays: [] });
    }
  }

  closeView(imageId: string): void {
    this.views.delete(imageId);
  }

  async annotatePolygon(imageId: string, polygon: number[][], date?: string): Promise<string> {
    if (polygon.length < 3) throw new Error("a polygon needs at least 3 vertices");
    const result = await this.api.addAnnotation({
      image: imageId,
      status: this.status,
      note: this.note,
      author: this.author,
      polygon,
      date,
    });
    await this.refresh();
    return result.annotation;
  }

  async annotateComponents(imageId: string, components: string[], date?: string): Promise<string> {
    const result = await this.api.addAnnotation({
      image: imageId,
      status: this.status,
      note: this.note,
      author: this.author,
      components,
      date,
    });
    await this.refresh();
    return result.annotation;
  }

  /** Pull fresh transfers for every open view. */
  async refresh(): Promise<void> {
    for (const view of this.views.values()) {
      try {
        const result = await this.api.transfers(view.imageId, view.date);
        view.overlays = result.overlays;
        view.error = undefined;
      } catch (err) {
        view.error = err instanceof Error ? err.message : String(err);
      }
    }
    this.onUpdate?.();
  }

  /** Start the polling loop; returns a stop function. */
  startPolling(intervalMs: number = POLL_INTERVAL_MS): () => void {
    this.polling = true;
    const tick = async () => {
      if (!this.polling) return;
      await this.refresh();
      if (this.polling) this.schedule(tick, intervalMs);
    };
    this.schedule(tick, intervalMs);
    return () => {
      this.polling = false;
    };
  }
}
