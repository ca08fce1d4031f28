/**
 * 4D navigation state: a date scrubber bounded by the project's span,
 * past/future direction, and the reveal affordance per viewpoint (images
 * without an aligned time-lapse cannot be traversed backward in 2D).
 */

export interface TimelineBounds {
  start: string; // ISO dates
  finish: string;
}

export type RevealDirection = "past" | "future";

function clampDate(value: string, bounds: TimelineBounds): string {
  if (value < bounds.start) return bounds.start;
  if (value > bounds.finish) return bounds.finish;
  return value;
}

export class TimelineState {
  current: string;
  direction: RevealDirection = "future";
  revealRegion: Array<[number, number]> | null = null;
  /** image id -> whether a stack covers it (singletons get the affordance) */
  temporal2d: Record<string, boolean> = {};

  constructor(
    public bounds: TimelineBounds,
    public captureDate: string,
  ) {
    this.current = clampDate(captureDate, bounds);
  }

  setDate(value: string): void {
    this.current = clampDate(value, this.bounds);
    this.direction = this.current < this.captureDate ? "past" : "future";
  }

  /** Fraction of the span, for slider widgets. */
  get fraction(): number {
    const span = Date.parse(this.bounds.finish) - Date.parse(this.bounds.start);
    if (span <= 0) return 0;
    return (Date.parse(this.current) - Date.parse(this.bounds.start)) / span;
  }

  setFraction(f: number): void {
    const clamped = Math.max(0, Math.min(1, f));
    const t = Date.parse(this.bounds.start) + clamped * (Date.parse(this.bounds.finish) - Date.parse(this.bounds.start));
    this.setDate(new Date(t).toISOString().slice(0, 10));
  }

  registerViewpointGroups(groups: { reference: string; members: string[] }[], imageIds: string[]): void {
    const covered = new Set<string>();
    for (const g of groups) {
      if (g.members.length >= 2) {
        for (const m of g.members) covered.add(m);
      }
    }
    for (const id of imageIds) this.temporal2d[id] = covered.has(id);
  }

  /**
   * What the viewer should do for an image at the current date: composite
   * the model forward in time, replay an aligned frame backward, or show
   * the no-temporal-data affordance for backward moves on singletons.
   */
  revealMode(imageId: string): "photo" | "future-overlay" | "past-frame" | "no-temporal-data" {
    if (this.current === this.captureDate) return "photo";
    if (this.direction === "future") return "future-overlay";
    return this.temporal2d[imageId] ? "past-frame" : "no-temporal-data";
  }

  setRegion(polygon: Array<[number, number]> | null): void {
    this.revealRegion = polygon && polygon.length >= 3 ? polygon : null;
  }
}
