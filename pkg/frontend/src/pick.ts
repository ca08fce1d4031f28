/**
 * Correspondence-picking session: alternating photo-pixel and model-point
 * picks accumulate into pairs; submission unlocks at four pairs, runs the
 * registration step, and surfaces the per-pick residuals (or the next
 * assist request) for display.
 */

import { WorkbenchApi } from "./api.js";

export interface PickPair {
  pixel: [number, number];
  modelPoint: [number, number, number];
  component?: string;
}

export type PickPhase = "need-pixel" | "need-model-point";

export interface SubmitOutcome {
  status: "registered" | "assist-required";
  residuals?: number[];
  rms?: number;
  assist?: { image: string; reason: string; detail: string };
}

export const MIN_PAIRS = 4;

export class PickSession {
  readonly imageId: string;
  pairs: PickPair[] = [];
  pendingPixel: [number, number] | null = null;
  lastOutcome: SubmitOutcome | null = null;
  busy = false;

  constructor(
    private api: WorkbenchApi,
    imageId: string,
  ) {
    this.imageId = imageId;
  }

  get phase(): PickPhase {
    return this.pendingPixel === null ? "need-pixel" : "need-model-point";
  }

  get canSubmit(): boolean {
    return this.pairs.length >= MIN_PAIRS && !this.busy;
  }

  /** First half of a pair: a click in the photo. */
  pickPixel(x: number, y: number): void {
    this.pendingPixel = [x, y];
  }

  /**
   * Second half: a model point (already refined server-side by raycast).
   * Pairs append atomically; a model pick without a pending pixel is a
   * no-op so stray viewport clicks cannot corrupt the list.
   */
  pickModelPoint(point: [number, number, number], component?: string): void {
    if (this.pendingPixel === null) return;
    this.pairs = [...this.pairs, { pixel: this.pendingPixel, modelPoint: point, component }];
    this.pendingPixel = null;
  }

  undo(): void {
    if (this.pendingPixel !== null) {
      this.pendingPixel = null;
      return;
    }
    this.pairs = this.pairs.slice(0, -1);
  }

  clear(): void {
    this.pairs = [];
    this.pendingPixel = null;
    this.lastOutcome = null;
  }

  /** Submit the picks and advance the pipeline one step. */
  async submit(): Promise<SubmitOutcome> {
    if (!this.canSubmit) {
      throw new Error(`need at least ${MIN_PAIRS} pairs before submitting`);
    }
    this.busy = true;
    try {
      await this.api.submitCorrespondences(
        this.imageId,
        this.pairs.map((p) => ({ pixel: [...p.pixel], model_point: [...p.modelPoint] })),
      );
      const step = await this.api.registerStep();
      if (step.status === "assist-required" && step.request) {
        this.lastOutcome = { status: "assist-required", assist: step.request };
      } else {
        this.lastOutcome = {
          status: "registered",
          residuals: step.pick_residuals?.[this.imageId] ?? [],
          rms: step.pick_rms?.[this.imageId],
        };
      }
      return this.lastOutcome;
    } finally {
      this.busy = false;
    }
  }
}
