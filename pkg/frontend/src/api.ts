/**
 * Typed client for the workbench HTTP API. Every mutation carries a
 * client-generated request id, so retries and reconnects are idempotent.
 * The transport is injectable for tests.
 */

export interface CameraRecord {
  image: string;
  rotvec: number[];
  t: number[];
  focal: number;
  k1: number;
  k2: number;
  width: number;
  height: number;
  is_anchor: boolean;
}

export interface ProjectSummary {
  revision: number;
  images: Record<string, { width: number; height: number; registered: boolean; anchor: boolean; capture_time: string | null }>;
  cameras: CameraRecord[];
  pending_assists: Record<string, { image: string; reason: string; detail: string }>;
  annotations: string[];
  model_dates: { start: string; finish: string };
  schedule: Record<string, { start: string; finish: string }>;
}

export interface MeshPayload {
  vertices: number[][];
  triangles: number[][];
  components: string[];
  decimated: boolean;
}

export interface OverlayRecord {
  annotation: string;
  status: string;
  color: number[];
  fill_alpha: number;
  visible_fraction: number;
  outlines: number[][][];
}

export interface RegisterStepResult {
  status: "ok" | "assist-required";
  summary?: ProjectSummary;
  pick_rms?: Record<string, number>;
  pick_residuals?: Record<string, number[]>;
  request?: { image: string; reason: string; detail: string };
}

export interface PickResult {
  point: number[];
  component: string;
  triangle: number;
  t: number;
}

export class ApiError extends Error {
  constructor(
    public status: number,
    public code: string,
    message: string,
  ) {
    super(message);
  }
}

export type Transport = (
  method: string,
  path: string,
  body?: unknown,
) => Promise<{ status: number; json: () => Promise<unknown> }>;

function fetchTransport(base: string): Transport {
  return async (method, path, body) => {
    const response = await fetch(base + path, {
      method,
      headers: body === undefined ? undefined : { "content-type": "application/json" },
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    return { status: response.status, json: () => response.json() };
  };
}

let requestCounter = 0;

/** Unique-enough request ids for idempotent mutations. */
export function nextRequestId(prefix = "ui"): string {
  requestCounter += 1;
  return `${prefix}-${Date.now().toString(36)}-${requestCounter}`;
}

export class WorkbenchApi {
  private transport: Transport;

  constructor(baseOrTransport: string | Transport = "") {
    this.transport =
      typeof baseOrTransport === "string" ? fetchTransport(baseOrTransport) : baseOrTransport;
  }

  private async call<T>(method: string, path: string, body?: unknown): Promise<T> {
    const response = await this.transport(method, path, body);
    const payload = (await response.json()) as Record<string, unknown>;
    if (response.status >= 400) {
      throw new ApiError(
        response.status,
        String(payload?.error ?? "error"),
        String(payload?.message ?? response.status),
      );
    }
    return payload as T;
  }

  project(): Promise<ProjectSummary> {
    return this.call("GET", "/project");
  }

  timeline(): Promise<{ model: { start: string; finish: string }; photo_dates: string[]; viewpoint_groups: { reference: string; members: string[] }[] }> {
    return this.call("GET", "/timeline");
  }

  mesh(date?: string): Promise<MeshPayload> {
    const q = date ? `?date=${encodeURIComponent(date)}` : "";
    return this.call("GET", `/model/mesh${q}`);
  }

  imageUrl(imageId: string): string {
    return `/images/${encodeURIComponent(imageId)}/bytes`;
  }

  overlayUrl(imageId: string, date: string, style: string, alpha: number): string {
    return (
      `/overlay?image=${encodeURIComponent(imageId)}&date=${encodeURIComponent(date)}` +
      `&style=${encodeURIComponent(style)}&alpha=${alpha}`
    );
  }

  revealUrl(imageId: string, date: string): string {
    return `/reveal?image=${encodeURIComponent(imageId)}&date=${encodeURIComponent(date)}`;
  }

  /** Probe the reveal endpoint; distinguishes the no-temporal-data case. */
  async probeReveal(imageId: string, date: string): Promise<"ok" | "no-temporal-data"> {
    const response = await this.transport("GET", this.revealUrl(imageId, date));
    if (response.status < 400) return "ok";
    const payload = (await response.json()) as { error?: string; message?: string };
    if (payload?.error === "no-temporal-data") return "no-temporal-data";
    throw new ApiError(response.status, String(payload?.error), String(payload?.message));
  }

  pickModelPoint(origin: number[], direction: number[], date?: string): Promise<PickResult> {
    return this.call("POST", "/model/pick", { origin, direction, date });
  }

  submitCorrespondences(
    imageId: string,
    pairs: { pixel: number[]; model_point: number[] }[],
  ): Promise<{ status: string; count: number }> {
    return this.call("POST", "/correspondences", {
      request_id: nextRequestId("corr"),
      image: imageId,
      correspondences: pairs,
    });
  }

  registerStep(): Promise<RegisterStepResult> {
    return this.call("POST", "/register/step", { request_id: nextRequestId("step") });
  }

  annotations(): Promise<unknown[]> {
    return this.call("GET", "/annotations");
  }

  addAnnotation(body: {
    image: string;
    status: string;
    note?: string;
    author?: string;
    polygon?: number[][];
    components?: string[];
    date?: string;
  }): Promise<{ status: string; annotation: string }> {
    return this.call("POST", "/annotations", { request_id: nextRequestId("ann"), ...body });
  }

  transfers(imageId: string, date?: string): Promise<{ image: string; overlays: OverlayRecord[] }> {
    const q = date ? `&date=${encodeURIComponent(date)}` : "";
    return this.call("GET", `/annotations/transfers?image=${encodeURIComponent(imageId)}${q}`);
  }

  resolveSelection(body: {
    image: string;
    mode: string;
    seed: unknown;
    date?: string;
  }): Promise<{ mode: string; components: string[]; outlines: number[][][] }> {
    return this.call("POST", "/selections/resolve", body);
  }
}
