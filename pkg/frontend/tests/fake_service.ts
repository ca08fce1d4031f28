/**
 * An in-memory stand-in for the workbench service, mirroring the HTTP
 * surface the UI consumes. Mutations honor request-id idempotence, like
 * the real thing, so client retry logic can be exercised.
 */

import { Transport } from "../src/api.js";

export interface FakeState {
  registered: Set<string>;
  anchors: Set<string>;
  correspondences: Map<string, { pixel: number[]; model_point: number[] }[]>;
  annotations: { id: string; image: string; status: string; components?: string[] }[];
  transfersByImage: Map<string, unknown[]>;
  stacks: Map<string, string[]>; // reference -> members
  pickResiduals: number[];
  requests: Map<string, unknown>;
  log: string[];
}

export function makeFakeService(images: string[], options?: { residuals?: number[] }) {
  const state: FakeState = {
    registered: new Set(),
    anchors: new Set(),
    correspondences: new Map(),
    annotations: [],
    transfersByImage: new Map(),
    stacks: new Map(),
    pickResiduals: options?.residuals ?? [0.4, 0.8, 1.2, 0.6],
    requests: new Map(),
    log: [],
  };

  const summary = () => ({
    revision: state.log.length,
    images: Object.fromEntries(
      images.map((i) => [
        i,
        {
          width: 512,
          height: 384,
          registered: state.registered.has(i),
          anchor: state.anchors.has(i),
          capture_time: "2020-10-01T09:00:00",
        },
      ]),
    ),
    cameras: [...state.registered].map((image) => ({
      image,
      rotvec: [0, 0, 0],
      t: [0, 0, 0],
      focal: 549,
      k1: 0,
      k2: 0,
      width: 512,
      height: 384,
      is_anchor: state.anchors.has(image),
    })),
    pending_assists: {},
    annotations: state.annotations.map((a) => a.id),
    model_dates: { start: "2020-01-01", finish: "2020-12-01" },
    schedule: { core: { start: "2020-02-01", finish: "2020-05-01" } },
  });

  const respond = (status: number, body: unknown) => ({
    status,
    json: async () => body,
  });

  const idempotent = (requestId: string | undefined, fn: () => unknown) => {
    if (!requestId) return respond(400, { error: "validation", message: "request_id required" });
    if (state.requests.has(requestId)) return respond(200, state.requests.get(requestId));
    const result = fn();
    state.requests.set(requestId, result);
    return respond(200, result);
  };

  const transport: Transport = async (method, path, body) => {
    state.log.push(`${method} ${path}`);
    const payload = (body ?? {}) as Record<string, any>;
    if (method === "GET" && path === "/project") return respond(200, summary());
    if (method === "GET" && path === "/timeline") {
      return respond(200, {
        model: { start: "2020-01-01", finish: "2020-12-01" },
        photo_dates: ["2020-10-01"],
        viewpoint_groups: [...state.stacks.entries()].map(([reference, members]) => ({
          reference,
          members,
        })),
      });
    }
    if (method === "GET" && path.startsWith("/model/mesh")) {
      return respond(200, {
        vertices: [
          [-5, -2.5, 0],
          [5, -2.5, 0],
          [5, -2.5, 5],
          [-5, -2.5, 5],
        ],
        triangles: [
          [0, 1, 2],
          [0, 2, 3],
        ],
        components: ["core", "core"],
        decimated: false,
      });
    }
    if (method === "GET" && path.startsWith("/reveal")) {
      const image = decodeURIComponent(path.match(/image=([^&]+)/)?.[1] ?? "");
      const covered = [...state.stacks.values()].some(
        (members) => members.includes(image) && members.length >= 2,
      );
      if (!covered) {
        return respond(400, { error: "no-temporal-data", message: `no stack covers ${image}` });
      }
      return respond(200, {});
    }
    if (method === "POST" && path === "/model/pick") {
      const direction = payload.direction as number[];
      if (direction[1] === 0) return respond(404, { error: "unknown-id", message: "ray misses" });
      return respond(200, { point: [0.0, -2.5, 2.0], component: "core", triangle: 0, t: 10.0 });
    }
    if (method === "POST" && path === "/correspondences") {
      return idempotent(payload.request_id, () => {
        state.correspondences.set(payload.image, payload.correspondences);
        return { status: "recorded", image: payload.image, count: payload.correspondences.length };
      });
    }
    if (method === "POST" && path === "/register/step") {
      return idempotent(payload.request_id, () => {
        for (const [image, corrs] of state.correspondences) {
          if (corrs.length >= 4) {
            state.registered.add(image);
            state.anchors.add(image);
          }
        }
        const first = [...state.registered][0];
        return {
          status: "ok",
          summary: summary(),
          pick_rms: first ? { [first]: 0.9 } : {},
          pick_residuals: first ? { [first]: state.pickResiduals } : {},
        };
      });
    }
    if (method === "POST" && path === "/annotations") {
      return idempotent(payload.request_id, () => {
        const id = `a${String(state.annotations.length).padStart(4, "0")}`;
        state.annotations.push({
          id,
          image: payload.image,
          status: payload.status,
          components: payload.components,
        });
        const overlay = {
          annotation: id,
          status: payload.status,
          color: [0.8, 0.1, 0.1],
          fill_alpha: 0.45,
          visible_fraction: 1.0,
          outlines: [
            [
              [10, 10],
              [60, 10],
              [60, 40],
              [10, 40],
            ],
          ],
        };
        // the annotation becomes visible from every registered image
        for (const image of images) {
          const list = state.transfersByImage.get(image) ?? [];
          state.transfersByImage.set(image, [...list, overlay]);
        }
        return { status: "ok", annotation: id };
      });
    }
    if (method === "GET" && path.startsWith("/annotations/transfers")) {
      const image = decodeURIComponent(path.match(/image=([^&]+)/)?.[1] ?? "");
      return respond(200, { image, overlays: state.transfersByImage.get(image) ?? [] });
    }
    if (method === "GET" && path === "/annotations") {
      return respond(200, state.annotations);
    }
    return respond(404, { error: "unknown-id", message: `no fake route for ${method} ${path}` });
  };

  return { transport, state };
}
