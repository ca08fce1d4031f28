/**
 * DOM glue: three panes (picker, 4D navigator, annotation board) over the
 * workbench API. All state lives server-side; refreshing the page
 * reconstructs everything from the endpoints.
 */

import { ApiError, MeshPayload, ProjectSummary, WorkbenchApi } from "./api.js";
import { fitOrbit, orbitRotate, orbitZoom, OrbitState, pickRay, projectPoints, Vec3 } from "./math.js";
import { AnnotationBoard, STATUSES, Status } from "./board.js";
import { MIN_PAIRS, PickSession } from "./pick.js";
import { overlayFillStyle, polygonPath, residualLabel, statusStroke } from "./overlay.js";
import { TimelineState } from "./timeline.js";

const api = new WorkbenchApi("");

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

interface AppState {
  summary: ProjectSummary;
  mesh: MeshPayload;
  meshVertices: Vec3[];
  orbit: OrbitState;
  currentImage: string;
  pick: PickSession;
  timeline: TimelineState;
  board: AnnotationBoard;
}

let state: AppState | null = null;

async function boot(): Promise<void> {
  const summary = await api.project();
  const mesh = await api.mesh(summary.model_dates.finish);
  const meshVertices = mesh.vertices as Vec3[];
  const imageIds = Object.keys(summary.images);
  const currentImage = imageIds[0];
  const timeline = new TimelineState(
    { start: summary.model_dates.start, finish: summary.model_dates.finish },
    summary.images[currentImage]?.capture_time?.slice(0, 10) ?? summary.model_dates.finish,
  );
  const tl = await api.timeline();
  timeline.registerViewpointGroups(tl.viewpoint_groups, imageIds);
  const board = new AnnotationBoard(api);
  board.openView(currentImage);
  state = {
    summary,
    mesh,
    meshVertices,
    orbit: fitOrbit(meshVertices),
    currentImage,
    pick: new PickSession(api, currentImage),
    timeline,
    board,
  };
  buildImageList(imageIds);
  wirePicker();
  wireTimeline();
  wireBoard();
  board.onUpdate = drawBoard;
  board.startPolling();
  drawAll();
}

function buildImageList(ids: string[]): void {
  const select = el<HTMLSelectElement>("image-select");
  select.innerHTML = "";
  for (const id of ids) {
    const option = document.createElement("option");
    option.value = id;
    option.textContent = id;
    select.appendChild(option);
  }
  select.onchange = () => {
    if (!state) return;
    state.currentImage = select.value;
    state.pick = new PickSession(api, select.value);
    state.board.openView(select.value);
    const capture = state.summary.images[select.value]?.capture_time?.slice(0, 10);
    if (capture) state.timeline.captureDate = capture;
    drawAll();
  };
}

function drawAll(): void {
  drawPhoto();
  drawMesh();
  drawTimeline();
  drawBoard();
  drawAssistBanner();
}

function drawAssistBanner(): void {
  if (!state) return;
  const banner = el<HTMLDivElement>("assist-banner");
  const assists = Object.values(state.summary.pending_assists);
  if (assists.length === 0) {
    banner.hidden = true;
    return;
  }
  banner.hidden = false;
  banner.textContent =
    `Assist needed for ${assists[0].image} (${assists[0].reason}). ` +
    "Open it and pick correspondences to continue registration.";
  banner.onclick = () => {
    const select = el<HTMLSelectElement>("image-select");
    select.value = assists[0].image;
    select.onchange?.(new Event("change"));
  };
}

function drawPhoto(): void {
  if (!state) return;
  const canvas = el<HTMLCanvasElement>("photo-canvas");
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const img = new Image();
  img.onload = () => {
    canvas.width = img.width;
    canvas.height = img.height;
    ctx.drawImage(img, 0, 0);
    for (const pair of state!.pick.pairs) {
      ctx.strokeStyle = "#ffd400";
      ctx.lineWidth = 2;
      ctx.beginPath();
      ctx.arc(pair.pixel[0], pair.pixel[1], 5, 0, 2 * Math.PI);
      ctx.stroke();
    }
    if (state!.pick.pendingPixel) {
      ctx.strokeStyle = "#ff5050";
      ctx.beginPath();
      ctx.arc(state!.pick.pendingPixel[0], state!.pick.pendingPixel[1], 6, 0, 2 * Math.PI);
      ctx.stroke();
    }
    const outcome = state!.pick.lastOutcome;
    if (outcome?.status === "registered" && outcome.residuals) {
      ctx.fillStyle = "#10c020";
      ctx.font = "14px system-ui";
      ctx.fillText(residualLabel(outcome.residuals), 10, 20);
      outcome.residuals.forEach((r, i) => {
        const pair = state!.pick.pairs[i];
        if (pair) ctx.fillText(r.toFixed(1), pair.pixel[0] + 8, pair.pixel[1] - 8);
      });
    }
  };
  img.src = api.imageUrl(state.currentImage);
}

function drawMesh(): void {
  if (!state) return;
  const canvas = el<HTMLCanvasElement>("mesh-canvas");
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const { width, height } = canvas;
  ctx.fillStyle = "#101418";
  ctx.fillRect(0, 0, width, height);
  const focal = 0.9 * Math.min(width, height);
  const projected = projectPoints(state.orbit, focal, width, height, state.meshVertices);
  ctx.strokeStyle = "#7fd0ff";
  ctx.lineWidth = 1;
  ctx.beginPath();
  for (const tri of state.mesh.triangles) {
    const [a, b, c] = tri.map((i) => projected[i]);
    if (!a || !b || !c) continue;
    ctx.moveTo(a[0], a[1]);
    ctx.lineTo(b[0], b[1]);
    ctx.lineTo(c[0], c[1]);
    ctx.lineTo(a[0], a[1]);
  }
  ctx.stroke();
  el<HTMLSpanElement>("pick-count").textContent =
    `${state.pick.pairs.length} pairs (need ${MIN_PAIRS})`;
  el<HTMLButtonElement>("submit-picks").disabled = !state.pick.canSubmit;
}

function wirePicker(): void {
  const photo = el<HTMLCanvasElement>("photo-canvas");
  photo.onclick = (ev) => {
    if (!state) return;
    const rect = photo.getBoundingClientRect();
    const x = ((ev.clientX - rect.left) / rect.width) * photo.width;
    const y = ((ev.clientY - rect.top) / rect.height) * photo.height;
    state.pick.pickPixel(x, y);
    drawPhoto();
  };

  const mesh = el<HTMLCanvasElement>("mesh-canvas");
  let dragging = false;
  let moved = false;
  let last: [number, number] = [0, 0];
  mesh.onmousedown = (ev) => {
    dragging = true;
    moved = false;
    last = [ev.clientX, ev.clientY];
  };
  mesh.onmousemove = (ev) => {
    if (!dragging || !state) return;
    const dx = ev.clientX - last[0];
    const dy = ev.clientY - last[1];
    if (Math.abs(dx) + Math.abs(dy) > 2) moved = true;
    last = [ev.clientX, ev.clientY];
    state.orbit = orbitRotate(state.orbit, -dx * 0.008, dy * 0.008);
    drawMesh();
  };
  mesh.onmouseup = async (ev) => {
    dragging = false;
    if (moved || !state) return;
    const rect = mesh.getBoundingClientRect();
    const px = ((ev.clientX - rect.left) / rect.width) * mesh.width;
    const py = ((ev.clientY - rect.top) / rect.height) * mesh.height;
    const focal = 0.9 * Math.min(mesh.width, mesh.height);
    const ray = pickRay(state.orbit, focal, mesh.width, mesh.height, px, py);
    try {
      const hit = await api.pickModelPoint(
        [...ray.origin],
        [...ray.direction],
        state.timeline.current,
      );
      state.pick.pickModelPoint(hit.point as [number, number, number], hit.component);
      drawPhoto();
      drawMesh();
    } catch (err) {
      notify(err instanceof ApiError ? `miss: ${err.message}` : String(err));
    }
  };
  mesh.onwheel = (ev) => {
    if (!state) return;
    ev.preventDefault();
    state.orbit = orbitZoom(state.orbit, ev.deltaY > 0 ? 1.1 : 0.9);
    drawMesh();
  };

  el<HTMLButtonElement>("undo-pick").onclick = () => {
    state?.pick.undo();
    drawAll();
  };
  el<HTMLButtonElement>("submit-picks").onclick = async () => {
    if (!state) return;
    try {
      const outcome = await state.pick.submit();
      if (outcome.status === "assist-required" && outcome.assist) {
        notify(`assist requested for ${outcome.assist.image}: ${outcome.assist.detail}`);
      } else {
        notify(residualLabel(outcome.residuals ?? []));
      }
      state.summary = await api.project();
      drawAll();
    } catch (err) {
      notify(String(err));
    }
  };
}

function drawTimeline(): void {
  if (!state) return;
  const slider = el<HTMLInputElement>("date-slider");
  slider.value = String(Math.round(state.timeline.fraction * 1000));
  el<HTMLSpanElement>("date-label").textContent = state.timeline.current;
  const mode = state.timeline.revealMode(state.currentImage);
  const note = el<HTMLSpanElement>("temporal-note");
  const viewer = el<HTMLImageElement>("reveal-view");
  if (mode === "photo") {
    note.textContent = "capture date";
    viewer.src = api.imageUrl(state.currentImage);
  } else if (mode === "future-overlay") {
    note.textContent = "future: model overlay";
    viewer.src = api.overlayUrl(state.currentImage, state.timeline.current, "semi-transparent", 0.65);
  } else if (mode === "past-frame") {
    note.textContent = "past: aligned photo";
    viewer.src = api.revealUrl(state.currentImage, state.timeline.current);
  } else {
    note.textContent = "no time-lapse covers this viewpoint (2D time travel unavailable)";
    viewer.src = api.imageUrl(state.currentImage);
  }
}

function wireTimeline(): void {
  const slider = el<HTMLInputElement>("date-slider");
  slider.oninput = () => {
    state?.timeline.setFraction(Number(slider.value) / 1000);
    drawTimeline();
  };
}

function drawBoard(): void {
  if (!state) return;
  const canvas = el<HTMLCanvasElement>("board-canvas");
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const img = new Image();
  img.onload = () => {
    canvas.width = img.width;
    canvas.height = img.height;
    ctx.drawImage(img, 0, 0);
    const view = state!.board.views.get(state!.currentImage);
    for (const record of view?.overlays ?? []) {
      ctx.fillStyle = overlayFillStyle(record);
      ctx.strokeStyle = statusStroke(record.status);
      ctx.lineWidth = 2;
      for (const outline of record.outlines) {
        ctx.beginPath();
        polygonPath(outline, ctx);
        ctx.fill();
        ctx.stroke();
      }
    }
  };
  img.src = api.imageUrl(state.currentImage);
}

function wireBoard(): void {
  const statusSelect = el<HTMLSelectElement>("status-select");
  statusSelect.innerHTML = "";
  for (const status of STATUSES) {
    const option = document.createElement("option");
    option.value = status;
    option.textContent = status;
    statusSelect.appendChild(option);
  }
  statusSelect.onchange = () => {
    if (state) state.board.status = statusSelect.value as Status;
  };
  el<HTMLButtonElement>("annotate-component").onclick = async () => {
    if (!state) return;
    const component = el<HTMLInputElement>("component-input").value.trim();
    if (!component) return notify("enter a component id");
    state.board.note = el<HTMLInputElement>("note-input").value;
    try {
      const id = await state.board.annotateComponents(state.currentImage, [component]);
      notify(`annotation ${id} saved`);
    } catch (err) {
      notify(String(err));
    }
  };
}

function notify(message: string): void {
  el<HTMLDivElement>("notice").textContent = message;
}

boot().catch((err) => notify(`failed to load project: ${err}`));
