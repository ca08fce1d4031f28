/**
 * Canvas drawing helpers kept DOM-light so they stay unit-testable:
 * polygon paths, residual badges, and region clipping for 4D reveals.
 */

import { OverlayRecord } from "./api.js";
import { STATUS_CSS, Status } from "./board.js";

export interface Path2DLike {
  moveTo(x: number, y: number): void;
  lineTo(x: number, y: number): void;
  closePath(): void;
}

export function polygonPath(vertices: number[][], path: Path2DLike, scale = 1): void {
  if (vertices.length === 0) return;
  path.moveTo(vertices[0][0] * scale, vertices[0][1] * scale);
  for (let i = 1; i < vertices.length; i++) {
    path.lineTo(vertices[i][0] * scale, vertices[i][1] * scale);
  }
  path.closePath();
}

export function overlayFillStyle(record: OverlayRecord): string {
  const [r, g, b] = record.color.map((v) => Math.round(v * 255));
  return `rgba(${r}, ${g}, ${b}, ${record.fill_alpha})`;
}

export function statusStroke(status: string): string {
  return STATUS_CSS[(status as Status)] ?? "rgb(128, 128, 128)";
}

/** Residual badge text: worst pick error, one decimal. */
export function residualLabel(residuals: number[]): string {
  if (residuals.length === 0) return "no picks";
  const worst = Math.max(...residuals);
  return `max residual ${worst.toFixed(1)} px`;
}

export function residualLevel(residuals: number[]): "good" | "warn" | "bad" {
  if (residuals.length === 0) return "bad";
  const worst = Math.max(...residuals);
  if (worst < 2.0) return "good";
  if (worst < 6.0) return "warn";
  return "bad";
}

/** Point-in-polygon (even-odd), for reveal-region hit tests. */
export function insidePolygon(polygon: Array<[number, number]>, x: number, y: number): boolean {
  let inside = false;
  for (let i = 0, j = polygon.length - 1; i < polygon.length; j = i++) {
    const [xi, yi] = polygon[i];
    const [xj, yj] = polygon[j];
    const crosses = (yi <= y) !== (yj <= y);
    if (crosses && x < xi + ((y - yi) * (xj - xi)) / (yj - yi)) {
      inside = !inside;
    }
  }
  return inside;
}
