/**
 * Minimal 3D math for the mesh viewport: orbit camera, projection of mesh
 * edges onto the canvas, and pick-ray generation. The server refines picks
 * by raycasting the full mesh; this module only needs to be good enough to
 * aim.
 */

export type Vec3 = [number, number, number];

export function add(a: Vec3, b: Vec3): Vec3 {
  return [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
}

export function sub(a: Vec3, b: Vec3): Vec3 {
  return [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
}

export function scale(a: Vec3, s: number): Vec3 {
  return [a[0] * s, a[1] * s, a[2] * s];
}

export function dot(a: Vec3, b: Vec3): number {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}

export function cross(a: Vec3, b: Vec3): Vec3 {
  return [
    a[1] * b[2] - a[2] * b[1],
    a[2] * b[0] - a[0] * b[2],
    a[0] * b[1] - a[1] * b[0],
  ];
}

export function norm(a: Vec3): number {
  return Math.sqrt(dot(a, a));
}

export function normalize(a: Vec3): Vec3 {
  const n = norm(a);
  if (n === 0) throw new Error("cannot normalize a zero vector");
  return scale(a, 1 / n);
}

/** Orbit camera: azimuth/elevation around a target at a distance. */
export interface OrbitState {
  target: Vec3;
  azimuth: number; // radians
  elevation: number; // radians, clamped shy of the poles
  distance: number;
}

const MAX_ELEVATION = Math.PI / 2 - 0.01;

export function orbitEye(state: OrbitState): Vec3 {
  const ce = Math.cos(state.elevation);
  return add(state.target, [
    state.distance * ce * Math.cos(state.azimuth),
    state.distance * ce * Math.sin(state.azimuth),
    state.distance * Math.sin(state.elevation),
  ]);
}

export function orbitRotate(state: OrbitState, dAz: number, dEl: number): OrbitState {
  return {
    ...state,
    azimuth: state.azimuth + dAz,
    elevation: Math.max(-MAX_ELEVATION, Math.min(MAX_ELEVATION, state.elevation + dEl)),
  };
}

export function orbitZoom(state: OrbitState, factor: number): OrbitState {
  return { ...state, distance: Math.max(0.1, state.distance * factor) };
}

/** Camera basis rows (right, down, forward) for a world-up of +z. */
export function cameraBasis(state: OrbitState): { right: Vec3; down: Vec3; forward: Vec3; eye: Vec3 } {
  const eye = orbitEye(state);
  const forward = normalize(sub(state.target, eye));
  const right = normalize(cross(forward, [0, 0, 1]));
  const down = cross(forward, right);
  return { right, down, forward, eye };
}

/**
 * Project world points to canvas pixels (origin top-left) with a pinhole
 * of the given focal (pixels). Points behind the camera get null.
 */
export function projectPoints(
  state: OrbitState,
  focal: number,
  width: number,
  height: number,
  points: Vec3[],
): Array<[number, number] | null> {
  const { right, down, forward, eye } = cameraBasis(state);
  return points.map((p) => {
    const d = sub(p, eye);
    const z = dot(d, forward);
    if (z <= 1e-9) return null;
    const x = dot(d, right) / z;
    const y = dot(d, down) / z;
    return [focal * x + width / 2, focal * y + height / 2];
  });
}

/** The world-space ray through a canvas pixel. */
export function pickRay(
  state: OrbitState,
  focal: number,
  width: number,
  height: number,
  px: number,
  py: number,
): { origin: Vec3; direction: Vec3 } {
  const { right, down, forward, eye } = cameraBasis(state);
  const x = (px - width / 2) / focal;
  const y = (py - height / 2) / focal;
  const direction = normalize(
    add(add(scale(right, x), scale(down, y)), forward),
  );
  return { origin: eye, direction };
}

/** A reasonable starting orbit for a mesh bounding box. */
export function fitOrbit(vertices: Vec3[]): OrbitState {
  if (vertices.length === 0) {
    return { target: [0, 0, 0], azimuth: -Math.PI / 2, elevation: 0.3, distance: 10 };
  }
  const lo: Vec3 = [Infinity, Infinity, Infinity];
  const hi: Vec3 = [-Infinity, -Infinity, -Infinity];
  for (const v of vertices) {
    for (let i = 0; i < 3; i++) {
      lo[i] = Math.min(lo[i], v[i]);
      hi[i] = Math.max(hi[i], v[i]);
    }
  }
  const target: Vec3 = [(lo[0] + hi[0]) / 2, (lo[1] + hi[1]) / 2, (lo[2] + hi[2]) / 2];
  const radius = norm(sub(hi, lo)) / 2 || 1;
  return { target, azimuth: -Math.PI / 2, elevation: 0.35, distance: radius * 2.5 };
}
