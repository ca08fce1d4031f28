import { describe, expect, it } from "vitest";

import {
  cross,
  fitOrbit,
  norm,
  normalize,
  orbitEye,
  orbitRotate,
  orbitZoom,
  pickRay,
  projectPoints,
  sub,
  Vec3,
} from "../src/math.js";

describe("orbit camera", () => {
  const state = { target: [0, 0, 0] as Vec3, azimuth: 0, elevation: 0, distance: 5 };

  it("places the eye on the orbit sphere", () => {
    const eye = orbitEye(state);
    expect(norm(eye)).toBeCloseTo(5, 10);
    expect(eye[0]).toBeCloseTo(5, 10);
  });

  it("clamps elevation shy of the poles", () => {
    const up = orbitRotate(state, 0, 10);
    expect(up.elevation).toBeLessThan(Math.PI / 2);
    const down = orbitRotate(state, 0, -10);
    expect(down.elevation).toBeGreaterThan(-Math.PI / 2);
  });

  it("zoom keeps a positive distance", () => {
    let s = state;
    for (let i = 0; i < 50; i++) s = orbitZoom(s, 0.5);
    expect(s.distance).toBeGreaterThan(0);
  });
});

describe("projection and picking", () => {
  const state = { target: [0, 0, 0] as Vec3, azimuth: Math.PI, elevation: 0, distance: 8 };

  it("projects the target to the canvas center", () => {
    const [p] = projectPoints(state, 400, 640, 480, [[0, 0, 0]]);
    expect(p).not.toBeNull();
    expect(p![0]).toBeCloseTo(320, 6);
    expect(p![1]).toBeCloseTo(240, 6);
  });

  it("returns null behind the camera", () => {
    const [p] = projectPoints(state, 400, 640, 480, [[-20, 0, 0]]);
    expect(p).toBeNull();
  });

  it("pick ray through the center hits the target", () => {
    const ray = pickRay(state, 400, 640, 480, 320, 240);
    const toTarget = normalize(sub(state.target, ray.origin));
    expect(norm(cross(ray.direction, toTarget))).toBeLessThan(1e-9);
  });

  it("projection of a ray point lands on the picked pixel", () => {
    const ray = pickRay(state, 400, 640, 480, 411, 157);
    const point: Vec3 = [
      ray.origin[0] + 3 * ray.direction[0],
      ray.origin[1] + 3 * ray.direction[1],
      ray.origin[2] + 3 * ray.direction[2],
    ];
    const [p] = projectPoints(state, 400, 640, 480, [point]);
    expect(p![0]).toBeCloseTo(411, 6);
    expect(p![1]).toBeCloseTo(157, 6);
  });
});

describe("fitOrbit", () => {
  it("frames the bounding box", () => {
    const verts: Vec3[] = [
      [-5, -5, 0],
      [5, 5, 10],
    ];
    const orbit = fitOrbit(verts);
    expect(orbit.target).toEqual([0, 0, 5]);
    expect(orbit.distance).toBeGreaterThan(norm([5, 5, 5]));
  });

  it("tolerates an empty mesh", () => {
    const orbit = fitOrbit([]);
    expect(orbit.distance).toBeGreaterThan(0);
  });
});
