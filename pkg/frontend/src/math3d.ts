/** Small vector/rotation helpers for client-side part placement. */

import type { Vec3 } from "./types.js";

export type { Vec3 };

export function norm(v: Vec3): number {
  return Math.sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
}

export function normalize(v: Vec3): Vec3 {
  const n = norm(v);
  return n > 0 ? [v[0] / n, v[1] / n, v[2] / n] : [0, 0, 1];
}

export function cross(a: Vec3, b: Vec3): Vec3 {
  return [
    a[1] * b[2] - a[2] * b[1],
    a[2] * b[0] - a[0] * b[2],
    a[0] * b[1] - a[1] * b[0],
  ];
}

export function dot(a: Vec3, b: Vec3): number {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}

export type Mat3 = [Vec3, Vec3, Vec3]; // row-major

export const IDENTITY: Mat3 = [
  [1, 0, 0],
  [0, 1, 0],
  [0, 0, 1],
];

export function apply(m: Mat3, v: Vec3): Vec3 {
  return [dot(m[0], v), dot(m[1], v), dot(m[2], v)];
}

/** Rotation taking unit vector a onto unit vector b (Rodrigues form). */
export function rotationBetween(aRaw: Vec3, bRaw: Vec3): Mat3 {
  const a = normalize(aRaw);
  const b = normalize(bRaw);
  const c = dot(a, b);
  if (c > 1 - 1e-12) {
    return IDENTITY;
  }
  if (c < -1 + 1e-12) {
    // pi about an axis perpendicular to a
    const pick: Vec3 = Math.abs(a[0]) <= Math.abs(a[1]) && Math.abs(a[0]) <= Math.abs(a[2])
      ? [1, 0, 0]
      : Math.abs(a[1]) <= Math.abs(a[2]) ? [0, 1, 0] : [0, 0, 1];
    const u = normalize(cross(a, pick));
    const m: Mat3 = [[0, 0, 0], [0, 0, 0], [0, 0, 0]];
    for (let i = 0; i < 3; i++) {
      for (let j = 0; j < 3; j++) {
        m[i][j] = 2 * u[i] * u[j] - (i === j ? 1 : 0);
      }
    }
    return m;
  }
  const v = cross(a, b);
  const s = 1 / (1 + c);
  const vx: Mat3 = [
    [0, -v[2], v[1]],
    [v[2], 0, -v[0]],
    [-v[1], v[0], 0],
  ];
  const m: Mat3 = [[0, 0, 0], [0, 0, 0], [0, 0, 0]];
  for (let i = 0; i < 3; i++) {
    for (let j = 0; j < 3; j++) {
      let vx2 = 0;
      for (let k = 0; k < 3; k++) {
        vx2 += vx[i][k] * vx[k][j];
      }
      m[i][j] = (i === j ? 1 : 0) + vx[i][j] + vx2 * s;
    }
  }
  return m;
}

/**
 * Place a normalized part cloud at a slot: rotate its saved axis onto the
 * slot axis (when both exist), scale, translate. Mirrors the server's
 * placement so the what-if preview needs no extra round trip.
 */
export function placePoints(
  points: number[][],
  partAxis: number[] | null,
  slot: { centroid: number[]; axis: number[] | null; scale: number },
): number[][] {
  const rot = partAxis && slot.axis
    ? rotationBetween(partAxis as Vec3, slot.axis as Vec3)
    : IDENTITY;
  const s = slot.scale;
  const c = slot.centroid;
  return points.map((p) => {
    const r = apply(rot, p as Vec3);
    return [r[0] * s + c[0], r[1] * s + c[1], r[2] * s + c[2]];
  });
}

export interface Camera {
  yaw: number;
  pitch: number;
  zoom: number;
}

/** Orthographic projection of a world point for the scatter canvas. */
export function project(p: Vec3, camera: Camera): { x: number; y: number; depth: number } {
  const cy = Math.cos(camera.yaw);
  const sy = Math.sin(camera.yaw);
  const cp = Math.cos(camera.pitch);
  const sp = Math.sin(camera.pitch);
  const x1 = cy * p[0] + sy * p[1];
  const y1 = -sy * p[0] + cy * p[1];
  const z1 = p[2];
  const y2 = cp * y1 + sp * z1;
  const z2 = -sp * y1 + cp * z1;
  return { x: x1 * camera.zoom, y: -z2 * camera.zoom, depth: y2 };
}
