/** Deterministic demo fixture: a chair-like object with five parts present
 * and two slots to fill (a missing leg and the seat). */

import type { CreateSessionRequest } from "./types.js";

function box(cx: number, cy: number, cz: number, ex: number, ey: number, ez: number,
             n: number, salt: number): number[][] {
  const pts: number[][] = [];
  let state = 1234567 + salt;
  const rand = () => {
    // xorshift; deterministic without seeding APIs
    state ^= state << 13;
    state ^= state >>> 17;
    state ^= state << 5;
    return ((state >>> 0) % 100000) / 100000 - 0.5;
  };
  for (let i = 0; i < n; i++) {
    const face = i % 6;
    const u = rand();
    const v = rand();
    const p = [cx + u * ex, cy + v * ey, cz + (face % 2 === 0 ? 0.5 : -0.5) * ez];
    if (face < 2) {
      pts.push([cx + (face === 0 ? 0.5 : -0.5) * ex, cy + u * ey, cz + v * ez]);
    } else if (face < 4) {
      pts.push([cx + u * ex, cy + (face === 2 ? 0.5 : -0.5) * ey, cz + v * ez]);
    } else {
      pts.push(p);
    }
  }
  return pts;
}

export function demoSession(classId: number): CreateSessionRequest {
  const seatH = 0.45;
  const w = 0.48;
  const legEx = 0.045;
  const parts = [
    box(0, -w / 2, seatH + 0.3, w, 0.03, 0.5, 160, 1), // back
    box(-0.42 * w, -0.42 * w, seatH / 2, legEx, legEx, seatH, 120, 2),
    box(0.42 * w, -0.42 * w, seatH / 2, legEx, legEx, seatH, 120, 3),
    box(0.42 * w, 0.42 * w, seatH / 2, legEx, legEx, seatH, 120, 4),
    box(0, 0.1, seatH + 0.02, 0.2, 0.12, 0.02, 140, 5), // cushion remnant
  ];
  return {
    class_id: classId,
    parts: parts.map((points) => ({ points })),
    slots: [
      { centroid: [-0.42 * w, 0.42 * w, seatH / 2], axis: [0, 0, 1], scale: 0.24 },
      { centroid: [0, 0, seatH], axis: [0, 0, 1], scale: 0.34 },
    ],
  };
}
