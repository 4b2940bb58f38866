/** In-memory stand-in for the session service, speaking its wire format.
 *
 * Scripted for tests: a warehouse of a few parts, deterministic rankings
 * per open slot, optional one-shot stale-revision injection on choose.
 */

import type {
  Candidate,
  CandidatePage,
  CreateSessionRequest,
  PartEntry,
  SessionState,
} from "../src/types.js";

interface MockPart {
  part_id: number;
  part_label: number;
  part_label_name: string;
  points: number[][];
  axis: number[];
  scale: number;
}

function rod(n: number, along: number): number[][] {
  const pts: number[][] = [];
  for (let i = 0; i < n; i++) {
    const t = (i / (n - 1)) * 2 - 1;
    const p = [0.02 * Math.sin(i), 0.02 * Math.cos(i * 1.7), 0.02 * Math.sin(i * 2.3)];
    p[along] = t;
    pts.push(p);
  }
  return pts;
}

export class MockServer {
  warehouse: MockPart[] = [
    { part_id: 11, part_label: 0, part_label_name: "chair/leg", points: rod(40, 2), axis: [0, 0, 1], scale: 0.22 },
    { part_id: 12, part_label: 0, part_label_name: "chair/leg", points: rod(40, 2), axis: [0, 0, 1], scale: 0.21 },
    { part_id: 21, part_label: 1, part_label_name: "chair/seat", points: rod(40, 0), axis: [1, 0, 0], scale: 0.3 },
    { part_id: 22, part_label: 1, part_label_name: "chair/seat", points: rod(40, 0), axis: [1, 0, 0], scale: 0.31 },
    { part_id: 31, part_label: 2, part_label_name: "table/top", points: rod(40, 1), axis: [0, 1, 0], scale: 0.4 },
  ];

  session: {
    id: string;
    revision: number;
    payload: CreateSessionRequest;
    filled: boolean[];
    chosen: { slot: number; part_id: number; suitability: number; shown: number[] }[];
  } | null = null;

  /** when set, the next choose fails once with stale_revision */
  failNextChooseWithConflict = false;
  requests: string[] = [];

  private ranking(slot: number, k: number): Candidate[] {
    // deterministic: slot 0 prefers legs, slot 1 prefers seats
    const preferred = slot === 0 ? 0 : 1;
    const scored = this.warehouse.map((p, i) => ({
      part: p,
      score: (p.part_label === preferred ? 0.9 : 0.4) - 0.01 * i - 0.002 * slot,
    }));
    scored.sort((a, b) => b.score - a.score || a.part.part_id - b.part.part_id);
    return scored.slice(0, k).map(({ part, score }, i) => ({
      part_id: part.part_id,
      rank: i + 1,
      suitability: score,
      logit: score * 10,
      part_label: part.part_label,
      part_label_name: part.part_label_name,
      pose: {
        centroid: this.session!.payload.slots[slot].centroid,
        axis: this.session!.payload.slots[slot].axis ?? null,
        scale: this.session!.payload.slots[slot].scale ?? part.scale,
      },
    }));
  }

  private mergedRanking(k: number): Candidate[] {
    const open = this.session!.filled
      .map((done, i) => (done ? -1 : i))
      .filter((i) => i >= 0);
    const per = open.map((slot) => ({ slot, list: this.ranking(slot, k) }));
    const merged: (Candidate & { slot: number })[] = [];
    for (let round = 0; merged.length < k && round < k; round++) {
      for (const { slot, list } of per) {
        if (round < list.length && merged.length < k) {
          merged.push({ ...list[round], slot });
        }
      }
    }
    return merged.map((c, i) => ({ ...c, rank: i + 1 }));
  }

  private stateBody(): SessionState {
    const s = this.session!;
    const parts: PartEntry[] = s.payload.parts.map((p, i) => ({
      part_id: null,
      source: "query",
      part_label: null,
      centroid: [0, 0, 0],
      scale: 0.3,
      points: p.points,
    }));
    for (const choice of s.chosen) {
      const donor = this.warehouse.find((w) => w.part_id === choice.part_id)!;
      parts.push({
        part_id: donor.part_id,
        source: "chosen",
        part_label: donor.part_label,
        part_label_name: donor.part_label_name,
        centroid: s.payload.slots[choice.slot].centroid,
        scale: s.payload.slots[choice.slot].scale ?? donor.scale,
        points: donor.points,
      });
    }
    const open = s.filled.map((done, i) => (done ? -1 : i)).filter((i) => i >= 0);
    return {
      session_id: s.id,
      revision: s.revision,
      class_id: s.payload.class_id,
      class_name: "chair",
      completed: open.length === 0,
      active_slot: open.length ? open[0] : null,
      slots: s.payload.slots.map((slot, i) => ({
        centroid: slot.centroid,
        axis: slot.axis ?? null,
        scale: slot.scale ?? null,
        filled: s.filled[i],
      })) as SessionState["slots"],
      parts,
      history: s.chosen.map((c, i) => ({
        slot: c.slot,
        shown: c.shown,
        chosen: c.part_id,
        suitability: c.suitability,
      })),
    };
  }

  private json(status: number, body: unknown): Response {
    return new Response(JSON.stringify(body), {
      status,
      headers: { "content-type": "application/json" },
    });
  }

  fetch = async (url: string, init?: RequestInit): Promise<Response> => {
    this.requests.push(`${init?.method ?? "GET"} ${url}`);
    const method = init?.method ?? "GET";

    if (method === "POST" && url.endsWith("/v1/sessions")) {
      const payload = JSON.parse(String(init!.body)) as CreateSessionRequest;
      if (!payload.parts?.length) {
        return this.json(400, { code: "validation", message: "too short", field: "parts" });
      }
      this.session = {
        id: "mock-session-1",
        revision: 1,
        payload,
        filled: payload.slots.map(() => false),
        chosen: [],
      };
      return this.json(201, { session_id: this.session.id, revision: 1, completed: false });
    }

    if (!this.session || !url.includes(this.session.id)) {
      const partMatch = url.match(/\/v1\/warehouse\/parts\/(\d+)$/);
      if (partMatch) {
        const part = this.warehouse.find((p) => p.part_id === Number(partMatch[1]));
        if (!part) {
          return this.json(404, { code: "not_found", message: "unknown part" });
        }
        return this.json(200, {
          part_id: part.part_id,
          object_class: 0,
          part_label: part.part_label,
          part_label_name: part.part_label_name,
          points: part.points,
          pose: { centroid: [0, 0, 0], scale: part.scale, axis: part.axis, axis_kind: 0 },
        });
      }
      return this.json(404, { code: "not_found", message: "unknown session" });
    }

    if (method === "GET" && /\/candidates\?k=\d+$/.test(url)) {
      const k = Number(url.split("k=")[1]);
      const body: CandidatePage = {
        session_id: this.session.id,
        revision: this.session.revision,
        completed: this.session.filled.every(Boolean),
        candidates: this.session.filled.every(Boolean) ? [] : this.mergedRanking(k),
      };
      return this.json(200, body);
    }

    if (method === "GET") {
      return this.json(200, this.stateBody());
    }

    if (method === "POST" && url.endsWith("/selection")) {
      const { part_id, revision } = JSON.parse(String(init!.body));
      if (this.failNextChooseWithConflict) {
        this.failNextChooseWithConflict = false;
        this.session.revision += 1; // someone else moved the session
        return this.json(409, { code: "stale_revision", message: "revision is stale" });
      }
      if (revision !== this.session.revision) {
        return this.json(409, { code: "stale_revision", message: "revision is stale" });
      }
      const shown = this.mergedRanking(10);
      const hit = shown.find((c) => c.part_id === part_id) as (Candidate & { slot?: number }) | undefined;
      if (!hit) {
        return this.json(422, { code: "invalid_choice", message: "part not in ranking" });
      }
      const slot = (hit as { slot?: number }).slot ?? 0;
      this.session.filled[slot] = true;
      this.session.chosen.push({
        slot,
        part_id,
        suitability: hit.suitability,
        shown: shown.map((c) => c.part_id),
      });
      this.session.revision += 1;
      return this.json(200, {
        session_id: this.session.id,
        revision: this.session.revision,
        completed: this.session.filled.every(Boolean),
      });
    }

    return this.json(404, { code: "not_found", message: `no route for ${method} ${url}` });
  };
}
