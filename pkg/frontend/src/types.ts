/** Wire types of the session service (JSON over HTTP, /v1). */

export type Vec3 = [number, number, number];

export interface SlotInfo {
  centroid: number[];
  axis: number[] | null;
  scale: number | null;
}

export interface PartEntry {
  part_id: number | null;
  source: "query" | "chosen";
  part_label: number | null;
  part_label_name?: string;
  centroid: number[];
  scale: number;
  points?: number[][];
}

export interface ChoiceRecord {
  slot: number;
  shown: number[];
  chosen: number;
  suitability: number;
}

export interface SessionState {
  session_id: string;
  revision: number;
  class_id: number;
  class_name: string;
  completed: boolean;
  active_slot: number | null;
  slots: SlotInfo[];
  parts: PartEntry[];
  history: ChoiceRecord[];
}

export interface CandidatePose {
  centroid: number[];
  axis: number[] | null;
  scale: number;
}

export interface Candidate {
  part_id: number;
  rank: number;
  suitability: number;
  logit: number;
  part_label: number;
  part_label_name: string;
  pose: CandidatePose;
}

export interface CandidatePage {
  session_id: string;
  revision: number;
  completed: boolean;
  candidates: Candidate[];
}

export interface PartGeometry {
  part_id: number;
  object_class: number;
  part_label: number;
  part_label_name: string;
  points: number[][];
  pose: { centroid: number[]; scale: number; axis: number[]; axis_kind: number };
}

export interface CreateSessionRequest {
  class_id: number;
  parts: { points: number[][] }[];
  slots: { centroid: number[]; axis?: number[] | null; scale?: number | null }[];
}

export interface SessionSummary {
  session_id: string;
  revision: number;
  completed: boolean;
}
