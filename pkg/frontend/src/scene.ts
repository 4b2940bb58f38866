/** Pure scene assembly: view state in, drawable items out.
 *
 * Kept free of canvas calls so tests can assert exactly what would be
 * drawn (notably: hover adds exactly one preview entry).
 */

import { placePoints } from "./math3d.js";
import type { ViewState } from "./store.js";

export const PART_PALETTE = [
  "#4878a8", "#a85450", "#50a878", "#a89050", "#8058a8",
  "#50a0a8", "#a85088", "#78a850", "#5868a8", "#a87850",
];

export interface SceneItem {
  kind: "part" | "preview" | "slot" | "slot-active";
  points: number[][];
  color: string;
  label: string;
}

export function buildScene(state: ViewState): SceneItem[] {
  const session = state.session;
  if (!session) {
    return [];
  }
  const items: SceneItem[] = [];
  // during step-back, replay only the parts that existed before that step
  const nQuery = session.parts.length - session.history.length;
  const visibleParts = state.viewingStep === null
    ? session.parts
    : session.parts.slice(0, nQuery + state.viewingStep);
  visibleParts.forEach((part, i) => {
    if (part.points && part.points.length) {
      items.push({
        kind: "part",
        points: part.points,
        color: PART_PALETTE[i % PART_PALETTE.length],
        label: part.part_label_name ?? `part ${i}`,
      });
    }
  });
  session.slots.forEach((slot, i) => {
    const active = state.viewingStep === null
      ? session.active_slot === i
      : state.viewingStep === i;
    items.push({
      kind: active ? "slot-active" : "slot",
      points: [slot.centroid],
      color: active ? "#d04840" : "#909090",
      label: `slot ${i}`,
    });
  });
  if (state.preview && state.viewingStep === null) {
    const pose = state.preview.candidate.pose;
    items.push({
      kind: "preview",
      points: placePoints(state.preview.points, state.preview.partAxis, {
        centroid: pose.centroid,
        axis: pose.axis,
        scale: pose.scale,
      }),
      color: "#e0a030",
      label: `preview ${state.preview.candidate.part_id}`,
    });
  }
  return items;
}
