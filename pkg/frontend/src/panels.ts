/** Candidate gallery and history panels: thin DOM over the store. */

import type { SessionStore, ViewState } from "./store.js";
import type { Candidate } from "./types.js";

export class GalleryPanel {
  readonly root: HTMLElement;

  constructor(doc: Document, private readonly store: SessionStore) {
    this.root = doc.createElement("div");
    this.root.className = "gallery";
  }

  render(state: ViewState) {
    const doc = this.root.ownerDocument;
    this.root.textContent = "";
    const heading = doc.createElement("h3");
    heading.textContent = state.phase === "complete"
      ? "object complete"
      : state.viewingStep !== null
        ? `step ${state.viewingStep + 1} ranking (read-only)`
        : `candidates for slot ${state.session?.active_slot ?? "-"}`;
    this.root.appendChild(heading);

    const shown: Candidate[] = state.viewingStep !== null && state.session
      ? [] // past rankings are listed in the history panel by id
      : state.gallery;
    // server order, verbatim: the UI never reorders or filters rankings
    for (const candidate of shown) {
      this.root.appendChild(this.entry(doc, candidate, state));
    }
  }

  private entry(doc: Document, candidate: Candidate, state: ViewState): HTMLElement {
    const item = doc.createElement("div");
    item.className = "gallery-item";
    item.dataset.partId = String(candidate.part_id);
    const badge = doc.createElement("span");
    badge.className = "badge";
    badge.textContent = candidate.suitability.toFixed(4);
    const label = doc.createElement("span");
    label.className = "label";
    label.textContent = `#${candidate.rank} ${candidate.part_label_name} (part ${candidate.part_id})`;
    item.appendChild(label);
    item.appendChild(badge);
    const readOnly = state.viewingStep !== null;
    if (!readOnly) {
      item.addEventListener("mouseenter", () => {
        void this.store.previewCandidate(candidate);
      });
      item.addEventListener("mouseleave", () => {
        this.store.clearPreview();
      });
      item.addEventListener("click", () => {
        void this.store.choose(candidate);
      });
    } else {
      item.classList.add("disabled");
    }
    return item;
  }
}

export class HistoryPanel {
  readonly root: HTMLElement;

  constructor(doc: Document, private readonly store: SessionStore) {
    this.root = doc.createElement("div");
    this.root.className = "history";
  }

  render(state: ViewState) {
    const doc = this.root.ownerDocument;
    this.root.textContent = "";
    const heading = doc.createElement("h3");
    heading.textContent = "history";
    this.root.appendChild(heading);
    const history = state.session?.history ?? [];
    history.forEach((record, i) => {
      const row = doc.createElement("div");
      row.className = "history-row";
      row.dataset.step = String(i);
      row.textContent = `step ${i + 1}: slot ${record.slot} -> part ${record.chosen} `
        + `(score ${record.suitability.toFixed(4)})`;
      row.addEventListener("click", () => {
        this.store.viewStep(state.viewingStep === i ? null : i);
      });
      if (state.viewingStep === i) {
        row.classList.add("viewing");
      }
      this.root.appendChild(row);
    });
    if (history.length) {
      const exportBtn = doc.createElement("button");
      exportBtn.className = "export";
      exportBtn.textContent = "export replay JSON";
      exportBtn.addEventListener("click", () => {
        const blob = this.store.exportReplay();
        const area = doc.createElement("textarea");
        area.className = "export-output";
        area.value = blob;
        this.root.appendChild(area);
      });
      this.root.appendChild(exportBtn);
    }
  }
}
