/** Workbench shell: session screen, 3D view, gallery, history. */

import { ApiClient } from "./api.js";
import { demoSession } from "./demo.js";
import { GalleryPanel, HistoryPanel } from "./panels.js";
import { ScatterView } from "./render.js";
import { buildScene } from "./scene.js";
import { SessionStore } from "./store.js";
import type { CreateSessionRequest } from "./types.js";

export class App {
  readonly store: SessionStore;
  readonly view: ScatterView;
  readonly gallery: GalleryPanel;
  readonly history: HistoryPanel;
  readonly notice: HTMLElement;

  constructor(root: HTMLElement, api: ApiClient, k = 10) {
    const doc = root.ownerDocument;
    this.store = new SessionStore(api, k);

    const form = doc.createElement("div");
    form.className = "session-form";
    const payloadBox = doc.createElement("textarea");
    payloadBox.className = "payload";
    payloadBox.placeholder = "paste a create-session payload (JSON)";
    const createBtn = doc.createElement("button");
    createBtn.className = "create";
    createBtn.textContent = "create session";
    const demoBtn = doc.createElement("button");
    demoBtn.className = "demo";
    demoBtn.textContent = "load demo chair";
    // slot markers stay editable until the first ranking: nudging a marker
    // rewrites the payload that the create call will send
    const slotEditor = doc.createElement("div");
    slotEditor.className = "slot-editor";
    const syncSlotEditor = () => {
      slotEditor.textContent = "";
      let payload: CreateSessionRequest;
      try {
        payload = JSON.parse(payloadBox.value);
      } catch {
        return;
      }
      (payload.slots ?? []).forEach((slot, i) => {
        const row = doc.createElement("div");
        row.className = "slot-row";
        row.dataset.slot = String(i);
        const tag = doc.createElement("span");
        tag.textContent = `slot ${i}: `;
        row.appendChild(tag);
        slot.centroid.forEach((value, axis) => {
          const input = doc.createElement("input");
          input.type = "number";
          input.step = "0.05";
          input.value = String(value);
          input.className = `slot-${i}-axis-${axis}`;
          input.addEventListener("change", () => {
            const fresh = JSON.parse(payloadBox.value) as CreateSessionRequest;
            fresh.slots[i].centroid[axis] = Number(input.value);
            payloadBox.value = JSON.stringify(fresh);
          });
          row.appendChild(input);
        });
        slotEditor.appendChild(row);
      });
    };
    payloadBox.addEventListener("input", syncSlotEditor);
    form.append(payloadBox, createBtn, demoBtn, slotEditor);

    this.notice = doc.createElement("div");
    this.notice.className = "notice";

    const canvas = doc.createElement("canvas");
    canvas.className = "viewer";
    canvas.width = 640;
    canvas.height = 480;
    this.view = new ScatterView(canvas);

    this.gallery = new GalleryPanel(doc, this.store);
    this.history = new HistoryPanel(doc, this.store);

    const main = doc.createElement("div");
    main.className = "workbench";
    main.append(canvas, this.gallery.root, this.history.root);
    root.append(form, this.notice, main);

    createBtn.addEventListener("click", () => {
      let payload: CreateSessionRequest;
      try {
        payload = JSON.parse(payloadBox.value);
      } catch (err) {
        this.notice.textContent = `invalid payload JSON: ${err}`;
        this.notice.classList.add("error");
        return;
      }
      void this.store.createSession(payload).catch(() => undefined);
    });
    demoBtn.addEventListener("click", () => {
      payloadBox.value = JSON.stringify(demoSession(0));
      syncSlotEditor();
      void this.store.createSession(JSON.parse(payloadBox.value)).catch(() => undefined);
    });

    this.store.subscribe((state) => {
      this.notice.textContent = state.notice ?? "";
      this.notice.classList.toggle("error", state.phase === "error");
      this.gallery.render(state);
      this.history.render(state);
      this.view.draw(buildScene(state));
    });
  }
}
