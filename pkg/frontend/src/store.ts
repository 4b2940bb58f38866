/** Session view-state container: one source of truth the panels render from.
 *
 * Two hard rules live here. Rankings coming from the server are stored and
 * rendered verbatim (never reordered or filtered), and every mutation
 * carries the revision of the state it was decided on, so the server can
 * reject stale clicks and the store can converge by refetching.
 */

import { ApiClient, chooseWithRetry } from "./api.js";
import type { Candidate, CreateSessionRequest, SessionState } from "./types.js";

export interface Preview {
  candidate: Candidate;
  points: number[][];
  partAxis: number[] | null;
}

export interface ViewState {
  phase: "setup" | "loading" | "active" | "complete" | "error";
  session: SessionState | null;
  gallery: Candidate[];
  galleryRevision: number;
  preview: Preview | null;
  /** history step shown read-only; null means the live frontier */
  viewingStep: number | null;
  notice: string | null;
}

export type Listener = (state: ViewState) => void;

export class SessionStore {
  state: ViewState = {
    phase: "setup",
    session: null,
    gallery: [],
    galleryRevision: 0,
    preview: null,
    viewingStep: null,
    notice: null,
  };

  private listeners: Listener[] = [];

  constructor(
    private readonly api: ApiClient,
    private readonly k: number = 10,
  ) {}

  subscribe(fn: Listener): () => void {
    this.listeners.push(fn);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== fn);
    };
  }

  private emit() {
    for (const fn of this.listeners) {
      fn(this.state);
    }
  }

  private patch(partial: Partial<ViewState>) {
    this.state = { ...this.state, ...partial };
    this.emit();
  }

  async createSession(payload: CreateSessionRequest): Promise<void> {
    this.patch({ phase: "loading", notice: null });
    try {
      const summary = await this.api.createSession(payload);
      await this.refresh(summary.session_id);
    } catch (err) {
      this.patch({ phase: "error", notice: describe(err) });
      throw err;
    }
  }

  async refresh(sessionId?: string): Promise<void> {
    const sid = sessionId ?? this.state.session?.session_id;
    if (!sid) {
      return;
    }
    const session = await this.api.getState(sid);
    let gallery: Candidate[] = [];
    let galleryRevision = session.revision;
    if (!session.completed) {
      const page = await this.api.getCandidates(sid, this.k);
      gallery = page.candidates;
      galleryRevision = page.revision;
    }
    this.patch({
      phase: session.completed ? "complete" : "active",
      session,
      gallery,
      galleryRevision,
      preview: null,
      viewingStep: null,
    });
  }

  /** Hover: stage exactly one tinted extra part, placed client-side. */
  async previewCandidate(candidate: Candidate): Promise<void> {
    const geometry = await this.api.getPart(candidate.part_id);
    // hover may already be elsewhere by the time geometry arrives
    if (this.state.viewingStep !== null) {
      return;
    }
    this.patch({
      preview: { candidate, points: geometry.points, partAxis: geometry.pose.axis },
    });
  }

  clearPreview(): void {
    if (this.state.preview) {
      this.patch({ preview: null });
    }
  }

  async choose(candidate: Candidate): Promise<void> {
    const session = this.state.session;
    if (!session || this.state.viewingStep !== null) {
      return;
    }
    try {
      const outcome = await chooseWithRetry(
        this.api, session.session_id, candidate.part_id, this.state.galleryRevision, this.k);
      const fresh = await this.api.getState(session.session_id);
      this.patch({
        phase: fresh.completed ? "complete" : "active",
        session: fresh,
        gallery: outcome.page.candidates,
        galleryRevision: outcome.page.revision,
        preview: null,
        notice: outcome.retried ? "ranking had moved; synchronized with the server" : null,
      });
    } catch (err) {
      // converge to server state even when the choice was rejected
      await this.refresh(session.session_id);
      this.patch({ notice: describe(err) });
    }
  }

  /** Step-back: show an earlier ranking read-only. */
  viewStep(step: number | null): void {
    const session = this.state.session;
    if (step !== null && (!session || step < 0 || step >= session.history.length)) {
      return;
    }
    this.patch({ viewingStep: step, preview: null });
  }

  exportReplay(): string {
    const session = this.state.session;
    if (!session) {
      return "{}";
    }
    return JSON.stringify(
      {
        session_id: session.session_id,
        class_id: session.class_id,
        slots: session.slots,
        history: session.history,
      },
      null,
      1,
    );
  }
}

function describe(err: unknown): string {
  if (err instanceof Error) {
    return err.message;
  }
  return String(err);
}
