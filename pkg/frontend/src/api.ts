/** Typed client for the session service, with optimistic-concurrency retry. */

import type {
  Candidate,
  CandidatePage,
  CreateSessionRequest,
  PartGeometry,
  SessionState,
  SessionSummary,
} from "./types.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
    readonly field?: string,
  ) {
    super(message);
  }
}

async function parseError(response: Response): Promise<ApiError> {
  let code = "unknown";
  let message = response.statusText;
  let field: string | undefined;
  try {
    const body = await response.json();
    code = body.code ?? code;
    message = body.message ?? message;
    field = body.field;
  } catch {
    // non-JSON error body; keep the status text
  }
  return new ApiError(response.status, code, message, field);
}

export class ApiClient {
  constructor(
    private readonly baseUrl: string = "",
    private readonly fetchFn: FetchLike = (url, init) => fetch(url, init),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchFn(this.baseUrl + path, init);
    if (!response.ok) {
      throw await parseError(response);
    }
    return (await response.json()) as T;
  }

  createSession(payload: CreateSessionRequest): Promise<SessionSummary> {
    return this.request("/v1/sessions", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(payload),
    });
  }

  getState(sessionId: string): Promise<SessionState> {
    return this.request(`/v1/sessions/${sessionId}`);
  }

  getCandidates(sessionId: string, k: number): Promise<CandidatePage> {
    return this.request(`/v1/sessions/${sessionId}/candidates?k=${k}`);
  }

  choose(sessionId: string, partId: number, revision: number): Promise<SessionSummary> {
    return this.request(`/v1/sessions/${sessionId}/selection`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ part_id: partId, revision }),
    });
  }

  getPart(partId: number): Promise<PartGeometry> {
    return this.request(`/v1/warehouse/parts/${partId}`);
  }
}

export interface ChooseOutcome {
  summary: SessionSummary;
  retried: boolean;
  /** candidates of the slot the choice finally applied to */
  page: CandidatePage;
}

/**
 * Choose with stale-revision recovery: on conflict, refetch the ranking
 * (which carries the server's current revision) and retry as long as the
 * part is still offered. The caller always ends up consistent with the
 * server, whether or not the choice ultimately landed.
 */
export async function chooseWithRetry(
  api: ApiClient,
  sessionId: string,
  partId: number,
  revision: number,
  k: number,
  maxAttempts = 3,
): Promise<ChooseOutcome> {
  let attempt = 0;
  let currentRevision = revision;
  let retried = false;
  for (;;) {
    try {
      const summary = await api.choose(sessionId, partId, currentRevision);
      const page = await api.getCandidates(sessionId, k);
      return { summary, retried, page };
    } catch (err) {
      attempt += 1;
      if (!(err instanceof ApiError) || err.code !== "stale_revision" || attempt >= maxAttempts) {
        throw err;
      }
      retried = true;
      const fresh = await api.getCandidates(sessionId, k);
      if (fresh.completed || !fresh.candidates.some((c: Candidate) => c.part_id === partId)) {
        // the world moved on; surface the fresh ranking instead of forcing it
        const summary: SessionSummary = {
          session_id: sessionId,
          revision: fresh.revision,
          completed: fresh.completed,
        };
        return { summary, retried, page: fresh };
      }
      currentRevision = fresh.revision;
    }
  }
}
