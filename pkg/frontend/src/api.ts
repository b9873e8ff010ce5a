/** Typed client for the experiment service HTTP API.
 *
 * Transport failures are retried with exponential backoff; the server's
 * submission idempotency makes that safe. HTTP error responses are never
 * retried: they are deterministic answers, surfaced as ApiError with the
 * server's machine-readable code.
 */

export interface SessionInfo {
  session_id: string;
  participant_slot: number;
  phase: string;
  n_triplets: number;
  n_rating_words: number;
  consent_text: string;
}

export interface OddOneOutTrial {
  complete: false;
  trial_id: string;
  kind: "odd_one_out";
  words: string[];
  index: number;
  total: number;
  phase: "triplets";
}

export interface RatingTrial {
  complete: false;
  trial_id: string;
  kind: "rating";
  word: string;
  scale_min: number;
  scale_max: number;
  index: number;
  total: number;
  phase: "ratings";
}

export interface CompletedTrial {
  complete: true;
  phase: "done";
}

export type Trial = OddOneOutTrial | RatingTrial | CompletedTrial;

export interface Ack {
  accepted: boolean;
  trial_id: string;
  kind: string;
  index: number;
  total: number;
}

export interface ChoiceSubmission {
  trial_id: string;
  chosen: string;
  response_time_ms: number;
}

export interface RatingSubmission {
  trial_id: string;
  rating: number;
  response_time_ms: number;
}

export class ApiError extends Error {
  constructor(
    readonly code: string,
    message: string,
    readonly status: number,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

export interface ClientOptions {
  /** Retries for transport failures only (default 3). */
  retries?: number;
  /** First backoff delay; doubles per attempt (default 250 ms). */
  backoffMs?: number;
  fetchImpl?: typeof fetch;
  sleep?: (ms: number) => Promise<void>;
}

const defaultSleep = (ms: number) => new Promise<void>((r) => setTimeout(r, ms));

export class StudyClient {
  private readonly base: string;
  private readonly retries: number;
  private readonly backoffMs: number;
  private readonly fetchImpl: typeof fetch;
  private readonly sleep: (ms: number) => Promise<void>;

  constructor(baseUrl: string, options: ClientOptions = {}) {
    this.base = baseUrl.replace(/\/+$/, "");
    this.retries = options.retries ?? 3;
    this.backoffMs = options.backoffMs ?? 250;
    // wrapped so the global fetch keeps its own receiver
    this.fetchImpl = options.fetchImpl ?? ((input, init) => fetch(input, init));
    this.sleep = options.sleep ?? defaultSleep;
  }

  createSession(): Promise<SessionInfo> {
    return this.request<SessionInfo>("POST", "/sessions");
  }

  nextTrial(sessionId: string): Promise<Trial> {
    return this.request<Trial>("GET", `/sessions/${encodeURIComponent(sessionId)}/trial`);
  }

  submitChoice(sessionId: string, body: ChoiceSubmission): Promise<Ack> {
    return this.request<Ack>("POST", `/sessions/${encodeURIComponent(sessionId)}/choice`, body);
  }

  submitRating(sessionId: string, body: RatingSubmission): Promise<Ack> {
    return this.request<Ack>("POST", `/sessions/${encodeURIComponent(sessionId)}/rating`, body);
  }

  releaseSession(sessionId: string): Promise<unknown> {
    return this.request<unknown>(
      "POST",
      `/admin/sessions/${encodeURIComponent(sessionId)}/release`,
    );
  }

  exportJudgments(): Promise<string> {
    return this.requestText("GET", "/export/judgments.csv");
  }

  exportRatings(): Promise<string> {
    return this.requestText("GET", "/export/ratings.csv");
  }

  health(): Promise<unknown> {
    return this.request<unknown>("GET", "/health");
  }

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const response = await this.send(method, path, body);
    return (await response.json()) as T;
  }

  private async requestText(method: string, path: string): Promise<string> {
    const response = await this.send(method, path);
    return response.text();
  }

  private async send(method: string, path: string, body?: unknown): Promise<Response> {
    const init: RequestInit = { method };
    if (body !== undefined) {
      init.headers = { "content-type": "application/json" };
      init.body = JSON.stringify(body);
    }
    let lastFailure: unknown;
    for (let attempt = 0; attempt <= this.retries; attempt++) {
      if (attempt > 0) {
        await this.sleep(this.backoffMs * 2 ** (attempt - 1));
      }
      let response: Response;
      try {
        response = await this.fetchImpl(`${this.base}${path}`, init);
      } catch (failure) {
        lastFailure = failure;
        continue;
      }
      if (response.ok) {
        return response;
      }
      throw await toApiError(response);
    }
    throw new ApiError(
      "network",
      `request failed after ${this.retries + 1} attempts: ${String(lastFailure)}`,
      0,
    );
  }
}

async function toApiError(response: Response): Promise<ApiError> {
  let code = "http_error";
  let message = `${response.status} ${response.statusText}`;
  try {
    const payload = (await response.json()) as { error?: { code?: string; message?: string } };
    if (payload.error?.code) {
      code = payload.error.code;
    }
    if (payload.error?.message) {
      message = payload.error.message;
    }
  } catch {
    // non-JSON error body; keep the status line
  }
  return new ApiError(code, message, response.status);
}
