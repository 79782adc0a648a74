/** Typed client for the reading-session HTTP service.
 *
 * The service never reveals image provenance: responses carry only opaque
 * image identifiers and rendered pixels, and this client exposes exactly
 * those fields.
 */

export interface SessionInfo {
  session_id: string;
  reader_id: string;
  total: number;
  cursor: number;
  status: "active" | "complete";
}

export interface NextImage {
  done: boolean;
  image_id?: string;
  /** Base64-encoded grayscale PNG. */
  image?: string;
  cursor: number;
  total: number;
}

export interface ScoreAck {
  ok: boolean;
  cursor: number;
  total: number;
  status: "active" | "complete";
}

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly detail: unknown,
  ) {
    super(`request failed with status ${status}`);
    this.name = "ApiError";
  }
}

export type FetchLike = (
  input: string,
  init?: RequestInit,
) => Promise<Response>;

export class StudyClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchImpl: FetchLike = fetch,
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchImpl(this.baseUrl + path, init);
    const body = await response.json().catch(() => null);
    if (!response.ok) {
      throw new ApiError(response.status, body?.detail ?? body);
    }
    return body as T;
  }

  createSession(
    readerId: string,
    real: number,
    synthesized: number,
    seed: number,
  ): Promise<SessionInfo> {
    return this.request<SessionInfo>("/sessions", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ reader_id: readerId, real, synthesized, seed }),
    });
  }

  nextImage(sessionId: string): Promise<NextImage> {
    return this.request<NextImage>(`/sessions/${sessionId}/next`);
  }

  submitScore(
    sessionId: string,
    imageId: string,
    likert: number,
  ): Promise<ScoreAck> {
    return this.request<ScoreAck>(`/sessions/${sessionId}/scores`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ image_id: imageId, likert }),
    });
  }

  report(sessionIds: string[]): Promise<Record<string, unknown>> {
    return this.request(`/report?sessions=${sessionIds.join(",")}`);
  }
}
