import type { ClassEntry, SegmentRequest, SegmentResponse } from "./types.js";

export class ServiceError extends Error {
  name = "ServiceError";
  status: number;

  constructor(message: string, status: number) {
    super(message);
    this.status = status;
  }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

/**
 * Typed client for the segmentation service. Each segment() call takes a
 * fresh request token; by the time a response arrives, a newer prompt may
 * have superseded it, in which case the stale response resolves to null
 * and must not touch UI state.
 */
export class ApiClient {
  private baseUrl: string;
  private fetchImpl: FetchLike;
  private latestToken = 0;

  constructor(baseUrl = "", fetchImpl: FetchLike = fetch.bind(globalThis)) {
    this.baseUrl = baseUrl.replace(/\/$/, "");
    this.fetchImpl = fetchImpl;
  }

  newToken(): number {
    this.latestToken += 1;
    return this.latestToken;
  }

  isCurrent(token: number): boolean {
    return token === this.latestToken;
  }

  async classes(): Promise<ClassEntry[]> {
    const resp = await this.fetchImpl(`${this.baseUrl}/v1/classes`);
    if (!resp.ok) throw new ServiceError(`classes failed: ${resp.status}`, resp.status);
    return (await resp.json()) as ClassEntry[];
  }

  sampleUrl(n: number): string {
    return `${this.baseUrl}/v1/samples/${n}`;
  }

  /**
   * POST a segmentation request under the given token. Returns null when a
   * newer request was issued while this one was in flight.
   */
  async segment(req: SegmentRequest, token: number): Promise<SegmentResponse | null> {
    const resp = await this.fetchImpl(`${this.baseUrl}/v1/segment`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(req),
    });
    if (!resp.ok) {
      let detail = `segment failed: ${resp.status}`;
      try {
        const body = (await resp.json()) as { detail?: string };
        if (body.detail) detail = body.detail;
      } catch {
        // keep the generic status message
      }
      throw new ServiceError(detail, resp.status);
    }
    const body = (await resp.json()) as SegmentResponse;
    if (!this.isCurrent(token)) return null; // superseded: discard quietly
    return body;
  }
}
