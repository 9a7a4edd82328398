/**
 * Typed client for the review server's JSON API.
 *
 * Every call carries the annotator's bearer token. Non-2xx responses
 * are turned into ApiError so callers can branch on status and the
 * server's error type string.
 */

export type NodeKind = "Situation" | "Clue" | "Thought" | "Action" | "Emotion";
export type Polarity = "Positive" | "Negative";
export type Verdict = "Accept" | "Revise" | "Reject" | "Flag";

export interface QueueItem {
  id: string;
  kind: NodeKind;
  text: string;
  polarity: Polarity | null;
  topic: string | null;
  status: string;
  situation: string | null;
  thought: string | null;
  claimed_by: string;
  claim_expires: number;
}

export interface QueueFilter {
  kind?: NodeKind;
  topic?: string;
  polarity?: Polarity;
}

export interface KindCounters {
  pending: number;
  accepted: number;
  revised: number;
  rejected: number;
  flagged: number;
}

export interface ReviewStats {
  by_kind: Record<string, KindCounters>;
  by_annotator: Record<string, number>;
  pending: number;
  flagged: number;
  retention: number | null;
}

export interface DecisionPayload {
  item: string;
  verdict: Verdict;
  text?: string;
  reason?: string;
}

export interface ResolvePayload {
  item: string;
  verdict: Exclude<Verdict, "Flag">;
  relabel?: string;
  text?: string;
}

export interface DecidedItem {
  id: string;
  kind: NodeKind;
  text: string;
  polarity: Polarity | null;
  topic: string | null;
  status: string;
  source: string;
}

export interface FinalizeResult {
  stats: {
    final_counts: Record<string, number>;
    raw_counts: Record<string, number>;
    retention: Record<string, number | null>;
    chains_total: number;
    chains_positive: number;
    chains_negative: number;
  };
  nodes: number;
  chains: number;
  written_to: string | null;
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly errorType: string,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }

  /** True when the server says our claim lapsed or someone else holds it. */
  get isStaleClaim(): boolean {
    return this.status === 409 && this.errorType === "StaleClaim";
  }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  private readonly baseUrl: string;

  constructor(
    baseUrl: string,
    private readonly token: string,
    private readonly fetchFn: FetchLike = (...args) => fetch(...args),
  ) {
    this.baseUrl = baseUrl.replace(/\/+$/, "");
  }

  private async request<T>(
    method: "GET" | "POST",
    path: string,
    body?: unknown,
  ): Promise<T> {
    const init: RequestInit = {
      method,
      headers: { Authorization: `Bearer ${this.token}` },
    };
    if (body !== undefined) {
      init.headers = {
        ...init.headers,
        "Content-Type": "application/json; charset=utf-8",
      };
      init.body = JSON.stringify(body);
    }
    const response = await this.fetchFn(`${this.baseUrl}${path}`, init);
    let payload: unknown = null;
    try {
      payload = await response.json();
    } catch {
      payload = null;
    }
    if (!response.ok) {
      const detail = (payload as { error?: { type?: string; message?: string } })
        ?.error;
      throw new ApiError(
        response.status,
        detail?.type ?? "HttpError",
        detail?.message ?? `request failed with status ${response.status}`,
      );
    }
    return payload as T;
  }

  /** Claim a batch of pending items; the server leases them to this token. */
  async claimQueue(filter: QueueFilter = {}, size = 20): Promise<QueueItem[]> {
    const params = new URLSearchParams({ size: String(size) });
    if (filter.kind) params.set("kind", filter.kind);
    if (filter.topic) params.set("topic", filter.topic);
    if (filter.polarity) params.set("polarity", filter.polarity);
    const data = await this.request<{ items: QueueItem[] }>(
      "GET",
      `/queue?${params.toString()}`,
    );
    return data.items;
  }

  async flagged(): Promise<QueueItem[]> {
    const data = await this.request<{ items: QueueItem[] }>("GET", "/flagged");
    return data.items;
  }

  async stats(): Promise<ReviewStats> {
    return this.request<ReviewStats>("GET", "/stats");
  }

  async submitDecision(payload: DecisionPayload): Promise<DecidedItem> {
    const data = await this.request<{ item: DecidedItem }>(
      "POST",
      "/decisions",
      payload,
    );
    return data.item;
  }

  async expertResolve(payload: ResolvePayload): Promise<DecidedItem> {
    const data = await this.request<{ item: DecidedItem }>(
      "POST",
      "/expert/resolve",
      payload,
    );
    return data.item;
  }

  async releaseClaims(): Promise<number> {
    const data = await this.request<{ released: number }>(
      "POST",
      "/claims/release",
      {},
    );
    return data.released;
  }

  async finalize(force = false): Promise<FinalizeResult> {
    return this.request<FinalizeResult>("POST", "/finalize", { force });
  }
}
