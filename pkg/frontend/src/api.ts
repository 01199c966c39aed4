/** Typed client for the dialoflow HTTP service. */

export interface DecodeOptions {
  strategy?: "greedy" | "beam";
  beam_width?: number;
  max_new_tokens?: number;
  length_alpha?: number;
}

export interface SessionCreated {
  session_id: string;
  checkpoint_hash: string;
}

export interface MessageResponse {
  reply: string;
  turn_index: number;
  s_k: number;
  flow_running: number;
  influence_norms: { predicted: number; realized: number };
  truncated: boolean;
  checkpoint_hash: string;
}

export interface TrajectoryPoint {
  k: number;
  x: number;
  y: number;
  speaker: string;
}

export interface TrajectoryResponse {
  points: TrajectoryPoint[];
}

export class ApiError extends Error {
  constructor(
    public status: number,
    message: string,
    public fields: string[] = [],
  ) {
    super(message);
    this.name = "ApiError";
  }
}

type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class DialoflowClient {
  constructor(
    private baseUrl: string,
    private fetchFn: FetchLike = (url, init) => fetch(url, init),
  ) {
    this.baseUrl = baseUrl.replace(/\/$/, "");
  }

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const resp = await this.fetchFn(`${this.baseUrl}${path}`, {
      method,
      headers: body === undefined ? undefined : { "Content-Type": "application/json" },
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    const payload = await resp.json().catch(() => ({}));
    if (!resp.ok) {
      throw new ApiError(
        resp.status,
        typeof payload.error === "string" ? payload.error : `HTTP ${resp.status}`,
        Array.isArray(payload.fields) ? payload.fields : [],
      );
    }
    return payload as T;
  }

  createSession(options?: DecodeOptions): Promise<SessionCreated> {
    return this.request("POST", "/sessions", options ?? {});
  }

  sendMessage(sessionId: string, text: string): Promise<MessageResponse> {
    return this.request("POST", `/sessions/${sessionId}/message`, { text });
  }

  getTrajectory(sessionId: string): Promise<TrajectoryResponse> {
    return this.request("GET", `/sessions/${sessionId}/trajectory`);
  }

  health(): Promise<{ status: string; checkpoint_hash: string }> {
    return this.request("GET", "/healthz");
  }
}
