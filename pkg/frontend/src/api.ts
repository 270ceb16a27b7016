// Thin typed client for the screening service. Every non-2xx response is
// surfaced as a ServiceError carrying the service's own message; transport
// failures become status 0 with a fixed "service unreachable" message.

import type { KbCatalog, ModelInfo, PredictionResponse, SubjectRequest } from "./types.js";

export class ServiceError extends Error {
  readonly status: number;
  readonly field?: string;

  constructor(status: number, message: string, field?: string) {
    super(message);
    this.name = "ServiceError";
    this.status = status;
    this.field = field;
  }
}

export const UNREACHABLE_MESSAGE = "service unreachable";

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  private readonly fetchFn: FetchLike;
  private readonly base: string;

  constructor(fetchFn?: FetchLike, base = "") {
    this.fetchFn = fetchFn ?? ((input, init) => fetch(input, init));
    this.base = base;
  }

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    let response: Response;
    try {
      response = await this.fetchFn(this.base + path, init);
    } catch {
      throw new ServiceError(0, UNREACHABLE_MESSAGE);
    }
    let body: unknown = null;
    try {
      body = await response.json();
    } catch {
      if (response.ok) {
        throw new ServiceError(0, "malformed response from service");
      }
    }
    if (!response.ok) {
      const err = (body ?? {}) as { message?: string; field?: string };
      throw new ServiceError(
        response.status,
        err.message ?? `request failed (${response.status})`,
        err.field,
      );
    }
    return body as T;
  }

  health(): Promise<{ status: string; ready: boolean }> {
    return this.request("/health");
  }

  modelInfo(): Promise<ModelInfo> {
    return this.request("/model/info");
  }

  listKbs(): Promise<KbCatalog> {
    return this.request("/kb");
  }

  selectKb(name: string): Promise<{ active: string; count: number }> {
    return this.request("/kb/select", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ name }),
    });
  }

  predict(subject: SubjectRequest): Promise<PredictionResponse> {
    return this.request("/predict", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(subject),
    });
  }
}
