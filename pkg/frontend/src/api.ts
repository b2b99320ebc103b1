/**
 * Typed client for the modelgate control plane.
 *
 * Read calls are plain GETs; action calls carry the bearer token. Non-2xx
 * responses throw ApiError with the server's reason verbatim so the UI can
 * surface it unchanged.
 */

import type {
    ClustersPayload,
    DriftPayload,
    EscalationPayload,
    FactBoxPayload,
    ModelRecordPayload,
    PolicyPayload,
    RolloutPayload,
    UsageStatsPayload,
} from "./types.js";

export interface FetchResponseLike {
    status: number;
    json(): Promise<unknown>;
}

export type FetchLike = (url: string, init?: {
    method?: string;
    headers?: Record<string, string>;
    body?: string;
}) => Promise<FetchResponseLike>;

export class ApiError extends Error {
    constructor(
        public readonly status: number,
        public readonly reason: string,
        public readonly errorKind: string,
    ) {
        super(`${status}: ${reason}`);
    }
}

export interface ConsoleConfig {
    baseUrl: string;
    token: string;
    fetchImpl?: FetchLike;
}

export class ConsoleClient {
    private readonly baseUrl: string;
    private readonly token: string;
    private readonly fetchImpl: FetchLike;

    constructor(config: ConsoleConfig) {
        this.baseUrl = config.baseUrl.replace(/\/+$/, "");
        this.token = config.token;
        this.fetchImpl = config.fetchImpl ?? ((url, init) => fetch(url, init));
    }

    private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
        const headers: Record<string, string> = { "content-type": "application/json" };
        if (method !== "GET") {
            headers["authorization"] = `Bearer ${this.token}`;
        }
        const response = await this.fetchImpl(this.baseUrl + path, {
            method,
            headers,
            body: body === undefined ? undefined : JSON.stringify(body),
        });
        const payload = (await response.json()) as Record<string, unknown>;
        if (response.status < 200 || response.status >= 300) {
            const reason = typeof payload?.detail === "string" ? payload.detail : JSON.stringify(payload);
            const kind = typeof payload?.error === "string" ? payload.error : "error";
            throw new ApiError(response.status, reason, kind);
        }
        return payload as T;
    }

    models(): Promise<{ models: ModelRecordPayload[] }> {
        return this.request("GET", "/admin/models");
    }

    factbox(modelId: string): Promise<FactBoxPayload> {
        return this.request("GET", `/admin/models/${modelId}/factbox`);
    }

    stats(modelId: string, window: number): Promise<UsageStatsPayload> {
        return this.request("GET", `/admin/models/${modelId}/stats?window=${window}`);
    }

    drift(window: number): Promise<DriftPayload> {
        return this.request("GET", `/admin/drift?window=${window}`);
    }

    clusters(): Promise<ClustersPayload> {
        return this.request("GET", "/admin/clusters");
    }

    rollout(service: string): Promise<RolloutPayload> {
        return this.request("GET", `/admin/rollouts/${service}`);
    }

    policy(): Promise<PolicyPayload> {
        return this.request("GET", "/admin/policy");
    }

    escalations(state?: "pending" | "resolved"): Promise<{ escalations: EscalationPayload[] }> {
        const query = state ? `?state=${state}` : "";
        return this.request("GET", `/admin/escalations${query}`);
    }

    promote(service: string, cause?: string): Promise<unknown> {
        return this.request("POST", `/admin/rollouts/${service}/promote`, cause ? { cause } : {});
    }

    rollback(service: string, cause?: string): Promise<unknown> {
        return this.request("POST", `/admin/rollouts/${service}/rollback`, cause ? { cause } : {});
    }

    setPolicy(policy: Record<string, unknown>): Promise<PolicyPayload> {
        return this.request("PUT", "/admin/policy", policy);
    }

    resolveEscalation(id: string, label: string, worker: string): Promise<EscalationPayload> {
        return this.request("POST", `/admin/escalations/${id}/resolve`, { label, worker });
    }
}
