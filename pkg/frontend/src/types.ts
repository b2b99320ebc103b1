/**
 * Payload shapes served by the modelgate control plane.
 *
 * Fields that the server renders as explicit "n/a" (never omitted) are typed
 * as `T | "n/a"`.
 */

export type NA<T> = T | "n/a";

export interface FactBoxPayload {
    provenance: {
        id: string;
        based_on: NA<string>;
        related_to: NA<string>;
    };
    usage: {
        deployed_at: NA<string>;
        deployment_id: NA<string>;
        canary_result: {
            pass_rate: NA<number>;
            previous_pass_rate: NA<number>;
            verdict: NA<string>;
        };
        shadow: {
            reference: NA<string>;
            agreement: NA<number>;
        };
    };
    testing: {
        test_id: NA<string>;
        signed_off: NA<string>;
    };
    /** Server-rendered two-column plain-text layout. */
    text: string;
}

export interface UsageStatsPayload {
    model: string;
    window: { from_seq: number | null; to_seq: number | null };
    call_count: number;
    label_distribution: Record<string, number>;
    confidence: { mean: number | null; histogram: number[] };
    latency_ms: { p50: number | null; p95: number | null; p99: number | null };
    good_rate: number | null;
    feedback_count: number;
}

export interface DriftPayload {
    per_feature: Record<string, number>;
    aggregate: number;
    anomalous_rate: number;
    alarm: boolean;
    alarm_threshold: number;
    anomaly_basis: "clusters" | "none";
}

export interface ClusterStatsPayload {
    size: number;
    good_rate: number | null;
    mean_confidence: number | null;
}

export interface ClustersPayload {
    fitted: boolean;
    k?: number;
    feature_names?: string[];
    centroids?: number[][];
    radii?: number[];
    stats?: ClusterStatsPayload[];
    fitted_at?: string | null;
    training_window?: [number, number] | null;
}

export interface RolloutMetricsPayload {
    agreement: number | null;
    shadow_pairs: number;
    good_rate_challenger: number | null;
    good_rate_champion: number | null;
    feedback_count: number;
}

export interface RolloutStatePayload {
    challenger: string;
    stage: string;
    entered_at: string;
    requests_in_stage: number;
    threshold_index: number;
    metrics: RolloutMetricsPayload;
    outcome: string | null;
}

export interface StageEventPayload {
    model: string;
    from: string;
    to: string;
    cause: string;
    at: string;
}

export interface RolloutPayload {
    service: string;
    active: RolloutStatePayload | null;
    tau_in_force: number | null;
    queued: string[];
    completed: RolloutStatePayload[];
    history: StageEventPayload[];
}

export interface ModelRecordPayload {
    id: string;
    endpoint: string;
    based_on: string | null;
    related_to: string;
    stage: string;
    registered_at: string;
    deployed_at: string | null;
    deployment_id: string;
    test_id: string | null;
    signed_off: string | null;
}

export interface EscalationCandidatePayload {
    model: string;
    top_label: string;
    top_confidence: number;
    predictions: { result: string; uncertainty: number }[];
}

export interface EscalationPayload {
    id: string;
    request: {
        request_id: string;
        timestamp: string;
        features: { name: string; value: number }[];
    };
    context: {
        reason: string;
        candidates: EscalationCandidatePayload[];
    };
    state: "pending" | "resolved";
    resolution: { label: string; worker: string; at: string } | null;
}

export interface PolicyPayload {
    policy: {
        canary_fraction: number;
        canary_salt: string;
        threshold_schedule: number[];
        cluster_gate: { enabled: boolean; min_cluster_good_rate: number; anomaly_factor: number };
        exception: { min_confidence: number; on_exception: string[] };
        promotion: {
            shadow_min_requests: number;
            shadow_min_agreement: number;
            canary_min_feedback: number;
            rollback_delta: number;
            stage_dwell_requests: number;
        };
    };
}

export interface ApiErrorBody {
    error: string;
    detail: string;
}
