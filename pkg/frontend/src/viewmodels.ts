/**
 * Pure view-model builders: payload in, display structure out.
 *
 * The console never recomputes statistics the control plane already serves —
 * every value below is copied verbatim from the payload, so the contract
 * tests can assert panel value === payload value. Trends are accumulated
 * snapshots of successive polls, not derived numbers.
 */

import type {
    ClustersPayload,
    DriftPayload,
    EscalationPayload,
    FactBoxPayload,
    NA,
    RolloutPayload,
    StageEventPayload,
    UsageStatsPayload,
} from "./types.js";

export interface FactBoxCard {
    id: string;
    basedOn: NA<string>;
    relatedTo: NA<string>;
    deployedAt: NA<string>;
    deploymentId: NA<string>;
    canaryPassRate: NA<number>;
    canaryPreviousPassRate: NA<number>;
    canaryVerdict: NA<string>;
    shadowReference: NA<string>;
    shadowAgreement: NA<number>;
    testId: NA<string>;
    signedOff: NA<string>;
    /** Server-rendered fact-box text, displayed as-is. */
    rendered: string;
}

export function buildFactBoxCard(payload: FactBoxPayload): FactBoxCard {
    return {
        id: payload.provenance.id,
        basedOn: payload.provenance.based_on,
        relatedTo: payload.provenance.related_to,
        deployedAt: payload.usage.deployed_at,
        deploymentId: payload.usage.deployment_id,
        canaryPassRate: payload.usage.canary_result.pass_rate,
        canaryPreviousPassRate: payload.usage.canary_result.previous_pass_rate,
        canaryVerdict: payload.usage.canary_result.verdict,
        shadowReference: payload.usage.shadow.reference,
        shadowAgreement: payload.usage.shadow.agreement,
        testId: payload.testing.test_id,
        signedOff: payload.testing.signed_off,
        rendered: payload.text,
    };
}

export interface StatsPanels {
    model: string;
    window: { fromSeq: number | null; toSeq: number | null };
    callCount: number;
    labelDistribution: { label: string; count: number }[];
    confidenceMean: number | null;
    confidenceHistogram: number[];
    latency: { p50: number | null; p95: number | null; p99: number | null };
    goodRate: number | null;
    feedbackCount: number;
}

export function buildStatsPanels(payload: UsageStatsPayload): StatsPanels {
    return {
        model: payload.model,
        window: { fromSeq: payload.window.from_seq, toSeq: payload.window.to_seq },
        callCount: payload.call_count,
        labelDistribution: Object.entries(payload.label_distribution)
            .sort(([a], [b]) => (a < b ? -1 : 1))
            .map(([label, count]) => ({ label, count })),
        confidenceMean: payload.confidence.mean,
        confidenceHistogram: [...payload.confidence.histogram],
        latency: {
            p50: payload.latency_ms.p50,
            p95: payload.latency_ms.p95,
            p99: payload.latency_ms.p99,
        },
        goodRate: payload.good_rate,
        feedbackCount: payload.feedback_count,
    };
}

export interface DriftPanel {
    aggregate: number;
    alarm: boolean;
    alarmThreshold: number;
    anomalousRate: number;
    anomalyBasis: string;
    perFeature: { feature: string; psi: number }[];
}

export function buildDriftPanel(payload: DriftPayload): DriftPanel {
    return {
        aggregate: payload.aggregate,
        alarm: payload.alarm,
        alarmThreshold: payload.alarm_threshold,
        anomalousRate: payload.anomalous_rate,
        anomalyBasis: payload.anomaly_basis,
        perFeature: Object.entries(payload.per_feature)
            .sort(([a], [b]) => (a < b ? -1 : 1))
            .map(([feature, psi]) => ({ feature, psi })),
    };
}

export interface ClusterSummaryRow {
    index: number;
    size: number;
    goodRate: number | null;
    meanConfidence: number | null;
    radius: number | null;
}

export interface ClusterSummary {
    fitted: boolean;
    k: number | null;
    fittedAt: string | null;
    rows: ClusterSummaryRow[];
}

export function buildClusterSummary(payload: ClustersPayload): ClusterSummary {
    if (!payload.fitted) {
        return { fitted: false, k: null, fittedAt: null, rows: [] };
    }
    const stats = payload.stats ?? [];
    const radii = payload.radii ?? [];
    return {
        fitted: true,
        k: payload.k ?? stats.length,
        fittedAt: payload.fitted_at ?? null,
        rows: stats.map((s, i) => ({
            index: i,
            size: s.size,
            goodRate: s.good_rate,
            meanConfidence: s.mean_confidence,
            radius: radii[i] ?? null,
        })),
    };
}

export interface RolloutTimelineView {
    service: string;
    active: {
        challenger: string;
        stage: string;
        thresholdIndex: number;
        requestsInStage: number;
        agreement: number | null;
        goodRateChallenger: number | null;
        goodRateChampion: number | null;
        feedbackCount: number;
    } | null;
    tauInForce: number | null;
    queued: string[];
    events: StageEventPayload[];
}

export function buildRolloutTimeline(payload: RolloutPayload): RolloutTimelineView {
    return {
        service: payload.service,
        active: payload.active
            ? {
                  challenger: payload.active.challenger,
                  stage: payload.active.stage,
                  thresholdIndex: payload.active.threshold_index,
                  requestsInStage: payload.active.requests_in_stage,
                  agreement: payload.active.metrics.agreement,
                  goodRateChallenger: payload.active.metrics.good_rate_challenger,
                  goodRateChampion: payload.active.metrics.good_rate_champion,
                  feedbackCount: payload.active.metrics.feedback_count,
              }
            : null,
        tauInForce: payload.tau_in_force,
        queued: [...payload.queued],
        events: payload.history.map((event) => ({ ...event })),
    };
}

export interface EscalationRow {
    id: string;
    requestId: string;
    reason: string;
    features: { name: string; value: number }[];
    candidates: { model: string; label: string; confidence: number }[];
}

export function buildEscalationRows(payload: { escalations: EscalationPayload[] }): EscalationRow[] {
    return payload.escalations.map((item) => ({
        id: item.id,
        requestId: item.request.request_id,
        reason: item.context.reason,
        features: item.request.features.map((f) => ({ ...f })),
        candidates: item.context.candidates.map((c) => ({
            model: c.model,
            label: c.top_label,
            confidence: c.top_confidence,
        })),
    }));
}

/**
 * Ring buffer of successive poll snapshots; the dashboard's "over time"
 * panels read these stored payload values back out unchanged.
 */
export class TrendBuffer<T> {
    private entries: { at: string; value: T }[] = [];

    constructor(private readonly capacity: number = 120) {}

    push(at: string, value: T): void {
        this.entries.push({ at, value });
        if (this.entries.length > this.capacity) {
            this.entries.shift();
        }
    }

    series(): { at: string; value: T }[] {
        return this.entries.map((e) => ({ ...e }));
    }

    get length(): number {
        return this.entries.length;
    }
}
