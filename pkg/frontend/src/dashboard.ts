/**
 * Polling controller for the dashboard panels.
 *
 * Everything renders from control-plane reads; a failed poll keeps the last
 * good panels and raises a stale-data banner carrying the last-good
 * timestamp. Trends are ring buffers of successive snapshots.
 */

import { ConsoleClient } from "./api.js";
import {
    buildClusterSummary,
    buildDriftPanel,
    buildFactBoxCard,
    buildRolloutTimeline,
    buildStatsPanels,
    ClusterSummary,
    DriftPanel,
    FactBoxCard,
    RolloutTimelineView,
    StatsPanels,
    TrendBuffer,
} from "./viewmodels.js";

export interface DashboardPanels {
    factBox: FactBoxCard | null;
    stats: StatsPanels | null;
    drift: DriftPanel | null;
    clusters: ClusterSummary;
    rollout: RolloutTimelineView;
    models: { id: string; stage: string }[];
}

export interface DashboardOptions {
    service: string;
    window: number;
    /** Model whose stats/fact box the detail panels follow; defaults to the
     * newest deployed version. */
    focusModel?: string;
    now?: () => string;
}

export class DashboardController {
    panels: DashboardPanels | null = null;
    lastGoodAt: string | null = null;
    stale = false;
    readonly labelTrend = new TrendBuffer<{ label: string; count: number }[]>();
    readonly confidenceTrend = new TrendBuffer<number | null>();
    readonly driftTrend = new TrendBuffer<{ aggregate: number; alarm: boolean }>();

    private timer: ReturnType<typeof setInterval> | null = null;

    constructor(
        private readonly client: ConsoleClient,
        private readonly options: DashboardOptions,
    ) {}

    private now(): string {
        return this.options.now ? this.options.now() : new Date().toISOString();
    }

    async refresh(): Promise<DashboardPanels> {
        try {
            const models = await this.client.models();
            const focus = this.options.focusModel ?? this.pickFocus(models.models);
            const [factbox, stats, clusters, rollout] = await Promise.all([
                focus ? this.client.factbox(focus) : Promise.resolve(null),
                focus ? this.client.stats(focus, this.options.window) : Promise.resolve(null),
                this.client.clusters(),
                this.client.rollout(this.options.service),
            ]);
            let drift = null;
            try {
                drift = await this.client.drift(this.options.window);
            } catch {
                // not enough logged traffic for a drift window yet
            }
            this.panels = {
                factBox: factbox ? buildFactBoxCard(factbox) : null,
                stats: stats ? buildStatsPanels(stats) : null,
                drift: drift ? buildDriftPanel(drift) : null,
                clusters: buildClusterSummary(clusters),
                rollout: buildRolloutTimeline(rollout),
                models: models.models.map((m) => ({ id: m.id, stage: m.stage })),
            };
            const at = this.now();
            if (this.panels.stats) {
                this.labelTrend.push(at, this.panels.stats.labelDistribution);
                this.confidenceTrend.push(at, this.panels.stats.confidenceMean);
            }
            if (this.panels.drift) {
                this.driftTrend.push(at, {
                    aggregate: this.panels.drift.aggregate,
                    alarm: this.panels.drift.alarm,
                });
            }
            this.lastGoodAt = at;
            this.stale = false;
            return this.panels;
        } catch (error) {
            this.stale = true;
            if (this.panels === null) {
                throw error;
            }
            return this.panels;
        }
    }

    /** Stale banner text, or null while data is fresh. */
    staleBanner(): string | null {
        if (!this.stale) {
            return null;
        }
        return this.lastGoodAt
            ? `control plane unreachable; showing data from ${this.lastGoodAt}`
            : "control plane unreachable";
    }

    private pickFocus(models: { id: string; deployed_at: string | null }[]): string | null {
        const deployed = models.filter((m) => m.deployed_at !== null);
        const pool = deployed.length ? deployed : models;
        return pool.length ? pool[pool.length - 1]!.id : null;
    }

    start(intervalMs = 2000): void {
        this.stop();
        this.timer = setInterval(() => void this.refresh(), intervalMs);
    }

    stop(): void {
        if (this.timer !== null) {
            clearInterval(this.timer);
            this.timer = null;
        }
    }
}
