/** Browser wiring: settings bar, dashboard panels, rollout controls, workbench. */

import { ConsoleClient } from "./api.js";
import { ActionDispatcher, ActionKind } from "./actions.js";
import { barsSvg, escapeXml, sparklineSvg } from "./charts.js";
import { DashboardController } from "./dashboard.js";
import { EscalationWorkbench } from "./workbench.js";

function el<T extends HTMLElement>(id: string): T {
    const node = document.getElementById(id);
    if (!node) throw new Error(`missing element #${id}`);
    return node as T;
}

function fmt(value: unknown): string {
    if (value === null || value === undefined) return "n/a";
    if (typeof value === "number") return Number.isInteger(value) ? String(value) : value.toFixed(4);
    return String(value);
}

let dashboard: DashboardController | null = null;
let workbench: EscalationWorkbench | null = null;
let dispatcher: ActionDispatcher | null = null;
let service = "";

function connect(): void {
    const baseUrl = el<HTMLInputElement>("base-url").value;
    const token = el<HTMLInputElement>("token").value;
    service = el<HTMLInputElement>("service").value;
    const window_ = Number(el<HTMLInputElement>("window").value) || 1000;
    const client = new ConsoleClient({ baseUrl, token });

    dashboard?.stop();
    dashboard = new DashboardController(client, { service, window: window_ });
    workbench = new EscalationWorkbench(client, el<HTMLInputElement>("worker").value || "operator");
    dispatcher = new ActionDispatcher(async (action) => {
        switch (action.kind) {
            case "promote":
                return client.promote(service);
            case "rollback":
                return client.rollback(service);
            case "set_policy":
                return client.setPolicy(action.payload);
            case "resolve_escalation":
                return client.resolveEscalation(
                    String(action.payload.id), String(action.payload.label), String(action.payload.worker),
                );
        }
    });

    void poll();
    dashboard.start(2000);
    setInterval(() => void refreshWorkbench(), 2000);
}

async function poll(): Promise<void> {
    if (!dashboard) return;
    try {
        await dashboard.refresh();
    } catch (error) {
        el("stale").textContent = String(error);
        return;
    }
    render();
    await refreshWorkbench();
}

function render(): void {
    if (!dashboard?.panels) return;
    const p = dashboard.panels;
    el("stale").textContent = dashboard.staleBanner() ?? "";

    el("models").innerHTML = p.models
        .map((m) => `<li><code>${escapeXml(m.id)}</code> — ${escapeXml(m.stage)}</li>`)
        .join("");

    el("factbox").textContent = p.factBox ? p.factBox.rendered : "no deployed model";

    if (p.stats) {
        el("labels").innerHTML = barsSvg(p.stats.labelDistribution);
        el("confidence").innerHTML =
            `mean ${fmt(p.stats.confidenceMean)} over ${p.stats.callCount} calls ` +
            sparklineSvg(dashboard.confidenceTrend.series().map((s) => s.value ?? 0));
        el("latency").textContent =
            `p50 ${fmt(p.stats.latency.p50)} · p95 ${fmt(p.stats.latency.p95)} · p99 ${fmt(p.stats.latency.p99)} ms`;
        el("goodrate").textContent = `good-feedback rate ${fmt(p.stats.goodRate)} (${p.stats.feedbackCount} joined)`;
    }

    if (p.drift) {
        el("drift").innerHTML =
            `<span class="${p.drift.alarm ? "alarm" : "ok"}">aggregate PSI ${fmt(p.drift.aggregate)}` +
            `${p.drift.alarm ? " ⚠ ALARM" : ""}</span> (threshold ${fmt(p.drift.alarmThreshold)}, ` +
            `anomalous ${fmt(p.drift.anomalousRate)}) ` +
            sparklineSvg(dashboard.driftTrend.series().map((s) => s.value.aggregate));
    } else {
        el("drift").textContent = "not enough traffic for a drift window yet";
    }

    el("clusters").innerHTML = p.clusters.fitted
        ? p.clusters.rows
              .map((r) => `<li>#${r.index}: size ${r.size}, good rate ${fmt(r.goodRate)}, radius ${fmt(r.radius)}</li>`)
              .join("")
        : "<li>no cluster model fitted</li>";

    const active = p.rollout.active;
    el("rollout").innerHTML = active
        ? `<p><code>${escapeXml(active.challenger)}</code> in <b>${escapeXml(active.stage)}</b>` +
          ` (tau ${fmt(p.rollout.tauInForce)}, ${active.requestsInStage} requests,` +
          ` agreement ${fmt(active.agreement)}, challenger ${fmt(active.goodRateChallenger)}` +
          ` vs champion ${fmt(active.goodRateChampion)})</p>`
        : "<p>no active rollout</p>";
    el("timeline").innerHTML = p.rollout.events
        .map((e) => `<li>${escapeXml(e.at)} — <code>${escapeXml(e.model)}</code> ${e.from} → ${e.to} (${escapeXml(e.cause)})</li>`)
        .join("");
}

async function refreshWorkbench(): Promise<void> {
    if (!workbench) return;
    const state = await workbench.refresh();
    el("banner").textContent = state.banner ?? "";
    if (state.rows.length === 0) {
        el("queue").innerHTML = `<li class="empty">${state.emptyMessage}</li>`;
        return;
    }
    el("queue").innerHTML = state.rows
        .map(
            (row) =>
                `<li><code>${escapeXml(row.id)}</code> ${escapeXml(row.reason)}<br/>` +
                row.candidates.map((c) => `${escapeXml(c.model)}: ${escapeXml(c.label)} (${fmt(c.confidence)})`).join(", ") +
                `<br/><input placeholder="label" id="label-${escapeXml(row.id)}"/>` +
                `<button data-resolve="${escapeXml(row.id)}">resolve</button></li>`,
        )
        .join("");
    for (const button of el("queue").querySelectorAll<HTMLButtonElement>("button[data-resolve]")) {
        button.onclick = async () => {
            const id = button.dataset.resolve!;
            const label = el<HTMLInputElement>(`label-${id}`).value;
            if (!label) return;
            const state = await workbench!.resolve(id, label);
            el("banner").textContent = state.banner ?? "";
            await refreshWorkbench();
        };
    }
}

function wireAction(buttonId: string, kind: ActionKind): void {
    el(buttonId).onclick = async () => {
        if (!dispatcher) return;
        const result = await dispatcher.request(kind);
        if (result.status === "awaiting_confirmation") {
            el("confirm-bar").style.display = "block";
            el("confirm-text").textContent = `confirm ${kind} for ${service}?`;
        }
    };
}

window.addEventListener("DOMContentLoaded", () => {
    el("connect").onclick = connect;
    wireAction("promote", "promote");
    wireAction("rollback", "rollback");
    el("confirm-yes").onclick = async () => {
        el("confirm-bar").style.display = "none";
        const result = await dispatcher?.confirm();
        if (result && result.status === "rejected") {
            el("banner").textContent = `${result.errorKind}: ${result.reason}`;
        }
        await poll();
    };
    el("confirm-no").onclick = () => {
        dispatcher?.cancel();
        el("confirm-bar").style.display = "none";
    };
});
