"""Scenario runner: boots a gateway plus stub backends in-process, streams
seeded traffic through it, injects feedback, executes scripted events (version
notifications, manual promotes/rollbacks, worker resolutions, cluster fits),
and emits a fully deterministic report.

Scenario documents are JSON with sections `stubs`, `traffic`, `policy`, and
`script`; see the README for a worked example.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from datetime import timezone
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from ..analytics import CallLog, fit_clusters, drift_report, window_stats
from ..audit import AuditLog
from ..clock import SimClock
from ..control_plane import EscalationQueue
from ..policy import PolicyConfig, PolicyEngine
from ..protocol import (
    FeedbackRecord,
    ModelId,
    VersionNotification,
    parse_instant,
    parse_model_id,
)
from ..registry import ModelRegistry, NoChampion, Stage, render_fact_box_text
from ..router import Gateway
from .stubs import ConfidenceModel, StubModel, StubModelConfig, TruthRule
from .traffic import DriftEvent, MixtureComponent, TrafficConfig, gen_traffic


class ConfigError(ValueError):
    pass


class ScenarioAborted(RuntimeError):
    def __init__(self, message: str, report: "ScenarioReport | None" = None) -> None:
        super().__init__(message)
        self.report = report


def substream(root_seed: int, label: str) -> np.random.Generator:
    """Independent child RNG derived from one root seed and a stable label."""
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    hi = int.from_bytes(digest[:4], "big")
    lo = int.from_bytes(digest[4:8], "big")
    return np.random.default_rng(np.random.SeedSequence(entropy=root_seed, spawn_key=(hi, lo)))


@dataclass(frozen=True)
class StubSpec:
    config: StubModelConfig
    endpoint: str
    initial_stage: str  # "full" | "fallback" | "none"
    deployment_id: str | None
    based_on: ModelId | None
    related_to: str
    test_id: str | None
    signed_off: str | None


@dataclass(frozen=True)
class ScriptAction:
    at: int
    action: str
    params: dict[str, Any]


@dataclass(frozen=True)
class Scenario:
    name: str
    seed: int
    service: str
    mode: str  # "staged" | "direct_cutover"
    window_size: int
    feedback_probability: float
    deadline_ms: float
    truth: TruthRule
    stubs: tuple[StubSpec, ...]
    traffic: TrafficConfig
    policy: PolicyConfig
    script: tuple[ScriptAction, ...]
    clusters: dict[str, Any] | None = None
    drift: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "Scenario":
        try:
            return _parse_scenario(raw)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad scenario document: {exc}") from exc

    @classmethod
    def from_file(cls, path: Path) -> "Scenario":
        with Path(path).open("r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _parse_truth(raw: Mapping[str, Any]) -> TruthRule:
    return TruthRule(
        weights={str(k): float(v) for k, v in raw.get("weights", {}).items()},
        bias=float(raw.get("bias", 0.0)),
        positive_label=str(raw.get("positive_label", "pos")),
        negative_label=str(raw.get("negative_label", "neg")),
    )


def _parse_scenario(raw: Mapping[str, Any]) -> Scenario:
    service = str(raw["service"])
    truth = _parse_truth(raw.get("truth", {"weights": {}}))
    mode = str(raw.get("mode", "staged"))
    if mode not in ("staged", "direct_cutover"):
        raise ConfigError(f"unknown mode {mode!r}")

    stubs = []
    for raw_stub in raw.get("stubs", []):
        model_id = parse_model_id(raw_stub["model_id"])
        stub_truth = _parse_truth(raw_stub["truth"]) if "truth" in raw_stub else truth
        conf_raw = raw_stub.get("confidence", {})
        config = StubModelConfig(
            model_id=model_id,
            truth_rule=stub_truth,
            accuracy=float(raw_stub.get("accuracy", 0.9)),
            confidence=ConfidenceModel(
                alpha_correct=float(conf_raw.get("alpha_correct", 8.0)),
                beta_correct=float(conf_raw.get("beta_correct", 2.0)),
                alpha_wrong=float(conf_raw.get("alpha_wrong", 2.0)),
                beta_wrong=float(conf_raw.get("beta_wrong", 4.0)),
            ),
            latency_mean_ms=float(raw_stub.get("latency_mean_ms", 10.0)),
            latency_jitter_ms=float(raw_stub.get("latency_jitter_ms", 2.0)),
            failure_rate=float(raw_stub.get("failure_rate", 0.0)),
            flip_request_ids=frozenset(raw_stub.get("flip_request_ids", ())),
        )
        initial_stage = str(raw_stub.get("initial_stage", "none"))
        if initial_stage not in ("full", "fallback", "none"):
            raise ConfigError(f"initial_stage must be full|fallback|none, got {initial_stage!r}")
        stubs.append(
            StubSpec(
                config=config,
                endpoint=str(raw_stub.get("endpoint", f"stub://{model_id.render()}")),
                initial_stage=initial_stage,
                deployment_id=raw_stub.get("deployment_id"),
                based_on=parse_model_id(raw_stub["based_on"]) if raw_stub.get("based_on") else None,
                related_to=str(raw_stub.get("related_to", f"service-id:{service}")),
                test_id=raw_stub.get("test_id"),
                signed_off=raw_stub.get("signed_off"),
            )
        )

    raw_traffic = raw["traffic"]
    traffic = TrafficConfig(
        feature_names=tuple(str(n) for n in raw_traffic["features"]),
        components=tuple(
            MixtureComponent(
                weight=float(c["weight"]),
                mean=tuple(float(x) for x in c["mean"]),
                cov_diag=tuple(float(x) for x in c["cov_diag"]),
            )
            for c in raw_traffic["components"]
        ),
        drift_program=tuple(
            DriftEvent(at=int(e["at"]), mean_shift=tuple(float(x) for x in e["mean_shift"]))
            for e in raw_traffic.get("drift_program", ())
        ),
        rate=float(raw_traffic.get("rate", 1.0)),
        total=int(raw_traffic.get("total", 0)),
        start_time=parse_instant(raw_traffic["start_time"])
        if "start_time" in raw_traffic
        else TrafficConfig.__dataclass_fields__["start_time"].default,
    )

    script = tuple(
        ScriptAction(
            at=int(a["at"]),
            action=str(a["action"]),
            params={k: v for k, v in a.items() if k not in ("at", "action")},
        )
        for a in raw.get("script", ())
    )
    return Scenario(
        name=str(raw.get("name", "scenario")),
        seed=int(raw.get("seed", 0)),
        service=service,
        mode=mode,
        window_size=int(raw.get("window_size", 500)),
        feedback_probability=float(raw.get("feedback_probability", 0.5)),
        deadline_ms=float(raw.get("deadline_ms", 500.0)),
        truth=truth,
        stubs=tuple(stubs),
        traffic=traffic,
        policy=PolicyConfig.from_dict(raw.get("policy", {})),
        script=script,
        clusters=raw.get("clusters"),
        drift=dict(raw.get("drift", {})),
    )


@dataclass
class ScenarioReport:
    name: str
    seed: int
    total_requests: int
    served_by_model: dict[str, dict[str, int]]
    served_by_rule: dict[str, int]
    windows: list[dict[str, Any]]
    stage_timeline: list[dict[str, Any]]
    threshold_events: list[dict[str, Any]]
    escalations: dict[str, int]
    feedback: dict[str, int]
    fact_boxes: dict[str, dict[str, Any]]
    log_entries: int

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "seed": self.seed,
            "total_requests": self.total_requests,
            "served_by_model": {m: dict(sorted(r.items())) for m, r in sorted(self.served_by_model.items())},
            "served_by_rule": dict(sorted(self.served_by_rule.items())),
            "windows": self.windows,
            "stage_timeline": self.stage_timeline,
            "threshold_events": self.threshold_events,
            "escalations": dict(sorted(self.escalations.items())),
            "feedback": dict(sorted(self.feedback.items())),
            "fact_boxes": {m: fb for m, fb in sorted(self.fact_boxes.items())},
            "log_entries": self.log_entries,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)


class ScenarioRunner:
    def __init__(self, scenario: Scenario, log_dir: Path | None = None) -> None:
        self.scenario = scenario
        self.clock = SimClock(scenario.traffic.start_time, step_seconds=1.0 / scenario.traffic.rate)
        self.tick = 0
        self.audit = AuditLog(self.clock)
        self.audit.tick_provider = lambda: self.tick
        self.registry = ModelRegistry(self.clock, audit=self.audit)
        self.log = CallLog(persist_dir=log_dir)
        self.engine = PolicyEngine(self.registry, scenario.policy, clock=self.clock, audit=self.audit)
        self.escalations = EscalationQueue(self.clock)
        self.gateway = Gateway(
            service=scenario.service,
            registry=self.registry,
            call_log=self.log,
            policy_engine=self.engine,
            escalations=self.escalations,
            clock=self.clock,
            audit=self.audit,
            deadline_ms=scenario.deadline_ms,
        )
        self.escalations.feedback_sink = self.gateway.handle_feedback
        self.stubs: dict[str, StubModel] = {}
        for spec in scenario.stubs:
            stub = StubModel(spec.config, substream(scenario.seed, f"stub:{spec.config.model_id.render()}"))
            self.stubs[spec.config.model_id.render()] = stub
            self.gateway.register_backend(spec.endpoint, stub)
        self.feedback_rng = substream(scenario.seed, "feedback")
        self.traffic_rng = substream(scenario.seed, "traffic")
        self.windows: list[dict[str, Any]] = []
        self.reference_features: list | None = None
        self._setup_initial_models()

    def _setup_initial_models(self) -> None:
        for spec in self.scenario.stubs:
            if spec.initial_stage == "none":
                continue
            notification = VersionNotification(
                model_id=spec.config.model_id,
                based_on=spec.based_on,
                related_to=spec.related_to,
                endpoint=spec.endpoint,
                test_id=spec.test_id,
                signed_off=spec.signed_off,
            )
            self.registry.register_version(notification, deployment_id=spec.deployment_id)
            self.registry.set_stage(
                spec.config.model_id, Stage(spec.initial_stage), "scenario setup", actor="scenario"
            )

    # -- script actions -------------------------------------------------------

    def _run_action(self, action: ScriptAction) -> None:
        p = action.params
        if action.action == "notify":
            notification = VersionNotification(
                model_id=parse_model_id(p["model_id"]),
                based_on=parse_model_id(p["based_on"]) if p.get("based_on") else None,
                related_to=str(p.get("related_to", f"service-id:{self.scenario.service}")),
                endpoint=str(p.get("endpoint", f"stub://{p['model_id']}")),
                test_id=p.get("test_id"),
                signed_off=p.get("signed_off"),
            )
            if self.scenario.mode == "direct_cutover":
                record = self.registry.register_version(notification, deployment_id=p.get("deployment_id"))
                try:
                    champion = self.registry.resolve_chain(self.scenario.service).champion
                    self.registry.set_stage(champion, Stage.RETIRED, "direct cutover", actor="script")
                except NoChampion:
                    pass
                self.registry.set_stage(record.id, Stage.FULL, "direct cutover", actor="script")
            else:
                self.gateway.handle_notify(notification, deployment_id=p.get("deployment_id"))
        elif action.action == "promote":
            self.engine.promote(self.scenario.service, actor="script", cause=p.get("cause", "scripted promote"))
        elif action.action == "rollback":
            self.engine.rollback(self.scenario.service, actor="script", cause=p.get("cause", "scripted rollback"))
        elif action.action == "set_policy":
            self.engine.update_config(PolicyConfig.from_dict(p["policy"]), actor="script")
        elif action.action == "resolve_escalations":
            worker = str(p.get("worker", "scripted-worker"))
            for escalation in self.escalations.list("pending"):
                label = self.scenario.truth.label_for(escalation.request.features)
                self.escalations.resolve(escalation.id, label=label, worker=worker)
        elif action.action == "fit_clusters":
            self._fit_clusters(int(p.get("window", self.scenario.window_size)), int(p.get("k", 8)))
        else:
            raise ConfigError(f"unknown script action {action.action!r}")

    def _fit_clusters(self, window: int, k: int) -> None:
        entries = self.log.entries(last=window)
        if len(entries) < k:
            return
        model = fit_clusters(
            vectors=[e.features for e in entries],
            k=k,
            seed=self.scenario.seed,
            feedback_verdicts=[e.feedback.verdict if e.feedback else None for e in entries],
            confidences=[e.served.top_confidence for e in entries],
            fitted_at=self.clock.now(),
            training_window=(entries[0].seq, entries[-1].seq),
        )
        self.gateway.set_clusters(model)

    # -- main loop ---------------------------------------------------------------

    def run(self) -> ScenarioReport:
        scenario = self.scenario
        actions_by_tick: dict[int, list[ScriptAction]] = {}
        for action in scenario.script:
            actions_by_tick.setdefault(action.at, []).append(action)
        cluster_fit_at = set()
        cluster_cfg = scenario.clusters or {}
        for at in cluster_cfg.get("fit_at", ()):  # type: ignore[union-attr]
            cluster_fit_at.add(int(at))

        stream = gen_traffic(scenario.traffic, self.traffic_rng)
        for i in range(1, scenario.traffic.total + 1):
            self.tick = i
            self.clock.advance_to_tick(i)
            for action in actions_by_tick.get(i, ()):
                self._run_action(action)
            if i in cluster_fit_at:
                self._fit_clusters(int(cluster_cfg.get("window", scenario.window_size)), int(cluster_cfg.get("k", 8)))
            request = next(stream)
            response, _ = self.gateway.handle_score(request)
            if response.predictions and self.feedback_rng.random() < scenario.feedback_probability:
                truth_label = scenario.truth.label_for(request.features)
                verdict = "good" if response.predictions[0].result == truth_label else "bad"
                self.gateway.handle_feedback(
                    FeedbackRecord(
                        request_id=request.request_id,
                        verdict=verdict,
                        true_label=truth_label,
                        timestamp=self.clock.now(),
                    )
                )
            if i % scenario.window_size == 0:
                self._close_window(i)
        return self._build_report()

    def _close_window(self, tick: int) -> None:
        scenario = self.scenario
        window = scenario.window_size
        entries = self.log.entries()
        if self.reference_features is None and len(entries) >= window:
            self.reference_features = [e.features for e in entries[:window]]
        drift_payload = None
        if self.reference_features is not None and len(entries) >= 2 * window:
            current = [e.features for e in entries[-window:]]
            report = drift_report(
                self.reference_features,
                current,
                bins=int(scenario.drift.get("bins", 10)),
                alarm_threshold=float(scenario.drift.get("alarm_threshold", 0.2)),
                clusters=self.gateway.clusters,
                gamma=scenario.policy.cluster_gate.anomaly_factor,
            )
            drift_payload = {
                "aggregate": report.aggregate,
                "alarm": report.alarm,
                "anomalous_rate": report.anomalous_rate,
            }
        good_rates = {}
        for record in self.registry.records(scenario.service):
            stats = window_stats(self.log, record.id, window)
            if stats.call_count:
                good_rates[record.id.render()] = {
                    "call_count": stats.call_count,
                    "good_rate": stats.good_rate,
                }
        rollout = self.engine.rollout_for(scenario.service)
        self.windows.append(
            {
                "index": len(self.windows) + 1,
                "to_tick": tick,
                "good_rate": good_rates,
                "drift": drift_payload,
                "rollout_stage": rollout.stage.value if rollout else None,
            }
        )

    def _build_report(self) -> ScenarioReport:
        entries = self.log.entries()
        served_by_model: dict[str, dict[str, int]] = {}
        served_by_rule: dict[str, int] = {}
        good = bad = 0
        for entry in entries:
            rule = entry.decision.rule
            model = entry.served_via.render()
            served_by_model.setdefault(model, {})
            served_by_model[model][rule] = served_by_model[model].get(rule, 0) + 1
            served_by_rule[rule] = served_by_rule.get(rule, 0) + 1
            if entry.feedback is not None:
                if entry.feedback.verdict == "good":
                    good += 1
                else:
                    bad += 1
        total_served = sum(served_by_rule.values())
        if total_served != len(entries):  # pragma: no cover - arithmetic identity
            raise ScenarioAborted("served counts do not sum to the log size")
        fact_boxes = {}
        for record in self.registry.records(self.scenario.service):
            box = self.gateway.fact_box(record.id)
            payload = box.to_json_dict()
            payload["text"] = render_fact_box_text(box)
            fact_boxes[record.id.render()] = payload
        timeline = [
            {
                "tick": e.tick,
                "model": e.details.get("model"),
                "from": (e.before or {}).get("stage"),
                "to": (e.after or {}).get("stage"),
                "cause": e.cause,
            }
            for e in self.audit.entries("stage_change")
        ]
        thresholds = [
            {"tick": e.tick, "tau": e.details.get("tau"), "index": e.details.get("index")}
            for e in self.audit.entries("threshold_change")
        ]
        resolved = len(self.escalations.list("resolved"))
        pending = len(self.escalations.list("pending"))
        return ScenarioReport(
            name=self.scenario.name,
            seed=self.scenario.seed,
            total_requests=self.scenario.traffic.total,
            served_by_model=served_by_model,
            served_by_rule=served_by_rule,
            windows=self.windows,
            stage_timeline=timeline,
            threshold_events=thresholds,
            escalations={"enqueued": resolved + pending, "resolved": resolved, "pending": pending},
            feedback={"joined": good + bad, "good": good, "bad": bad},
            fact_boxes=fact_boxes,
            log_entries=len(entries),
        )


def run_scenario(scenario: Scenario | Mapping[str, Any], log_dir: Path | None = None) -> ScenarioReport:
    """Execute a scenario document end to end; deterministic per seed."""
    if not isinstance(scenario, Scenario):
        scenario = Scenario.from_dict(scenario)
    runner = ScenarioRunner(scenario, log_dir=log_dir)
    try:
        return runner.run()
    except ConfigError:
        raise
    except Exception as exc:
        try:
            partial = runner._build_report()
        except Exception:
            partial = None
        raise ScenarioAborted(f"scenario {scenario.name!r} aborted: {exc}", report=partial) from exc
