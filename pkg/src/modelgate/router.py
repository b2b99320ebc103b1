"""The data plane: score/feedback/notify handling with policy-driven routing.

For every score call the gateway resolves the service's active chain, asks the
policy for a routing decision, walks the serve path (champion 4a, challenger
4b, fallback 4c, human escalation 4d), fires shadow copies only after the
answer is committed, and appends exactly one log entry carrying the decision,
every backend outcome, and the served response.
"""

from __future__ import annotations

import queue
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, replace
from typing import Any, Callable, Protocol

from .analytics import (
    CallLog,
    ClusterAssignment,
    ClusterModel,
    DecisionRecord,
    DriftReport,
    InvocationRecord,
    LogUsageSource,
    SchemaMismatch,
    UsageStats,
    assign_cluster,
    drift_report,
    window_stats,
)
from .audit import AuditLog
from .clock import SystemClock
from .policy import (
    RULE_CHALLENGER_THRESHOLD,
    RULE_CHAMPION,
    RULE_ESCALATE,
    RULE_FALLBACK,
    RULE_TAGS,
    PolicyEngine,
    RoutingDecision,
    ServeStep,
    decide,
)
from .protocol import (
    FeedbackRecord,
    InvariantViolation,
    MessageKind,
    ModelId,
    ProtocolError,
    ScoreRequest,
    ScoreResponse,
    VersionNotification,
    decode_message,
    encode_message,
)
from .registry import ModelRegistry, Stage

DEFAULT_DEADLINE_MS = 500.0


class RouterError(RuntimeError):
    pass


class AllBackendsFailed(RouterError):
    pass


class UnknownRequest(RouterError):
    pass


class ForwardFailed(RouterError):
    pass


@dataclass(frozen=True)
class BackendResult:
    """Totalized outcome of one backend call; failures never raise."""

    outcome: str  # ok | timeout | error
    latency_ms: float
    response: ScoreResponse | None = None
    error_code: str | None = None
    error_text: str | None = None

    @property
    def ok(self) -> bool:
        return self.outcome == "ok"


class Backend(Protocol):
    def score(self, request: ScoreRequest, deadline_ms: float) -> BackendResult: ...

    def feedback(self, record: FeedbackRecord) -> None: ...


class HttpBackend:
    """Model microservice reached over HTTP with the canonical JSON bodies."""

    def __init__(self, endpoint: str) -> None:
        self.endpoint = endpoint.rstrip("/")

    def score(self, request: ScoreRequest, deadline_ms: float) -> BackendResult:
        started = time.perf_counter()
        body = encode_message(request)
        req = urllib.request.Request(
            self.endpoint + "/v1/score",
            data=body,
            headers={"content-type": "application/json"},
            method="POST",
        )
        try:
            with urllib.request.urlopen(req, timeout=deadline_ms / 1000.0) as resp:
                payload = resp.read()
            latency = (time.perf_counter() - started) * 1000.0
            decoded = decode_message(MessageKind.SCORE_RESPONSE, payload)
            if decoded.request_id != request.request_id:
                return BackendResult(
                    outcome="error", latency_ms=latency,
                    error_code="SCHEMA", error_text="response for a different request_id",
                )
            return BackendResult(outcome="ok", latency_ms=latency, response=decoded)
        except ProtocolError as exc:
            latency = (time.perf_counter() - started) * 1000.0
            return BackendResult(outcome="error", latency_ms=latency, error_code="SCHEMA", error_text=str(exc))
        except urllib.error.HTTPError as exc:
            latency = (time.perf_counter() - started) * 1000.0
            return BackendResult(outcome="error", latency_ms=latency, error_code=f"HTTP_{exc.code}", error_text=str(exc))
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            latency = (time.perf_counter() - started) * 1000.0
            reason = getattr(exc, "reason", exc)
            if isinstance(reason, TimeoutError) or isinstance(exc, TimeoutError) or latency >= deadline_ms:
                return BackendResult(outcome="timeout", latency_ms=latency)
            return BackendResult(outcome="error", latency_ms=latency, error_code="CONNECT", error_text=str(exc))

    def feedback(self, record: FeedbackRecord) -> None:
        req = urllib.request.Request(
            self.endpoint + "/v1/feedback",
            data=encode_message(record),
            headers={"content-type": "application/json"},
            method="POST",
        )
        try:
            urllib.request.urlopen(req, timeout=5.0).read()
        except (urllib.error.URLError, OSError) as exc:
            raise ForwardFailed(str(exc)) from exc


@dataclass(frozen=True)
class ServeInfo:
    """Per-request metadata surfaced as response headers."""

    seq: int | None
    decision_id: str
    rule: str
    tag: str
    reason: str


class _ShadowWorker:
    """Single background worker so shadow calls never delay the caller while
    log appends stay totally ordered."""

    def __init__(self) -> None:
        self._queue: queue.Queue[Callable[[], None]] = queue.Queue()
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def _run(self) -> None:
        while True:
            task = self._queue.get()
            try:
                task()
            finally:
                self._queue.task_done()

    def submit(self, task: Callable[[], None]) -> None:
        self._queue.put(task)

    def flush(self) -> None:
        self._queue.join()


class Gateway:
    """One proxied service: same score/feedback/notify surface as a model."""

    def __init__(
        self,
        service: str,
        registry: ModelRegistry,
        call_log: CallLog,
        policy_engine: PolicyEngine,
        escalations: Any = None,
        clock=None,
        audit: AuditLog | None = None,
        deadline_ms: float = DEFAULT_DEADLINE_MS,
        deterministic_latency: bool = True,
        shadow_mode: str = "inline",
    ) -> None:
        if shadow_mode not in ("inline", "background"):
            raise ValueError(f"bad shadow_mode: {shadow_mode!r}")
        self.service = service
        self.registry = registry
        self.log = call_log
        self.policy = policy_engine
        self.escalations = escalations
        self.clock = clock or SystemClock()
        self.audit = audit
        self.deadline_ms = deadline_ms
        self.deterministic_latency = deterministic_latency
        self._backends: dict[str, Backend] = {}
        self._clusters: ClusterModel | None = None
        self._clusters_lock = threading.Lock()
        self._shadow_worker = _ShadowWorker() if shadow_mode == "background" else None
        self.usage_source = LogUsageSource(call_log)

    # -- backend wiring ------------------------------------------------------

    def register_backend(self, endpoint: str, backend: Backend) -> None:
        self._backends[endpoint.rstrip("/")] = backend

    def _backend_for(self, model: ModelId) -> Backend:
        endpoint = self.registry.get(model).endpoint.rstrip("/")
        backend = self._backends.get(endpoint)
        if backend is None:
            if endpoint.startswith(("http://", "https://")):
                backend = HttpBackend(endpoint)
                self._backends[endpoint] = backend
            else:
                raise RouterError(f"no backend registered for endpoint {endpoint!r}")
        return backend

    def invoke_backend(self, model: ModelId, request: ScoreRequest, deadline_ms: float | None = None) -> BackendResult:
        deadline = deadline_ms if deadline_ms is not None else self.deadline_ms
        started = time.perf_counter()
        try:
            backend = self._backend_for(model)
            result = backend.score(request, deadline)
        except Exception as exc:  # totalized: backend faults become results
            latency = (time.perf_counter() - started) * 1000.0
            return BackendResult(outcome="error", latency_ms=latency, error_code="BACKEND", error_text=str(exc))
        if result.ok and result.response is not None and result.response.request_id != request.request_id:
            return BackendResult(
                outcome="error", latency_ms=result.latency_ms,
                error_code="SCHEMA", error_text="response for a different request_id",
            )
        return result

    # -- clusters --------------------------------------------------------------

    @property
    def clusters(self) -> ClusterModel | None:
        with self._clusters_lock:
            return self._clusters

    def set_clusters(self, model: ClusterModel | None) -> None:
        with self._clusters_lock:
            self._clusters = model

    # -- score -------------------------------------------------------------------

    def handle_score(self, request: ScoreRequest) -> tuple[ScoreResponse, ServeInfo]:
        wall_start = time.perf_counter()
        if self.log.has_request(request.request_id):
            raise InvariantViolation(f"duplicate request_id {request.request_id!r}")
        chain = self.registry.resolve_chain(self.service)
        clusters = self.clusters
        assignment: ClusterAssignment | None = None
        if clusters is not None:
            try:
                assignment = assign_cluster(
                    request.features, clusters, self.policy.config.cluster_gate.anomaly_factor
                )
            except SchemaMismatch:
                assignment = None
        rollout = self.policy.rollout_for(self.service)
        decision = decide(request, chain, rollout, self.policy.config, clusters, assignment)

        invocations: list[InvocationRecord] = []
        candidate: BackendResult | None = None
        candidate_step: ServeStep | None = None
        last_attempt: ServeStep | None = None
        normal_steps = [s for s in decision.serve_path if s.rule not in (RULE_FALLBACK, RULE_ESCALATE)]
        exception_steps = [s for s in decision.serve_path if s.rule in (RULE_FALLBACK, RULE_ESCALATE)]

        for step in normal_steps:
            assert step.target is not None
            last_attempt = step
            result = self.invoke_backend(step.target, request)
            invocations.append(self._invocation(step.target, "serve", result))
            if not result.ok or result.response is None:
                continue
            if (
                step.rule == RULE_CHALLENGER_THRESHOLD
                and decision.tau is not None
                and (result.response.top_confidence or 0.0) < decision.tau
            ):
                continue  # 4b below the bar; fall through to 4a
            candidate = result
            candidate_step = step
            break

        anomalous = bool(assignment is not None and assignment.anomalous)
        min_conf = self.policy.config.exception.min_confidence
        low_confidence = (
            candidate is not None
            and candidate.response is not None
            and (candidate.response.top_confidence or 0.0) < min_conf
        )
        exception_fired = candidate is None or anomalous or low_confidence

        served: ScoreResponse | None = None
        served_rule: str | None = None
        served_via: ModelId | None = None
        escalation_id: str | None = None

        if candidate is not None and not (exception_fired and exception_steps):
            served = candidate.response
            served_rule = candidate_step.rule  # type: ignore[union-attr]
            served_via = candidate_step.target  # type: ignore[union-attr]
        else:
            fallback_result: BackendResult | None = None
            fallback_target: ModelId | None = None
            for step in exception_steps:
                if step.rule == RULE_FALLBACK:
                    assert step.target is not None
                    result = self.invoke_backend(step.target, request)
                    invocations.append(self._invocation(step.target, "serve", result))
                    if result.ok and result.response is not None:
                        fallback_result = result
                        fallback_target = step.target
                        served = result.response
                        served_rule = RULE_FALLBACK
                        served_via = step.target
                        break
                else:  # escalate
                    # A fallback answer, if one exists and was not yet tried,
                    # rides along as the provisional prediction set.
                    if fallback_result is None and chain.fallback is not None:
                        result = self.invoke_backend(chain.fallback, request)
                        invocations.append(self._invocation(chain.fallback, "serve", result))
                        if result.ok and result.response is not None:
                            fallback_result = result
                            fallback_target = chain.fallback
                    escalation_id = self._enqueue_escalation(request, decision, invocations)
                    provisional = (
                        fallback_result.response.predictions if fallback_result and fallback_result.response else ()
                    )
                    if fallback_target is not None and provisional:
                        by = fallback_target
                    elif candidate_step is not None and candidate_step.target is not None:
                        by = candidate_step.target
                    elif last_attempt is not None and last_attempt.target is not None:
                        by = last_attempt.target
                    else:  # pragma: no cover - champion is always attempted
                        by = chain.champion
                    served = ScoreResponse(
                        request_id=request.request_id,
                        served_by=by,
                        predictions=provisional,
                        status="escalated",
                        escalation_id=escalation_id,
                        latency_ms=0.0,
                    )
                    served_rule = RULE_ESCALATE
                    served_via = by
                    break
            if served is None and candidate is not None:
                # exception chain exhausted without a usable answer: the low
                # confidence candidate is still better than nothing
                served = candidate.response
                served_rule = candidate_step.rule  # type: ignore[union-attr]
                served_via = candidate_step.target  # type: ignore[union-attr]

        if served is None or served_rule is None or served_via is None:
            raise AllBackendsFailed(
                f"request {request.request_id}: all serve attempts failed and no escalation is configured"
            )

        if self.deterministic_latency:
            serve_latency = sum(inv.latency_ms for inv in invocations)
        else:
            serve_latency = (time.perf_counter() - wall_start) * 1000.0
        response = replace(served, request_id=request.request_id, latency_ms=serve_latency)

        record = DecisionRecord(
            rule=served_rule,
            tag=RULE_TAGS[served_rule],
            reason=decision.reason,
            rollout_stage=decision.rollout_stage,
            tau=decision.tau,
        )

        def finish() -> int:
            return self._run_shadows_and_log(
                request, chain, rollout, decision, record, invocations, response, served_via, assignment
            )

        if self._shadow_worker is None:
            seq = finish()
        else:
            seq = None
            self._shadow_worker.submit(finish)
        info = ServeInfo(
            seq=seq,
            decision_id=f"dec-{seq:08d}" if seq is not None else f"dec-{request.request_id}",
            rule=served_rule,
            tag=RULE_TAGS[served_rule],
            reason=decision.reason,
        )
        return response, info

    def _invocation(self, target: ModelId, purpose: str, result: BackendResult) -> InvocationRecord:
        return InvocationRecord(
            target=target,
            purpose=purpose,
            outcome=result.outcome,
            latency_ms=result.latency_ms,
            response=result.response,
            error_code=result.error_code,
            error_text=result.error_text,
        )

    def _run_shadows_and_log(
        self,
        request: ScoreRequest,
        chain,
        rollout,
        decision: RoutingDecision,
        record: DecisionRecord,
        invocations: list[InvocationRecord],
        response: ScoreResponse,
        served_via: ModelId,
        assignment: ClusterAssignment | None,
    ) -> int:
        shadow_invocations: list[InvocationRecord] = []
        for target in decision.shadow_targets:
            result = self.invoke_backend(target, request)
            shadow_invocations.append(self._invocation(target, "shadow", result))
        served_label = response.predictions[0].result if response.predictions else None
        disagreement = False
        if served_label is not None:
            for inv in shadow_invocations:
                label = inv.top_label()
                if label is not None and label != served_label:
                    disagreement = True
                    break
        entry = self.log.append(
            request_id=request.request_id,
            timestamp=request.timestamp,
            features=request.features,
            decision=record,
            invocations=[*invocations, *shadow_invocations],
            served=response,
            served_via=served_via,
            shadow_disagreement=disagreement,
            cluster=assignment,
        )
        shadow_pair_agreed = None
        if rollout is not None and rollout.stage is Stage.SHADOW and served_via == chain.champion:
            for inv in shadow_invocations:
                if inv.target == rollout.challenger:
                    label = inv.top_label()
                    if label is not None and served_label is not None:
                        shadow_pair_agreed = label == served_label
                    break
        self.policy.note_request(self.service, shadow_pair_agreed)
        return entry.seq

    def flush_shadows(self) -> None:
        if self._shadow_worker is not None:
            self._shadow_worker.flush()

    # -- feedback -------------------------------------------------------------

    def handle_feedback(self, record: FeedbackRecord) -> dict[str, Any]:
        self.flush_shadows()
        try:
            entry, first_join = self.log.join_feedback(record)
        except KeyError as exc:
            raise UnknownRequest(record.request_id) from exc
        forwarded = True
        try:
            self._backend_for(entry.served_via).feedback(record)
        except Exception as exc:
            forwarded = False
            if self.audit is not None:
                self.audit.append(
                    "feedback_forward_failed",
                    actor="system",
                    cause=str(exc),
                    details={"request_id": record.request_id, "target": entry.served_via.render()},
                )
        if first_join:
            self.policy.note_feedback(
                self.service, entry.decision.rollout_stage, entry.decision.rule, record.verdict
            )
        return {"request_id": record.request_id, "joined": True, "forwarded": forwarded}

    # -- notify ----------------------------------------------------------------

    def handle_notify(self, notification: VersionNotification, deployment_id: str | None = None) -> dict[str, Any]:
        record = self.registry.register_version(notification, deployment_id=deployment_id)
        started = self.policy.handle_new_version(record.id)
        current = self.registry.get(record.id)
        return {
            "model_id": record.id.render(),
            "stage": current.stage.value,
            "rollout_started": started,
        }

    # -- derived reports ---------------------------------------------------------

    def stats(self, model: ModelId, window: int = 1000) -> UsageStats:
        return window_stats(self.log, model, window)

    def drift_from_log(
        self, window: int = 1000, bins: int = 10, alarm_threshold: float = 0.2
    ) -> DriftReport:
        entries = self.log.entries()
        if len(entries) < 2 * window:
            raise ValueError(f"need at least {2 * window} entries for a {window}-sized drift window")
        reference = [e.features for e in entries[:window]]
        current = [e.features for e in entries[-window:]]
        return drift_report(
            reference,
            current,
            bins=bins,
            alarm_threshold=alarm_threshold,
            clusters=self.clusters,
            gamma=self.policy.config.cluster_gate.anomaly_factor,
        )

    def fact_box(self, model: ModelId):
        return self.registry.build_fact_box(model, usage=self.usage_source)

    def _enqueue_escalation(
        self, request: ScoreRequest, decision: RoutingDecision, invocations: list[InvocationRecord]
    ) -> str:
        candidates = []
        for inv in invocations:
            if inv.outcome == "ok" and inv.response is not None and inv.response.predictions:
                candidates.append(
                    {
                        "model": inv.target.render(),
                        "top_label": inv.response.predictions[0].result,
                        "top_confidence": inv.response.top_confidence,
                        "predictions": [
                            {"result": p.result, "uncertainty": p.uncertainty}
                            for p in inv.response.predictions
                        ],
                    }
                )
        if self.escalations is None:
            raise AllBackendsFailed("escalation required but no escalation queue is configured")
        return self.escalations.enqueue(request, decision.reason, candidates)


class GatewayBackend:
    """Adapter presenting a whole gateway as one model microservice backend,
    so gateways compose (a proxy can front another proxy)."""

    def __init__(self, gateway: Gateway) -> None:
        self._gateway = gateway

    def score(self, request: ScoreRequest, deadline_ms: float) -> BackendResult:
        started = time.perf_counter()
        try:
            response, _ = self._gateway.handle_score(request)
        except Exception as exc:
            latency = (time.perf_counter() - started) * 1000.0
            return BackendResult(outcome="error", latency_ms=latency, error_code="GATEWAY", error_text=str(exc))
        latency = (time.perf_counter() - started) * 1000.0
        return BackendResult(outcome="ok", latency_ms=latency, response=response)

    def feedback(self, record: FeedbackRecord) -> None:
        self._gateway.handle_feedback(record)
