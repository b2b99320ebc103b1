"""Routing policy: canary cohorts, confidence thresholds, cluster gating, and
the staged rollout state machine (shadow -> canary -> thresholded -> full,
with rollback to retired at any point past shadow).

All rule evaluation is pure; the PolicyEngine owns the mutable rollout state
and applies transitions through the registry.
"""

from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from typing import TYPE_CHECKING, Any, Mapping

from .audit import AuditLog
from .protocol import ModelId, ScoreRequest, ScoreResponse
from .registry import ActiveChain, ModelRegistry, NoChampion, Stage

if TYPE_CHECKING:  # pragma: no cover
    from .analytics import ClusterAssignment, ClusterModel


class PolicyError(RuntimeError):
    pass


class RolloutInProgress(PolicyError):
    pass


class NoActiveRollout(PolicyError):
    pass


class GateUnavailable(PolicyError):
    pass


class PolicyConfigError(ValueError):
    pass


# Serve-path rules; tags follow the proxy's invocation numbering scheme:
# 4a champion, 4b challenger (canary or threshold trial), 4c fallback model,
# 4d human escalation.
RULE_CHAMPION = "champion"
RULE_CHALLENGER_CANARY = "challenger_canary"
RULE_CHALLENGER_THRESHOLD = "challenger_threshold"
RULE_FALLBACK = "fallback"
RULE_ESCALATE = "escalate"

RULE_TAGS = {
    RULE_CHAMPION: "4a",
    RULE_CHALLENGER_CANARY: "4b",
    RULE_CHALLENGER_THRESHOLD: "4b",
    RULE_FALLBACK: "4c",
    RULE_ESCALATE: "4d",
}


def _check_unit(value: float, what: str) -> float:
    if not 0.0 <= value <= 1.0:
        raise PolicyConfigError(f"{what} must be in [0,1], got {value}")
    return float(value)


@dataclass(frozen=True)
class ClusterGateConfig:
    enabled: bool = False
    min_cluster_good_rate: float = 0.8
    anomaly_factor: float = 1.5

    def __post_init__(self) -> None:
        _check_unit(self.min_cluster_good_rate, "min_cluster_good_rate")
        if self.anomaly_factor <= 0:
            raise PolicyConfigError(f"anomaly_factor must be > 0, got {self.anomaly_factor}")


@dataclass(frozen=True)
class ExceptionConfig:
    min_confidence: float = 0.0
    on_exception: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        _check_unit(self.min_confidence, "min_confidence")
        for action in self.on_exception:
            if action not in ("use_fallback", "escalate"):
                raise PolicyConfigError(f"unknown exception action: {action!r}")
        if len(set(self.on_exception)) != len(self.on_exception):
            raise PolicyConfigError("duplicate exception actions")


@dataclass(frozen=True)
class PromotionConfig:
    shadow_min_requests: int = 1000
    shadow_min_agreement: float = 0.999
    canary_min_feedback: int = 200
    rollback_delta: float = 0.05
    stage_dwell_requests: int = 500

    def __post_init__(self) -> None:
        _check_unit(self.shadow_min_agreement, "shadow_min_agreement")
        _check_unit(self.rollback_delta, "rollback_delta")
        for name in ("shadow_min_requests", "canary_min_feedback", "stage_dwell_requests"):
            if getattr(self, name) < 1:
                raise PolicyConfigError(f"{name} must be >= 1")


@dataclass(frozen=True)
class PolicyConfig:
    canary_fraction: float = 0.1
    canary_salt: str = "s1"
    threshold_schedule: tuple[float, ...] = (0.95, 0.9, 0.8, 0.7)
    cluster_gate: ClusterGateConfig = field(default_factory=ClusterGateConfig)
    exception: ExceptionConfig = field(default_factory=ExceptionConfig)
    promotion: PromotionConfig = field(default_factory=PromotionConfig)

    def __post_init__(self) -> None:
        _check_unit(self.canary_fraction, "canary_fraction")
        if not self.threshold_schedule:
            raise PolicyConfigError("threshold_schedule must be non-empty")
        for tau in self.threshold_schedule:
            _check_unit(tau, "threshold")
        for a, b in zip(self.threshold_schedule, self.threshold_schedule[1:]):
            if b >= a:
                raise PolicyConfigError("threshold_schedule must be strictly descending")

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "PolicyConfig":
        try:
            gate = raw.get("cluster_gate", {})
            exc = raw.get("exception", {})
            promo = raw.get("promotion", {})
            return cls(
                canary_fraction=float(raw.get("canary_fraction", 0.1)),
                canary_salt=str(raw.get("canary_salt", "s1")),
                threshold_schedule=tuple(float(t) for t in raw.get("threshold_schedule", (0.95, 0.9, 0.8, 0.7))),
                cluster_gate=ClusterGateConfig(
                    enabled=bool(gate.get("enabled", False)),
                    min_cluster_good_rate=float(gate.get("min_cluster_good_rate", 0.8)),
                    anomaly_factor=float(gate.get("anomaly_factor", 1.5)),
                ),
                exception=ExceptionConfig(
                    min_confidence=float(exc.get("min_confidence", 0.0)),
                    on_exception=tuple(str(a) for a in exc.get("on_exception", ())),
                ),
                promotion=PromotionConfig(
                    shadow_min_requests=int(promo.get("shadow_min_requests", 1000)),
                    shadow_min_agreement=float(promo.get("shadow_min_agreement", 0.999)),
                    canary_min_feedback=int(promo.get("canary_min_feedback", 200)),
                    rollback_delta=float(promo.get("rollback_delta", 0.05)),
                    stage_dwell_requests=int(promo.get("stage_dwell_requests", 500)),
                ),
            )
        except (TypeError, ValueError) as exc_info:
            if isinstance(exc_info, PolicyConfigError):
                raise
            raise PolicyConfigError(str(exc_info)) from exc_info

    def to_dict(self) -> dict[str, Any]:
        return {
            "canary_fraction": self.canary_fraction,
            "canary_salt": self.canary_salt,
            "threshold_schedule": list(self.threshold_schedule),
            "cluster_gate": {
                "enabled": self.cluster_gate.enabled,
                "min_cluster_good_rate": self.cluster_gate.min_cluster_good_rate,
                "anomaly_factor": self.cluster_gate.anomaly_factor,
            },
            "exception": {
                "min_confidence": self.exception.min_confidence,
                "on_exception": list(self.exception.on_exception),
            },
            "promotion": {
                "shadow_min_requests": self.promotion.shadow_min_requests,
                "shadow_min_agreement": self.promotion.shadow_min_agreement,
                "canary_min_feedback": self.promotion.canary_min_feedback,
                "rollback_delta": self.promotion.rollback_delta,
                "stage_dwell_requests": self.promotion.stage_dwell_requests,
            },
        }


@dataclass(frozen=True)
class ServeStep:
    target: ModelId | None  # None only for the escalate rule
    rule: str


@dataclass(frozen=True)
class RoutingDecision:
    serve_path: tuple[ServeStep, ...]
    shadow_targets: tuple[ModelId, ...]
    reason: str
    tau: float | None = None
    rollout_stage: str | None = None

    def __post_init__(self) -> None:
        if not self.serve_path:
            raise PolicyError("serve_path must be non-empty")
        for i, step in enumerate(self.serve_path):
            if (step.target is None) != (step.rule == RULE_ESCALATE):
                raise PolicyError("step target is None exactly for escalate")
            if step.rule == RULE_ESCALATE and i != len(self.serve_path) - 1:
                raise PolicyError("escalate must be the last serve step")
        targets = {s.target for s in self.serve_path if s.target is not None}
        if targets & set(self.shadow_targets):
            raise PolicyError("shadow targets must be disjoint from the serve path")


# -- pure rules -------------------------------------------------------------

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_BUCKETS = 1_000_000


def _fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def canary_assign(request_id: str, fraction: float, salt: str) -> bool:
    """Deterministic cohort assignment: hash-bucket the id and compare to the
    fraction, so replays route identically and cohorts grow monotonically."""
    bucket = _fnv1a64((salt + request_id).encode("utf-8")) % _BUCKETS
    return bucket / _BUCKETS < fraction


def apply_threshold(challenger_resp: ScoreResponse, tau: float) -> bool:
    """True when the challenger's answer clears the confidence bar."""
    top = challenger_resp.top_confidence
    if top is None:
        raise PolicyError("challenger response carries no predictions")
    return top >= tau


def cluster_gate(
    assignment: "ClusterAssignment", clusters: "ClusterModel | None", cfg: ClusterGateConfig
) -> bool:
    """True when the input sits in a historical cluster with a good track record."""
    if clusters is None:
        raise GateUnavailable("no cluster model fitted")
    if assignment.anomalous:
        return False
    good_rate = clusters.stats[assignment.index].good_rate
    if good_rate is None:
        return False
    return good_rate >= cfg.min_cluster_good_rate


class TransitionAction(Enum):
    HOLD = "hold"
    PROMOTE = "promote"
    LOWER_THRESHOLD = "lower_threshold"
    ROLLBACK = "rollback"


@dataclass
class RolloutMetrics:
    shadow_pairs: int = 0
    shadow_agree: int = 0
    challenger_good: int = 0
    challenger_bad: int = 0
    champion_good: int = 0
    champion_bad: int = 0

    @property
    def agreement(self) -> float | None:
        if self.shadow_pairs == 0:
            return None
        return self.shadow_agree / self.shadow_pairs

    @property
    def good_rate_challenger(self) -> float | None:
        n = self.challenger_good + self.challenger_bad
        return self.challenger_good / n if n else None

    @property
    def good_rate_champion(self) -> float | None:
        n = self.champion_good + self.champion_bad
        return self.champion_good / n if n else None

    @property
    def feedback_count(self) -> int:
        return self.challenger_good + self.challenger_bad + self.champion_good + self.champion_bad

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "agreement": self.agreement,
            "shadow_pairs": self.shadow_pairs,
            "good_rate_challenger": self.good_rate_challenger,
            "good_rate_champion": self.good_rate_champion,
            "feedback_count": self.feedback_count,
        }


@dataclass
class RolloutState:
    challenger: ModelId
    stage: Stage
    entered_at: datetime
    requests_in_stage: int = 0
    threshold_index: int = 0
    metrics: RolloutMetrics = field(default_factory=RolloutMetrics)
    outcome: str | None = None  # "full" or "retired" once finished

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "challenger": self.challenger.render(),
            "stage": self.stage.value,
            "entered_at": self.entered_at.isoformat(),
            "requests_in_stage": self.requests_in_stage,
            "threshold_index": self.threshold_index,
            "metrics": self.metrics.to_json_dict(),
            "outcome": self.outcome,
        }


def evaluate_transition(rollout: RolloutState, cfg: PolicyConfig) -> TransitionAction:
    """Decide the next state-machine move from the rollout's own counters."""
    m = rollout.metrics
    promo = cfg.promotion
    if rollout.stage in (Stage.CANARY, Stage.THRESHOLDED):
        gc, gch = m.good_rate_challenger, m.good_rate_champion
        if (
            m.feedback_count >= promo.canary_min_feedback
            and gc is not None
            and gch is not None
            and gc < gch - promo.rollback_delta
        ):
            return TransitionAction.ROLLBACK
    if rollout.stage is Stage.SHADOW:
        if (
            rollout.requests_in_stage >= promo.shadow_min_requests
            and m.agreement is not None
            and m.agreement >= promo.shadow_min_agreement
        ):
            return TransitionAction.PROMOTE
        return TransitionAction.HOLD
    if rollout.stage is Stage.CANARY:
        if m.feedback_count >= promo.canary_min_feedback:
            return TransitionAction.PROMOTE
        return TransitionAction.HOLD
    if rollout.stage is Stage.THRESHOLDED:
        if rollout.requests_in_stage >= promo.stage_dwell_requests:
            if rollout.threshold_index + 1 < len(cfg.threshold_schedule):
                return TransitionAction.LOWER_THRESHOLD
            return TransitionAction.PROMOTE
        return TransitionAction.HOLD
    return TransitionAction.HOLD


def decide(
    req: ScoreRequest,
    chain: ActiveChain,
    rollout: RolloutState | None,
    cfg: PolicyConfig,
    clusters: "ClusterModel | None" = None,
    assignment: "ClusterAssignment | None" = None,
) -> RoutingDecision:
    """Pure routing rules; identical inputs always yield identical decisions."""
    anomalous = bool(assignment is not None and assignment.anomalous)
    steps: list[ServeStep] = []
    tau: float | None = None
    challenger = chain.challenger
    stage = chain.challenger_stage

    if challenger is None:
        steps.append(ServeStep(chain.champion, RULE_CHAMPION))
        reason = "champion serves; no canary/thresholded challenger"
    elif stage is Stage.CANARY:
        if canary_assign(req.request_id, cfg.canary_fraction, cfg.canary_salt):
            steps.append(ServeStep(challenger, RULE_CHALLENGER_CANARY))
            steps.append(ServeStep(chain.champion, RULE_CHAMPION))
            reason = f"canary cohort (fraction={cfg.canary_fraction:g})"
        else:
            steps.append(ServeStep(chain.champion, RULE_CHAMPION))
            reason = "outside canary cohort"
    else:  # thresholded
        tau = cfg.threshold_schedule[rollout.threshold_index if rollout else 0]
        blocked = None
        if cfg.cluster_gate.enabled:
            if clusters is None or assignment is None:
                blocked = "cluster gate unavailable"
            elif anomalous:
                blocked = "anomalous input"
            elif not cluster_gate(assignment, clusters, cfg.cluster_gate):
                blocked = "cluster below good-rate floor"
        if blocked:
            steps.append(ServeStep(chain.champion, RULE_CHAMPION))
            reason = f"champion serves; {blocked}"
        else:
            steps.append(ServeStep(challenger, RULE_CHALLENGER_THRESHOLD))
            steps.append(ServeStep(chain.champion, RULE_CHAMPION))
            reason = f"threshold trial (tau={tau:g})"

    for action in cfg.exception.on_exception:
        if action == "use_fallback":
            if chain.fallback is not None:
                steps.append(ServeStep(chain.fallback, RULE_FALLBACK))
        else:
            steps.append(ServeStep(None, RULE_ESCALATE))
            break  # anything after an escalation would never run

    rollout_stage = rollout.stage.value if rollout else (stage.value if stage else None)
    return RoutingDecision(
        serve_path=tuple(steps),
        shadow_targets=tuple(chain.shadows),
        reason=reason,
        tau=tau,
        rollout_stage=rollout_stage,
    )


# -- engine -----------------------------------------------------------------


class PolicyEngine:
    """Owns per-service rollout state and drives transitions via the registry.

    A single challenger rolls out at a time; further version notifications
    queue FIFO and start automatically when the active rollout finishes.
    """

    def __init__(
        self,
        registry: ModelRegistry,
        config: PolicyConfig | None = None,
        clock=None,
        audit: AuditLog | None = None,
    ) -> None:
        from .clock import SystemClock

        self._registry = registry
        self._config = config or PolicyConfig()
        self._clock = clock or SystemClock()
        self._audit = audit
        self._lock = threading.RLock()
        self._rollouts: dict[str, RolloutState] = {}
        self._completed: dict[str, list[RolloutState]] = {}
        self._queue: dict[str, deque[ModelId]] = {}

    @property
    def config(self) -> PolicyConfig:
        return self._config

    def update_config(self, new: PolicyConfig, actor: str, cause: str = "policy update") -> None:
        with self._lock:
            old = self._config
            self._config = new
            if self._audit is not None:
                self._audit.append(
                    "policy_update", actor=actor, cause=cause,
                    before=old.to_dict(), after=new.to_dict(),
                )

    # -- rollout lifecycle ---------------------------------------------------

    def start_rollout(self, challenger: ModelId) -> RolloutState:
        with self._lock:
            service = challenger.service
            if service in self._rollouts:
                raise RolloutInProgress(f"service {service!r} already has an active rollout")
            self._registry.resolve_chain(service)  # raises NoChampion
            self._registry.set_stage(challenger, Stage.SHADOW, "rollout started: shadowing live traffic")
            state = RolloutState(challenger=challenger, stage=Stage.SHADOW, entered_at=self._clock.now())
            self._rollouts[service] = state
            return state

    def handle_new_version(self, challenger: ModelId) -> bool:
        """Start a rollout for a freshly registered version, or queue it.

        Returns True when the rollout started immediately.
        """
        with self._lock:
            service = challenger.service
            try:
                self._registry.resolve_chain(service)
            except NoChampion:
                self._queue.setdefault(service, deque()).append(challenger)
                return False
            if service in self._rollouts:
                self._queue.setdefault(service, deque()).append(challenger)
                return False
            self.start_rollout(challenger)
            return True

    def maybe_start_next(self, service: str) -> bool:
        """Kick a queued challenger once a champion exists and no rollout runs."""
        with self._lock:
            if service in self._rollouts:
                return False
            queue = self._queue.get(service)
            if not queue:
                return False
            try:
                self._registry.resolve_chain(service)
            except NoChampion:
                return False
            self.start_rollout(queue.popleft())
            return True

    def rollout_for(self, service: str) -> RolloutState | None:
        with self._lock:
            return self._rollouts.get(service)

    def completed_rollouts(self, service: str) -> list[RolloutState]:
        with self._lock:
            return list(self._completed.get(service, []))

    def queued(self, service: str) -> list[ModelId]:
        with self._lock:
            return list(self._queue.get(service, ()))

    def tau_in_force(self, service: str) -> float | None:
        with self._lock:
            rollout = self._rollouts.get(service)
            if rollout is None or rollout.stage is not Stage.THRESHOLDED:
                return None
            return self._config.threshold_schedule[rollout.threshold_index]

    # -- observations ---------------------------------------------------------

    def note_request(self, service: str, shadow_pair_agreed: bool | None = None) -> None:
        """Count a scored request against the active rollout and evaluate."""
        with self._lock:
            rollout = self._rollouts.get(service)
            if rollout is None:
                return
            rollout.requests_in_stage += 1
            if rollout.stage is Stage.SHADOW and shadow_pair_agreed is not None:
                rollout.metrics.shadow_pairs += 1
                if shadow_pair_agreed:
                    rollout.metrics.shadow_agree += 1
            self._evaluate_and_apply(service)

    def note_feedback(self, service: str, serve_stage: str | None, serve_rule: str, verdict: str) -> None:
        """Attribute a joined feedback verdict to the rollout KPI counters."""
        with self._lock:
            rollout = self._rollouts.get(service)
            if rollout is None or serve_stage not in (Stage.CANARY.value, Stage.THRESHOLDED.value):
                return
            good = verdict == "good"
            m = rollout.metrics
            if serve_rule in (RULE_CHALLENGER_CANARY, RULE_CHALLENGER_THRESHOLD):
                if good:
                    m.challenger_good += 1
                else:
                    m.challenger_bad += 1
            elif serve_rule == RULE_CHAMPION:
                if good:
                    m.champion_good += 1
                else:
                    m.champion_bad += 1
            else:
                return
            self._evaluate_and_apply(service)

    # -- manual controls ------------------------------------------------------

    def promote(self, service: str, actor: str, cause: str = "manual promote") -> RolloutState:
        """Advance one stage along the rollout edges, skipping the metric gates."""
        with self._lock:
            rollout = self._rollouts.get(service)
            if rollout is None:
                raise NoActiveRollout(f"service {service!r} has no active rollout")
            if rollout.stage is Stage.SHADOW:
                self._enter_canary(service, rollout, cause, actor)
            elif rollout.stage is Stage.CANARY:
                self._enter_thresholded(service, rollout, cause, actor)
            elif rollout.stage is Stage.THRESHOLDED:
                self._finish_full(service, rollout, cause, actor)
            else:  # pragma: no cover - defensive
                raise NoActiveRollout(f"rollout already {rollout.stage.value}")
            return rollout

    def rollback(self, service: str, actor: str, cause: str = "manual rollback") -> RolloutState:
        with self._lock:
            rollout = self._rollouts.get(service)
            if rollout is None:
                raise NoActiveRollout(f"service {service!r} has no active rollout")
            self._finish_retired(service, rollout, cause, actor)
            return rollout

    # -- transition plumbing ---------------------------------------------------

    def _evaluate_and_apply(self, service: str) -> None:
        rollout = self._rollouts.get(service)
        if rollout is None:
            return
        action = evaluate_transition(rollout, self._config)
        m = rollout.metrics
        if action is TransitionAction.HOLD:
            return
        if action is TransitionAction.ROLLBACK:
            cause = (
                f"challenger good rate {m.good_rate_challenger:.4f} < champion "
                f"{m.good_rate_champion:.4f} - delta {self._config.promotion.rollback_delta:g} "
                f"after {m.feedback_count} feedbacks"
            )
            self._finish_retired(service, rollout, cause, "policy")
        elif action is TransitionAction.LOWER_THRESHOLD:
            rollout.threshold_index += 1
            rollout.requests_in_stage = 0
            tau = self._config.threshold_schedule[rollout.threshold_index]
            if self._audit is not None:
                self._audit.append(
                    "threshold_change",
                    actor="policy",
                    cause=f"dwell reached; confidence threshold lowered to {tau:g}",
                    details={"service": service, "tau": tau, "index": rollout.threshold_index},
                )
        elif action is TransitionAction.PROMOTE:
            if rollout.stage is Stage.SHADOW:
                cause = (
                    f"shadow gate passed: {rollout.requests_in_stage} requests, "
                    f"agreement {m.agreement:.6f} >= {self._config.promotion.shadow_min_agreement:g}"
                )
                self._enter_canary(service, rollout, cause, "policy")
            elif rollout.stage is Stage.CANARY:
                cause = f"canary gate passed: {m.feedback_count} feedbacks, no KPI regression"
                self._enter_thresholded(service, rollout, cause, "policy")
            else:
                cause = "threshold schedule exhausted without KPI regression"
                self._finish_full(service, rollout, cause, "policy")

    def _enter_canary(self, service: str, rollout: RolloutState, cause: str, actor: str) -> None:
        self._registry.set_stage(rollout.challenger, Stage.CANARY, cause, actor)
        rollout.stage = Stage.CANARY
        rollout.entered_at = self._clock.now()
        rollout.requests_in_stage = 0

    def _enter_thresholded(self, service: str, rollout: RolloutState, cause: str, actor: str) -> None:
        self._registry.set_stage(rollout.challenger, Stage.THRESHOLDED, cause, actor)
        rollout.stage = Stage.THRESHOLDED
        rollout.entered_at = self._clock.now()
        rollout.requests_in_stage = 0
        rollout.threshold_index = 0
        if self._audit is not None:
            self._audit.append(
                "threshold_change",
                actor=actor,
                cause=f"thresholded stage entered at tau {self._config.threshold_schedule[0]:g}",
                details={"service": service, "tau": self._config.threshold_schedule[0], "index": 0},
            )

    def _finish_full(self, service: str, rollout: RolloutState, cause: str, actor: str) -> None:
        self._registry.apply_promotion(service, rollout.challenger, cause, actor)
        rollout.stage = Stage.FULL
        rollout.outcome = "full"
        self._archive(service, rollout)

    def _finish_retired(self, service: str, rollout: RolloutState, cause: str, actor: str) -> None:
        self._registry.set_stage(rollout.challenger, Stage.RETIRED, cause, actor)
        rollout.stage = Stage.RETIRED
        rollout.outcome = "retired"
        self._archive(service, rollout)

    def _archive(self, service: str, rollout: RolloutState) -> None:
        self._completed.setdefault(service, []).append(rollout)
        del self._rollouts[service]
        self.maybe_start_next(service)
