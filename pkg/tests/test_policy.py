"""Policy rules and the rollout engine."""

from __future__ import annotations

from datetime import datetime, timezone
from functools import reduce

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from modelgate.analytics import ClusterAssignment, ClusterModel, ClusterStats
from modelgate.audit import AuditLog
from modelgate.clock import SimClock
from modelgate.policy import (
    GateUnavailable,
    PolicyConfig,
    PolicyConfigError,
    PolicyEngine,
    PromotionConfig,
    RolloutInProgress,
    RolloutMetrics,
    RolloutState,
    RULE_CHALLENGER_CANARY,
    RULE_CHALLENGER_THRESHOLD,
    RULE_CHAMPION,
    RULE_ESCALATE,
    RULE_FALLBACK,
    TransitionAction,
    apply_threshold,
    canary_assign,
    cluster_gate,
    decide,
    evaluate_transition,
    ClusterGateConfig,
    ExceptionConfig,
)
from modelgate.protocol import (
    FeatureVector,
    ModelId,
    Prediction,
    ScoreRequest,
    ScoreResponse,
    VersionNotification,
)
from modelgate.registry import ActiveChain, ModelRegistry, NoChampion, Stage

SERVICE = "123-345-678"
V220 = ModelId(SERVICE, 220)
V221 = ModelId(SERVICE, 221)
V222 = ModelId(SERVICE, 222)
T0 = datetime(2018, 6, 16, tzinfo=timezone.utc)


def _fnv_oracle(data: bytes) -> int:
    # independent fold-based FNV-1a, kept deliberately different from the
    # implementation under test
    return reduce(lambda h, b: ((h ^ b) * 0x100000001B3) % 2**64, data, 0xCBF29CE484222325)


def request(rid: str = "req-000001") -> ScoreRequest:
    return ScoreRequest(request_id=rid, timestamp=T0, features=FeatureVector.from_pairs([("x", 1.0)]))


def response(uncertainty: float, model: ModelId = V221) -> ScoreResponse:
    from modelgate.protocol import order_predictions

    return ScoreResponse(
        request_id="req-000001",
        served_by=model,
        predictions=order_predictions(
            [Prediction("pos", uncertainty), Prediction("neg", 1.0 - uncertainty)]
        ),
        latency_ms=1.0,
    )


class TestCanaryAssign:
    def test_fraction_zero_empty(self):
        assert not any(canary_assign(f"req-{i:06d}", 0.0, "s1") for i in range(1, 1001))

    def test_fraction_one_full(self):
        assert all(canary_assign(f"req-{i:06d}", 1.0, "s1") for i in range(1, 1001))

    def test_enumeration_oracle(self):
        ids = [f"req-{i:06d}" for i in range(1, 10_001)]
        oracle = sum(
            1
            for rid in ids
            if (_fnv_oracle(("s1" + rid).encode()) % 1_000_000) / 1_000_000 < 0.1
        )
        impl = sum(1 for rid in ids if canary_assign(rid, 0.1, "s1"))
        assert impl == oracle == 986
        assert 910 <= impl <= 1090

    @settings(max_examples=300, deadline=None)
    @given(
        rid=st.text(min_size=1, max_size=20),
        f1=st.floats(min_value=0.0, max_value=1.0),
        f2=st.floats(min_value=0.0, max_value=1.0),
    )
    def test_monotone_in_fraction(self, rid, f1, f2):
        lo, hi = sorted((f1, f2))
        if canary_assign(rid, lo, "s1"):
            assert canary_assign(rid, hi, "s1")

    def test_salt_changes_cohort(self):
        ids = [f"req-{i:06d}" for i in range(1, 2001)]
        a = {rid for rid in ids if canary_assign(rid, 0.1, "s1")}
        b = {rid for rid in ids if canary_assign(rid, 0.1, "s2")}
        assert a != b


class TestApplyThreshold:
    def test_high_confidence_uses_challenger(self):
        assert apply_threshold(response(0.05), 0.9)

    def test_low_confidence_uses_champion(self):
        assert not apply_threshold(response(0.2), 0.9)

    def test_zero_threshold_always_challenger(self):
        assert apply_threshold(response(0.5), 0.0)


def _cluster_model(good_rates, radii=(1.0, 1.0)):
    k = len(good_rates)
    return ClusterModel(
        k=k,
        feature_names=("x", "y"),
        centroids=np.zeros((k, 2)),
        radii=np.asarray(radii, dtype=float),
        stats=tuple(ClusterStats(size=10, good_rate=g, mean_confidence=0.9) for g in good_rates),
    )


class TestClusterGate:
    def test_anomalous_fails(self):
        cm = _cluster_model([0.95, 0.9])
        assignment = ClusterAssignment(index=0, distance=5.0, anomalous=True)
        assert not cluster_gate(assignment, cm, ClusterGateConfig(enabled=True))

    def test_good_cluster_passes(self):
        cm = _cluster_model([0.92, 0.5])
        assignment = ClusterAssignment(index=0, distance=0.5, anomalous=False)
        assert cluster_gate(assignment, cm, ClusterGateConfig(enabled=True, min_cluster_good_rate=0.8))

    def test_weak_cluster_fails(self):
        cm = _cluster_model([0.7, 0.9])
        assignment = ClusterAssignment(index=0, distance=0.5, anomalous=False)
        assert not cluster_gate(assignment, cm, ClusterGateConfig(enabled=True, min_cluster_good_rate=0.8))

    def test_no_model_unavailable(self):
        assignment = ClusterAssignment(index=0, distance=0.5, anomalous=False)
        with pytest.raises(GateUnavailable):
            cluster_gate(assignment, None, ClusterGateConfig(enabled=True))

    def test_unmeasured_cluster_fails_closed(self):
        cm = _cluster_model([None, 0.9])
        assignment = ClusterAssignment(index=0, distance=0.5, anomalous=False)
        assert not cluster_gate(assignment, cm, ClusterGateConfig(enabled=True))


def chain(challenger=None, stage=None, fallback=None, shadows=()):
    return ActiveChain(
        service=SERVICE,
        champion=V220,
        challenger=challenger,
        challenger_stage=stage,
        fallback=fallback,
        shadows=tuple(shadows),
    )


def rollout(stage: Stage, **kwargs) -> RolloutState:
    return RolloutState(challenger=V221, stage=stage, entered_at=T0, **kwargs)


class TestDecide:
    def test_champion_only(self):
        decision = decide(request(), chain(), None, PolicyConfig())
        assert [(s.target, s.rule) for s in decision.serve_path] == [(V220, RULE_CHAMPION)]
        assert decision.shadow_targets == ()

    def test_shadow_stage_serves_champion_and_shadows(self):
        decision = decide(request(), chain(shadows=[V221]), rollout(Stage.SHADOW), PolicyConfig())
        assert [(s.target, s.rule) for s in decision.serve_path] == [(V220, RULE_CHAMPION)]
        assert decision.shadow_targets == (V221,)
        assert decision.rollout_stage == "shadow"

    def test_canary_assigned_gets_challenger_first(self):
        cfg = PolicyConfig(canary_fraction=1.0)
        decision = decide(request(), chain(V221, Stage.CANARY), rollout(Stage.CANARY), cfg)
        assert [s.rule for s in decision.serve_path] == [RULE_CHALLENGER_CANARY, RULE_CHAMPION]

    def test_canary_unassigned_gets_champion(self):
        cfg = PolicyConfig(canary_fraction=0.0)
        decision = decide(request(), chain(V221, Stage.CANARY), rollout(Stage.CANARY), cfg)
        assert [s.rule for s in decision.serve_path] == [RULE_CHAMPION]

    def test_thresholded_trial_path(self):
        decision = decide(request(), chain(V221, Stage.THRESHOLDED), rollout(Stage.THRESHOLDED), PolicyConfig())
        assert [s.rule for s in decision.serve_path] == [RULE_CHALLENGER_THRESHOLD, RULE_CHAMPION]
        assert decision.tau == 0.95

    def test_tau_follows_schedule_index(self):
        r = rollout(Stage.THRESHOLDED, threshold_index=2)
        decision = decide(request(), chain(V221, Stage.THRESHOLDED), r, PolicyConfig())
        assert decision.tau == 0.8

    def test_anomalous_input_blocks_challenger_and_appends_exceptions(self):
        cfg = PolicyConfig(
            cluster_gate=ClusterGateConfig(enabled=True),
            exception=ExceptionConfig(min_confidence=0.6, on_exception=("use_fallback", "escalate")),
        )
        cm = _cluster_model([0.95])
        assignment = ClusterAssignment(index=0, distance=9.0, anomalous=True)
        decision = decide(
            request(),
            chain(V221, Stage.THRESHOLDED, fallback=ModelId(SERVICE, 219)),
            rollout(Stage.THRESHOLDED),
            cfg,
            clusters=cm,
            assignment=assignment,
        )
        rules = [s.rule for s in decision.serve_path]
        assert rules == [RULE_CHAMPION, RULE_FALLBACK, RULE_ESCALATE]

    def test_gate_unavailable_serves_champion(self):
        cfg = PolicyConfig(cluster_gate=ClusterGateConfig(enabled=True))
        decision = decide(request(), chain(V221, Stage.THRESHOLDED), rollout(Stage.THRESHOLDED), cfg)
        assert [s.rule for s in decision.serve_path] == [RULE_CHAMPION]

    def test_escalate_without_fallback_model(self):
        cfg = PolicyConfig(exception=ExceptionConfig(min_confidence=0.9, on_exception=("use_fallback", "escalate")))
        decision = decide(request(), chain(), None, cfg)
        assert [s.rule for s in decision.serve_path] == [RULE_CHAMPION, RULE_ESCALATE]

    def test_pure_replay_equality(self):
        cfg = PolicyConfig()
        args = (request("req-000777"), chain(V221, Stage.CANARY), rollout(Stage.CANARY), cfg)
        assert decide(*args) == decide(*args)


def metrics(**kwargs) -> RolloutMetrics:
    m = RolloutMetrics()
    for key, value in kwargs.items():
        setattr(m, key, value)
    return m


class TestEvaluateTransition:
    CFG = PolicyConfig(
        promotion=PromotionConfig(
            shadow_min_requests=1000,
            shadow_min_agreement=0.999,
            canary_min_feedback=200,
            rollback_delta=0.05,
            stage_dwell_requests=500,
        )
    )

    def test_shadow_promotes_on_agreement(self):
        r = rollout(Stage.SHADOW, requests_in_stage=1500)
        r.metrics = metrics(shadow_pairs=10_000, shadow_agree=9_999)
        assert r.metrics.agreement == pytest.approx(0.9999)
        assert evaluate_transition(r, self.CFG) is TransitionAction.PROMOTE

    def test_shadow_holds_below_agreement(self):
        r = rollout(Stage.SHADOW, requests_in_stage=1500)
        r.metrics = metrics(shadow_pairs=1000, shadow_agree=990)
        assert evaluate_transition(r, self.CFG) is TransitionAction.HOLD

    def test_shadow_holds_below_request_floor(self):
        r = rollout(Stage.SHADOW, requests_in_stage=500)
        r.metrics = metrics(shadow_pairs=500, shadow_agree=500)
        assert evaluate_transition(r, self.CFG) is TransitionAction.HOLD

    def test_canary_rollback_on_kpi_regression(self):
        r = rollout(Stage.CANARY)
        r.metrics = metrics(challenger_good=20, challenger_bad=5, champion_good=203, champion_bad=22)
        # challenger 0.80 vs champion ~0.90, delta 0.05, 250 feedbacks
        assert r.metrics.feedback_count == 250
        assert evaluate_transition(r, self.CFG) is TransitionAction.ROLLBACK

    def test_canary_promotes_at_feedback_floor(self):
        r = rollout(Stage.CANARY)
        r.metrics = metrics(challenger_good=19, challenger_bad=1, champion_good=162, champion_bad=18)
        assert evaluate_transition(r, self.CFG) is TransitionAction.PROMOTE

    def test_canary_holds_before_floor(self):
        r = rollout(Stage.CANARY)
        r.metrics = metrics(challenger_good=10, champion_good=100)
        assert evaluate_transition(r, self.CFG) is TransitionAction.HOLD

    def test_thresholded_dwell_not_reached(self):
        r = rollout(Stage.THRESHOLDED, requests_in_stage=499)
        assert evaluate_transition(r, self.CFG) is TransitionAction.HOLD

    def test_thresholded_lowers_then_promotes(self):
        r = rollout(Stage.THRESHOLDED, requests_in_stage=500, threshold_index=0)
        assert evaluate_transition(r, self.CFG) is TransitionAction.LOWER_THRESHOLD
        r = rollout(Stage.THRESHOLDED, requests_in_stage=500, threshold_index=3)
        assert evaluate_transition(r, self.CFG) is TransitionAction.PROMOTE

    def test_thresholded_rollback_wins_over_lowering(self):
        r = rollout(Stage.THRESHOLDED, requests_in_stage=500)
        r.metrics = metrics(challenger_good=60, challenger_bad=40, champion_good=135, champion_bad=15)
        assert evaluate_transition(r, self.CFG) is TransitionAction.ROLLBACK


class TestPolicyConfig:
    def test_defaults_valid(self):
        cfg = PolicyConfig()
        assert cfg.threshold_schedule == (0.95, 0.9, 0.8, 0.7)

    def test_fraction_bounds(self):
        with pytest.raises(PolicyConfigError):
            PolicyConfig(canary_fraction=1.5)

    def test_schedule_strictly_descending(self):
        with pytest.raises(PolicyConfigError):
            PolicyConfig(threshold_schedule=(0.9, 0.9))

    def test_from_dict_round_trip(self):
        cfg = PolicyConfig.from_dict({"canary_fraction": 0.2, "exception": {"on_exception": ["escalate"]}})
        assert cfg.canary_fraction == 0.2
        assert cfg.exception.on_exception == ("escalate",)
        assert PolicyConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_exception_action(self):
        with pytest.raises(PolicyConfigError):
            PolicyConfig.from_dict({"exception": {"on_exception": ["page_oncall"]}})


def notification(mid, based_on=None):
    return VersionNotification(
        model_id=mid, based_on=based_on, related_to=f"service-id:{SERVICE}",
        endpoint=f"stub://{mid.render()}",
    )


class TestPolicyEngine:
    @pytest.fixture
    def world(self):
        clock = SimClock(T0)
        audit = AuditLog(clock)
        registry = ModelRegistry(clock, audit=audit)
        registry.register_version(notification(V220))
        registry.set_stage(V220, Stage.FULL, "bootstrap")
        engine = PolicyEngine(registry, PolicyConfig(), clock=clock, audit=audit)
        return registry, engine, audit

    def test_start_rollout_moves_to_shadow(self, world):
        registry, engine, _ = world
        registry.register_version(notification(V221, based_on=V220))
        state = engine.start_rollout(V221)
        assert state.stage is Stage.SHADOW
        assert registry.get(V221).stage is Stage.SHADOW

    def test_second_rollout_rejected_and_queued(self, world):
        registry, engine, _ = world
        registry.register_version(notification(V221, based_on=V220))
        engine.start_rollout(V221)
        registry.register_version(notification(V222, based_on=V221))
        with pytest.raises(RolloutInProgress):
            engine.start_rollout(V222)
        assert engine.handle_new_version(V222) is False
        assert engine.queued(SERVICE) == [V222]

    def test_no_champion_defers(self):
        clock = SimClock(T0)
        registry = ModelRegistry(clock)
        registry.register_version(notification(V221))
        engine = PolicyEngine(registry, PolicyConfig(), clock=clock)
        with pytest.raises(NoChampion):
            engine.start_rollout(V221)
        assert engine.handle_new_version(V221) is False
        assert registry.get(V221).stage is Stage.REGISTERED

    def test_queued_challenger_starts_after_rollback(self, world):
        registry, engine, _ = world
        registry.register_version(notification(V221, based_on=V220))
        engine.start_rollout(V221)
        registry.register_version(notification(V222, based_on=V221))
        engine.handle_new_version(V222)
        engine.rollback(SERVICE, actor="test")
        assert registry.get(V221).stage is Stage.RETIRED
        state = engine.rollout_for(SERVICE)
        assert state is not None and state.challenger == V222 and state.stage is Stage.SHADOW

    def test_manual_promote_walks_edges(self, world):
        registry, engine, _ = world
        registry.register_version(notification(V221, based_on=V220))
        engine.start_rollout(V221)
        engine.promote(SERVICE, actor="op")
        assert registry.get(V221).stage is Stage.CANARY
        engine.promote(SERVICE, actor="op")
        assert registry.get(V221).stage is Stage.THRESHOLDED
        engine.promote(SERVICE, actor="op")
        assert registry.get(V221).stage is Stage.FULL
        assert registry.get(V220).stage is Stage.FALLBACK
        assert engine.rollout_for(SERVICE) is None
        assert engine.completed_rollouts(SERVICE)[0].outcome == "full"

    def test_shadow_gate_auto_promotes(self, world):
        registry, engine, _ = world
        engine.update_config(
            PolicyConfig(promotion=PromotionConfig(shadow_min_requests=10, shadow_min_agreement=0.9)),
            actor="test",
        )
        registry.register_version(notification(V221, based_on=V220))
        engine.start_rollout(V221)
        for _ in range(10):
            engine.note_request(SERVICE, shadow_pair_agreed=True)
        assert registry.get(V221).stage is Stage.CANARY

    def test_rollback_on_bad_feedback(self, world):
        registry, engine, _ = world
        engine.update_config(
            PolicyConfig(promotion=PromotionConfig(canary_min_feedback=10, rollback_delta=0.05)),
            actor="test",
        )
        registry.register_version(notification(V221, based_on=V220))
        engine.start_rollout(V221)
        engine.promote(SERVICE, actor="test")  # canary
        for _ in range(5):
            engine.note_feedback(SERVICE, "canary", RULE_CHALLENGER_CANARY, "bad")
        for _ in range(5):
            engine.note_feedback(SERVICE, "canary", RULE_CHAMPION, "good")
        assert registry.get(V221).stage is Stage.RETIRED
        assert engine.completed_rollouts(SERVICE)[0].outcome == "retired"

    def test_tau_in_force(self, world):
        registry, engine, _ = world
        registry.register_version(notification(V221, based_on=V220))
        engine.start_rollout(V221)
        assert engine.tau_in_force(SERVICE) is None
        engine.promote(SERVICE, actor="op")
        engine.promote(SERVICE, actor="op")
        assert engine.tau_in_force(SERVICE) == 0.95

    def test_config_update_audited(self, world):
        _, engine, audit = world
        engine.update_config(PolicyConfig(canary_fraction=0.2), actor="op")
        entries = audit.entries("policy_update")
        assert len(entries) == 1
        assert entries[0].after["canary_fraction"] == 0.2
