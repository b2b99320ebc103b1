"""Stubs, traffic generation, and the scenario runner."""

from __future__ import annotations

import json

import numpy as np
import pytest

from modelgate.harness import (
    ConfigError,
    Scenario,
    StubModel,
    StubModelConfig,
    TruthRule,
    gen_traffic,
    run_scenario,
    substream,
    synth_score,
)
from modelgate.harness.cli import main as cli_main
from modelgate.harness.traffic import DriftEvent, MixtureComponent, TrafficConfig
from modelgate.protocol import FeatureVector, ModelId, ScoreRequest, parse_instant

SERVICE = "123-345-678"
TRUTH = TruthRule(weights={"x": 1.0, "y": 1.0})


def fv(x: float, y: float = 0.0) -> FeatureVector:
    return FeatureVector.from_pairs([("x", x), ("y", y)])


def cfg(accuracy: float, **kwargs) -> StubModelConfig:
    return StubModelConfig(
        model_id=ModelId(SERVICE, 220), truth_rule=TRUTH, accuracy=accuracy, **kwargs
    )


class TestSynthScore:
    def test_perfect_accuracy_always_truth(self):
        rng = np.random.default_rng(0)
        for x in (-3.0, -0.5, 0.5, 3.0):
            preds = synth_score(cfg(1.0), fv(x), rng)
            assert preds[0].result == TRUTH.label_for(fv(x))

    def test_zero_accuracy_always_wrong(self):
        rng = np.random.default_rng(0)
        for x in (-3.0, 0.5):
            preds = synth_score(cfg(0.0), fv(x), rng)
            assert preds[0].result == TRUTH.other(TRUTH.label_for(fv(x)))

    def test_two_complementary_predictions(self):
        preds = synth_score(cfg(1.0), fv(1.0), np.random.default_rng(1))
        assert len(preds) == 2
        assert preds[0].uncertainty + preds[1].uncertainty == pytest.approx(1.0)
        assert preds[0].confidence >= preds[1].confidence

    def test_empirical_accuracy_tracks_p(self):
        rng = np.random.default_rng(42)
        hits = 0
        n = 10_000
        for i in range(n):
            x = float(rng.uniform(-2, 2))
            preds = synth_score(cfg(0.9), fv(x), rng)
            if preds[0].result == TRUTH.label_for(fv(x)):
                hits += 1
        assert abs(hits / n - 0.9) <= 0.01


class TestStubModel:
    def request(self, rid="req-000001", x=1.0):
        from datetime import datetime, timezone

        return ScoreRequest(
            request_id=rid,
            timestamp=datetime(2018, 6, 16, tzinfo=timezone.utc),
            features=fv(x),
        )

    def test_healthy_call(self):
        stub = StubModel(cfg(1.0, latency_mean_ms=10.0, latency_jitter_ms=0.0), np.random.default_rng(0))
        result = stub.score(self.request(), deadline_ms=500.0)
        assert result.ok and result.latency_ms == pytest.approx(10.0)

    def test_slow_stub_times_out(self):
        stub = StubModel(cfg(1.0, latency_mean_ms=1000.0, latency_jitter_ms=0.0), np.random.default_rng(0))
        result = stub.score(self.request(), deadline_ms=500.0)
        assert result.outcome == "timeout"

    def test_failure_rate_one_always_errors(self):
        stub = StubModel(cfg(1.0, failure_rate=1.0), np.random.default_rng(0))
        assert stub.score(self.request(), 500.0).outcome == "error"

    def test_flip_request_ids_invert_the_answer(self):
        flipped = StubModel(
            cfg(1.0, flip_request_ids=frozenset({"req-000002"})), np.random.default_rng(3)
        )
        plain = StubModel(cfg(1.0), np.random.default_rng(3))
        for rid in ("req-000001", "req-000002", "req-000003"):
            a = flipped.score(self.request(rid, x=2.0), 500.0).response.predictions
            b = plain.score(self.request(rid, x=2.0), 500.0).response.predictions
            if rid == "req-000002":
                assert a[0].result != b[0].result
                assert a[0].uncertainty == b[0].uncertainty
            else:
                assert a == b


class TestTraffic:
    def base_config(self, total=1000, drift=()):
        return TrafficConfig(
            feature_names=("x", "y"),
            components=(MixtureComponent(weight=1.0, mean=(0.0, 0.0), cov_diag=(1.0, 1.0)),),
            drift_program=tuple(drift),
            rate=1.0,
            total=total,
        )

    def test_ids_and_timestamps(self):
        stream = list(gen_traffic(self.base_config(total=3), np.random.default_rng(0)))
        assert [r.request_id for r in stream] == ["req-000001", "req-000002", "req-000003"]
        assert (stream[1].timestamp - stream[0].timestamp).total_seconds() == 1.0

    def test_same_seed_identical_streams(self):
        a = list(gen_traffic(self.base_config(), np.random.default_rng(7)))
        b = list(gen_traffic(self.base_config(), np.random.default_rng(7)))
        assert a == b

    def test_no_drift_stays_on_base_mixture(self):
        stream = list(gen_traffic(self.base_config(total=4000), np.random.default_rng(1)))
        xs = np.array([r.features.as_dict()["x"] for r in stream])
        assert abs(xs.mean()) < 0.1

    def test_mean_shift_applies_after_cutoff(self):
        config = self.base_config(total=10_000, drift=[DriftEvent(at=5000, mean_shift=(5.0, 5.0))])
        stream = list(gen_traffic(config, np.random.default_rng(2)))
        matrix = np.array([[r.features.as_dict()["x"], r.features.as_dict()["y"]] for r in stream])
        first, second = matrix[:5000], matrix[5000:]
        delta = second.mean(axis=0) - first.mean(axis=0)
        assert np.all(np.abs(delta - 5.0) < 0.15)

    def test_weights_must_sum_to_one(self):
        with pytest.raises(ValueError):
            TrafficConfig(
                feature_names=("x",),
                components=(MixtureComponent(weight=0.5, mean=(0.0,), cov_diag=(1.0,)),),
            )


def scenario_doc(**overrides) -> dict:
    doc = {
        "name": "unit",
        "seed": 11,
        "service": SERVICE,
        "window_size": 200,
        "feedback_probability": 0.6,
        "truth": {"weights": {"x": 1.0, "y": 1.0}},
        "stubs": [
            {
                "model_id": f"model-id:{SERVICE}.v220",
                "initial_stage": "full",
                "accuracy": 0.9,
            },
            {
                "model_id": f"model-id:{SERVICE}.v221",
                "accuracy": 0.95,
            },
        ],
        "traffic": {
            "features": ["x", "y"],
            "components": [{"weight": 1.0, "mean": [0, 0], "cov_diag": [1, 1]}],
            "total": 2500,
            "start_time": "2018-06-16T00:00:00Z",
        },
        "policy": {
            "canary_fraction": 0.2,
            "threshold_schedule": [0.9, 0.8],
            "promotion": {
                "shadow_min_requests": 300,
                "shadow_min_agreement": 0.8,
                "canary_min_feedback": 120,
                "rollback_delta": 0.05,
                "stage_dwell_requests": 300,
            },
        },
        "script": [
            {
                "at": 1,
                "action": "notify",
                "model_id": f"model-id:{SERVICE}.v221",
                "based_on": f"model-id:{SERVICE}.v220",
            }
        ],
    }
    doc.update(overrides)
    return doc


LEGAL_PREFIXES = [
    ["shadow"],
    ["shadow", "canary"],
    ["shadow", "canary", "thresholded"],
    ["shadow", "canary", "thresholded", "full"],
]


def challenger_stage_sequence(report, model: str) -> list[str]:
    return [t["to"] for t in report.stage_timeline if t["model"] == model and t["to"] != "fallback"]


class TestScenarios:
    def test_good_challenger_reaches_full(self):
        report = run_scenario(scenario_doc())
        seq = challenger_stage_sequence(report, f"model-id:{SERVICE}.v221")
        assert seq == ["shadow", "canary", "thresholded", "full"]
        assert report.served_by_rule.get("champion", 0) > 0
        assert report.log_entries == 2500

    def test_bad_challenger_rolls_back(self):
        doc = scenario_doc()
        doc["stubs"][1]["accuracy"] = 0.6
        doc["policy"]["promotion"]["shadow_min_agreement"] = 0.5
        report = run_scenario(doc)
        seq = challenger_stage_sequence(report, f"model-id:{SERVICE}.v221")
        assert seq[-1] == "retired"
        assert seq[:-1] in LEGAL_PREFIXES

    def test_reports_are_bit_identical_across_runs(self):
        a = run_scenario(scenario_doc())
        b = run_scenario(scenario_doc())
        assert a.to_json() == b.to_json()

    def test_empty_traffic(self):
        doc = scenario_doc()
        doc["traffic"]["total"] = 0
        doc["script"] = []
        report = run_scenario(doc)
        assert report.total_requests == 0
        assert report.served_by_rule == {}
        assert report.log_entries == 0

    def test_direct_cutover_serves_bad_model_everywhere(self):
        doc = scenario_doc(mode="direct_cutover")
        doc["stubs"][1]["accuracy"] = 0.6
        doc["script"][0]["at"] = 500
        report = run_scenario(doc)
        v221 = f"model-id:{SERVICE}.v221"
        served = sum(report.served_by_model.get(v221, {}).values())
        assert served == 2500 - 499

    def test_unknown_action_rejected(self):
        doc = scenario_doc()
        doc["script"].append({"at": 2, "action": "explode"})
        with pytest.raises(ConfigError):
            run_scenario(doc)

    def test_conservation_of_served_counts(self):
        report = run_scenario(scenario_doc())
        assert sum(report.served_by_rule.values()) == report.total_requests

    def test_log_persistence_round_trip(self, tmp_path):
        from modelgate.analytics import CallLog

        run_scenario(scenario_doc(), log_dir=tmp_path / "log")
        replayed = CallLog.load(tmp_path / "log")
        assert len(replayed) == 2500

    def test_substream_independence(self):
        a1 = substream(1, "traffic").standard_normal(5)
        a2 = substream(1, "traffic").standard_normal(5)
        b = substream(1, "stub:x").standard_normal(5)
        assert np.array_equal(a1, a2)
        assert not np.array_equal(a1, b)


class TestCli:
    def test_run_and_replay(self, tmp_path, capsys):
        doc = scenario_doc()
        doc["traffic"]["total"] = 600
        scenario_path = tmp_path / "scenario.json"
        scenario_path.write_text(json.dumps(doc), encoding="utf-8")
        out_path = tmp_path / "report.json"
        log_dir = tmp_path / "log"

        rc = cli_main(
            ["run", "--scenario", str(scenario_path), "--out", str(out_path), "--log-dir", str(log_dir)]
        )
        assert rc == 0
        report = json.loads(out_path.read_text(encoding="utf-8"))
        assert report["total_requests"] == 600

        capsys.readouterr()
        rc = cli_main(["replay", "--log", str(log_dir), "--stats", "--window", "100"])
        assert rc == 0
        replay_out = json.loads(capsys.readouterr().out)
        assert replay_out["entries"] == 600

    def test_seed_override_changes_report(self, tmp_path):
        doc = scenario_doc()
        doc["traffic"]["total"] = 400
        scenario_path = tmp_path / "scenario.json"
        scenario_path.write_text(json.dumps(doc), encoding="utf-8")
        out_a, out_b = tmp_path / "a.json", tmp_path / "b.json"
        cli_main(["run", "--scenario", str(scenario_path), "--out", str(out_a), "--seed", "1"])
        cli_main(["run", "--scenario", str(scenario_path), "--out", str(out_b), "--seed", "2"])
        assert out_a.read_text() != out_b.read_text()
