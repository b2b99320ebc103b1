#!/usr/bin/env python3
"""Record control-plane responses into frontend/fixtures/ for console tests.

Runs a scripted two-rollout scenario through the real gateway, then captures
the admin endpoints the console consumes. Deterministic: rerunning rewrites
identical fixtures.
"""

from __future__ import annotations

import json
from datetime import timedelta
from pathlib import Path

from modelgate.control_plane import AdminApi
from modelgate.harness import Scenario, ScenarioRunner
from modelgate.policy import canary_assign
from modelgate.protocol import FeatureVector, ScoreRequest

SERVICE = "123-345-678"
V219 = f"model-id:{SERVICE}.v219"
V220 = f"model-id:{SERVICE}.v220"
V221 = f"model-id:{SERVICE}.v221"
TOKEN = "console-fixture-token"
OUT = Path(__file__).resolve().parent.parent / "frontend" / "fixtures"


def fig_style_scenario() -> dict:
    fraction, salt = 0.1, "s1"

    def assigned(tick: int) -> bool:
        return canary_assign(f"req-{tick:06d}", fraction, salt)

    count, tick, v220_flip = 0, 1, None
    while count < 250:
        tick += 1
        if assigned(tick):
            count += 1
            if count == 100:
                v220_flip = tick
    e1 = tick
    shadow_flip = e1 + 5000
    count, tick, v221_flip = 0, e1 + 10_000, None
    while count < 200:
        tick += 1
        if assigned(tick):
            count += 1
            if count == 50:
                v221_flip = tick
    e2 = tick

    return {
        "name": "console-fixtures",
        "seed": 1,
        "service": SERVICE,
        "window_size": 2000,
        "feedback_probability": 1.0,
        "truth": {"weights": {"x": 1.0, "y": 1.0}},
        "stubs": [
            {"model_id": V219, "initial_stage": "full", "accuracy": 1.0},
            {"model_id": V220, "accuracy": 1.0, "flip_request_ids": [f"req-{v220_flip:06d}"]},
            {
                "model_id": V221,
                "accuracy": 1.0,
                "flip_request_ids": [f"req-{shadow_flip:06d}", f"req-{v221_flip:06d}"],
            },
        ],
        "traffic": {
            "features": ["x", "y"],
            "components": [{"weight": 1.0, "mean": [0, 0], "cov_diag": [1, 1]}],
            "total": e2 + 20,
            "start_time": "2018-06-16T00:00:00Z",
        },
        "policy": {
            "canary_fraction": fraction,
            "canary_salt": salt,
            "threshold_schedule": [0.0],
            "promotion": {
                "shadow_min_requests": 10**9,
                "canary_min_feedback": 10**9,
                "stage_dwell_requests": 10**9,
            },
        },
        "script": [
            {"at": 1, "action": "notify", "model_id": V220, "based_on": V219,
             "related_to": "service-id:123-345"},
            {"at": 2, "action": "promote"},
            {"at": 1500, "action": "fit_clusters", "window": 1200, "k": 4},
            {"at": e1 + 1, "action": "promote"},
            {"at": e1 + 1, "action": "promote"},
            {"at": e1 + 1, "action": "notify", "model_id": V221, "based_on": V220,
             "related_to": "service-id:123-345",
             "deployment_id": "depl-id:2332-233-544-22",
             "test_id": "test-id:223-345-678.v2", "signed_off": "report-1234857"},
            {"at": e1 + 10_001, "action": "promote"},
            {"at": e2 + 1, "action": "promote"},
        ],
    }


def main() -> None:
    runner = ScenarioRunner(Scenario.from_dict(fig_style_scenario()))
    runner.run()
    gateway = runner.gateway

    # a few pending escalations so the workbench has real material; keep the
    # run's policy and only arm the exception rule
    from modelgate.policy import PolicyConfig

    armed = gateway.policy.config.to_dict()
    armed["exception"] = {"min_confidence": 1.0, "on_exception": ["escalate"]}
    gateway.policy.update_config(PolicyConfig.from_dict(armed), actor="fixture-recorder")
    for i, x in enumerate([1.4, -0.8, 2.2], start=1):
        request = ScoreRequest(
            request_id=f"esc-req-{i:03d}",
            timestamp=runner.clock.now() + timedelta(seconds=i),
            features=FeatureVector.from_pairs([("x", x), ("y", -x / 2)]),
        )
        response, _ = gateway.handle_score(request)
        assert response.status == "escalated"

    admin = AdminApi(gateway, runner.escalations, runner.audit, admin_token=TOKEN)
    auth = {"authorization": f"Bearer {TOKEN}", "x-modelgate-actor": "fixture-recorder"}

    def record(name: str, method: str, path: str, query=None, body=None, headers=None) -> None:
        status, payload = admin.handle(method, path, query=query, body=body, headers=headers)
        assert status == 200, f"{path} -> {status}: {payload}"
        (OUT / f"{name}.json").write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        print(f"recorded {name}.json ({path})")

    OUT.mkdir(parents=True, exist_ok=True)
    record("models", "GET", "/admin/models")
    record("factbox", "GET", f"/admin/models/{V221}/factbox")
    record("stats", "GET", f"/admin/models/{V221}/stats", query={"window": "2000"})
    record("drift", "GET", "/admin/drift", query={"window": "2000"})
    record("clusters", "GET", "/admin/clusters")
    record("rollout", "GET", f"/admin/rollouts/{SERVICE}")
    record("policy", "GET", "/admin/policy")
    record("escalations_pending", "GET", "/admin/escalations", query={"state": "pending"})

    pending = runner.escalations.list("pending")
    record(
        "resolve_response", "POST", f"/admin/escalations/{pending[0].id}/resolve",
        body={"label": "pos", "worker": "fixture-worker"}, headers=auth,
    )
    status, payload = admin.handle(
        "POST", f"/admin/escalations/{pending[0].id}/resolve",
        body={"label": "neg", "worker": "second-worker"}, headers=auth,
    )
    assert status == 409
    (OUT / "resolve_conflict.json").write_text(
        json.dumps({"status": status, "body": payload}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    print("recorded resolve_conflict.json")


if __name__ == "__main__":
    main()
