"""Operator surface: escalation queue plus the admin HTTP API semantics.

The AdminApi is transport-free (method + path + body in, status + JSON out);
the HTTP server binds it to real sockets. Read endpoints are side-effect-free,
action endpoints require the bearer token and land exactly one admin_action
audit entry each.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from datetime import datetime
from typing import Any, Callable

from .analytics import EmptyWindow
from .audit import AuditLog
from .policy import NoActiveRollout, PolicyConfig, PolicyConfigError
from .protocol import FeedbackRecord, MalformedId, ScoreRequest, parse_model_id, render_instant, to_wire_dict
from .registry import IllegalTransition, NoChampion, UnknownModel, render_fact_box_text


class ControlPlaneError(RuntimeError):
    pass


class UnknownEscalation(ControlPlaneError):
    pass


class AlreadyResolved(ControlPlaneError):
    pass


@dataclass(frozen=True)
class Resolution:
    label: str
    worker: str
    at: datetime

    def to_json_dict(self) -> dict[str, Any]:
        return {"label": self.label, "worker": self.worker, "at": render_instant(self.at)}


@dataclass
class Escalation:
    id: str
    request: ScoreRequest
    reason: str
    candidates: list[dict[str, Any]]
    state: str = "pending"  # pending | resolved
    resolution: Resolution | None = None

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "request": to_wire_dict(self.request),
            "context": {"reason": self.reason, "candidates": self.candidates},
            "state": self.state,
            "resolution": self.resolution.to_json_dict() if self.resolution else None,
        }


class EscalationQueue:
    """Pending human decisions. Resolution is exactly-once: the first worker
    wins, later attempts see AlreadyResolved, and exactly one feedback record
    flows back into the normal feedback path."""

    def __init__(self, clock, feedback_sink: Callable[[FeedbackRecord], Any] | None = None) -> None:
        self._clock = clock
        self._lock = threading.Lock()
        self._items: dict[str, Escalation] = {}
        self._counter = 0
        self.feedback_sink = feedback_sink
        self.emitted_feedback = 0

    def enqueue(self, request: ScoreRequest, reason: str, candidates: list[dict[str, Any]]) -> str:
        with self._lock:
            self._counter += 1
            esc_id = f"esc-{self._counter:06d}"
            self._items[esc_id] = Escalation(
                id=esc_id, request=request, reason=reason, candidates=list(candidates)
            )
            return esc_id

    def resolve(self, esc_id: str, label: str, worker: str) -> Escalation:
        with self._lock:
            item = self._items.get(esc_id)
            if item is None:
                raise UnknownEscalation(esc_id)
            if item.state == "resolved":
                raise AlreadyResolved(esc_id)
            item.state = "resolved"
            item.resolution = Resolution(label=label, worker=worker, at=self._clock.now())
            verdict = "good" if any(c.get("top_label") == label for c in item.candidates) else "bad"
            feedback = FeedbackRecord(
                request_id=item.request.request_id,
                verdict=verdict,
                true_label=label,
                timestamp=item.resolution.at,
            )
        # the winner emits outside the lock; losers never reach this point
        self.emitted_feedback += 1
        if self.feedback_sink is not None:
            self.feedback_sink(feedback)
        return item

    def get(self, esc_id: str) -> Escalation:
        with self._lock:
            item = self._items.get(esc_id)
            if item is None:
                raise UnknownEscalation(esc_id)
            return item

    def list(self, state: str | None = None) -> list[Escalation]:
        with self._lock:
            items = list(self._items.values())
        if state:
            items = [e for e in items if e.state == state]
        return items

    def pending_count(self) -> int:
        return len(self.list("pending"))


class AdminApi:
    """Route table for the /admin endpoints, independent of any transport."""

    def __init__(self, gateway, escalations: EscalationQueue, audit: AuditLog, admin_token: str) -> None:
        self._gateway = gateway
        self._escalations = escalations
        self._audit = audit
        self._token = admin_token

    # returns (status_code, body)
    def handle(
        self,
        method: str,
        path: str,
        query: dict[str, str] | None = None,
        body: dict[str, Any] | None = None,
        headers: dict[str, str] | None = None,
    ) -> tuple[int, dict[str, Any]]:
        query = query or {}
        body = body or {}
        headers = {k.lower(): v for k, v in (headers or {}).items()}
        parts = [p for p in path.split("/") if p]
        if not parts or parts[0] != "admin":
            return 404, {"error": "not_found", "detail": path}
        is_action = method in ("POST", "PUT")
        if is_action:
            auth = headers.get("authorization", "")
            if auth != f"Bearer {self._token}":
                return 401, {"error": "unauthorized", "detail": "missing or invalid bearer token"}
        actor = headers.get("x-modelgate-actor", "operator")
        try:
            return self._route(method, parts[1:], query, body, actor)
        except (UnknownModel, UnknownEscalation, MalformedId) as exc:
            return 404, {"error": type(exc).__name__, "detail": str(exc)}
        except (IllegalTransition, NoActiveRollout, AlreadyResolved, NoChampion) as exc:
            return 409, {"error": type(exc).__name__, "detail": str(exc)}
        except (PolicyConfigError, EmptyWindow, ValueError) as exc:
            return 422, {"error": type(exc).__name__, "detail": str(exc)}

    def _route(
        self, method: str, parts: list[str], query: dict[str, str], body: dict[str, Any], actor: str
    ) -> tuple[int, dict[str, Any]]:
        gw = self._gateway
        if method == "GET" and parts == ["models"]:
            return 200, {"models": [r.to_json_dict() for r in gw.registry.records()]}
        if method == "GET" and len(parts) == 3 and parts[0] == "models" and parts[2] == "factbox":
            box = gw.fact_box(parse_model_id(parts[1]))
            payload = box.to_json_dict()
            payload["text"] = render_fact_box_text(box)
            return 200, payload
        if method == "GET" and len(parts) == 3 and parts[0] == "models" and parts[2] == "stats":
            window = int(query.get("window", "1000"))
            return 200, gw.stats(parse_model_id(parts[1]), window).to_json_dict()
        if method == "GET" and parts == ["drift"]:
            window = int(query.get("window", "1000"))
            return 200, gw.drift_from_log(window=window).to_json_dict()
        if method == "GET" and parts == ["clusters"]:
            model = gw.clusters
            if model is None:
                return 200, {"fitted": False}
            payload = model.to_json_dict()
            payload["fitted"] = True
            return 200, payload
        if method == "GET" and len(parts) == 2 and parts[0] == "rollouts":
            return 200, self._rollout_payload(parts[1])
        if method == "POST" and len(parts) == 3 and parts[0] == "rollouts" and parts[2] in ("promote", "rollback"):
            service = parts[1]
            rollout = gw.policy.rollout_for(service)
            before = rollout.to_json_dict() if rollout else None
            if parts[2] == "promote":
                state = gw.policy.promote(service, actor=actor, cause=body.get("cause", "manual promote"))
            else:
                state = gw.policy.rollback(service, actor=actor, cause=body.get("cause", "manual rollback"))
            after = state.to_json_dict()
            self._audit.append(
                "admin_action", actor=actor, cause=f"{parts[2]} {service}", before=before, after=after
            )
            return 200, {"service": service, "rollout": after}
        if method == "PUT" and parts == ["policy"]:
            new_config = PolicyConfig.from_dict(body)
            before = gw.policy.config.to_dict()
            gw.policy.update_config(new_config, actor=actor)
            self._audit.append(
                "admin_action", actor=actor, cause="policy update",
                before=before, after=new_config.to_dict(),
            )
            return 200, {"policy": new_config.to_dict()}
        if method == "GET" and parts == ["policy"]:
            return 200, {"policy": gw.policy.config.to_dict()}
        if method == "GET" and parts == ["escalations"]:
            state = query.get("state")
            return 200, {"escalations": [e.to_json_dict() for e in self._escalations.list(state)]}
        if method == "POST" and len(parts) == 3 and parts[0] == "escalations" and parts[2] == "resolve":
            worker = body.get("worker", actor)
            label = body.get("label")
            if not label or not isinstance(label, str):
                return 422, {"error": "ValueError", "detail": "body must carry a non-empty label"}
            item = self._escalations.resolve(parts[1], label=label, worker=worker)
            self._audit.append(
                "admin_action", actor=worker, cause=f"resolve escalation {parts[1]}",
                before={"state": "pending"}, after={"state": "resolved", "label": label},
            )
            return 200, item.to_json_dict()
        return 404, {"error": "not_found", "detail": "/".join(parts)}

    def _rollout_payload(self, service: str) -> dict[str, Any]:
        gw = self._gateway
        rollout = gw.policy.rollout_for(service)
        history = []
        for record in gw.registry.records(service):
            for change in gw.registry.stage_history(record.id):
                history.append(
                    {
                        "model": change.model.render(),
                        "from": change.from_stage.value,
                        "to": change.to_stage.value,
                        "cause": change.cause,
                        "at": render_instant(change.at),
                    }
                )
        history.sort(key=lambda h: h["at"])
        return {
            "service": service,
            "active": rollout.to_json_dict() if rollout else None,
            "tau_in_force": gw.policy.tau_in_force(service),
            "queued": [m.render() for m in gw.policy.queued(service)],
            "completed": [r.to_json_dict() for r in gw.policy.completed_rollouts(service)],
            "history": history,
        }
