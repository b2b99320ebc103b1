"""Model version registry: lineage, endpoints, rollout stages, and fact boxes.

One record per (service, version). Writes are serialized and validated against
the rollout stage machine; every stage change lands in the audit log. State is
kept in memory and optionally mirrored to an append-only event log that is
replayed at startup.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, replace
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any, Protocol

from .audit import AuditLog
from .protocol import ModelId, VersionNotification, parse_instant, parse_model_id, render_instant


class RegistryError(RuntimeError):
    pass


class DuplicateVersion(RegistryError):
    pass


class LineageViolation(RegistryError):
    pass


class NoChampion(RegistryError):
    pass


class IllegalTransition(RegistryError):
    pass


class UnknownModel(RegistryError):
    pass


class Stage(str, Enum):
    REGISTERED = "registered"
    SHADOW = "shadow"
    CANARY = "canary"
    THRESHOLDED = "thresholded"
    FULL = "full"
    FALLBACK = "fallback"
    RETIRED = "retired"


# Forward rollout edges. RETIRED is reachable from any non-retired stage and
# REGISTERED -> FULL is allowed only to bootstrap a service with no champion.
_FORWARD_EDGES = {
    (Stage.REGISTERED, Stage.SHADOW),
    (Stage.SHADOW, Stage.CANARY),
    (Stage.CANARY, Stage.THRESHOLDED),
    (Stage.THRESHOLDED, Stage.FULL),
    (Stage.FULL, Stage.FALLBACK),
}

_SERVING_STAGES = {Stage.SHADOW, Stage.CANARY, Stage.THRESHOLDED, Stage.FULL, Stage.FALLBACK}


@dataclass(frozen=True)
class ModelRecord:
    id: ModelId
    endpoint: str
    based_on: ModelId | None
    related_to: str
    stage: Stage
    registered_at: datetime
    deployed_at: datetime | None
    deployment_id: str
    test_id: str | None
    signed_off: str | None

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "id": self.id.render(),
            "endpoint": self.endpoint,
            "based_on": self.based_on.render() if self.based_on else None,
            "related_to": self.related_to,
            "stage": self.stage.value,
            "registered_at": render_instant(self.registered_at),
            "deployed_at": render_instant(self.deployed_at) if self.deployed_at else None,
            "deployment_id": self.deployment_id,
            "test_id": self.test_id,
            "signed_off": self.signed_off,
        }


@dataclass(frozen=True)
class StageChange:
    model: ModelId
    from_stage: Stage
    to_stage: Stage
    cause: str
    at: datetime


@dataclass(frozen=True)
class ActiveChain:
    """Snapshot of who serves a service right now."""

    service: str
    champion: ModelId
    challenger: ModelId | None
    challenger_stage: Stage | None
    fallback: ModelId | None
    shadows: tuple[ModelId, ...]


@dataclass(frozen=True)
class CanaryResult:
    pass_rate: float | None
    previous_pass_rate: float | None
    verdict: str | None  # passed | failed | pending, from the stage history


@dataclass(frozen=True)
class ShadowResult:
    reference: ModelId | None
    agreement: float | None


@dataclass(frozen=True)
class FactBox:
    """Compact provenance/usage/testing summary for one model version."""

    id: ModelId
    based_on: ModelId | None
    related_to: str
    deployed_at: datetime | None
    deployment_id: str
    canary: CanaryResult
    shadow: ShadowResult
    test_id: str | None
    signed_off: str | None

    def to_json_dict(self) -> dict[str, Any]:
        def na(value: Any) -> Any:
            return "n/a" if value is None else value

        return {
            "provenance": {
                "id": self.id.render(),
                "based_on": na(self.based_on.render() if self.based_on else None),
                "related_to": na(self.related_to),
            },
            "usage": {
                "deployed_at": na(render_instant(self.deployed_at) if self.deployed_at else None),
                "deployment_id": na(self.deployment_id),
                "canary_result": {
                    "pass_rate": na(self.canary.pass_rate),
                    "previous_pass_rate": na(self.canary.previous_pass_rate),
                    "verdict": na(self.canary.verdict),
                },
                "shadow": {
                    "reference": na(self.shadow.reference.render() if self.shadow.reference else None),
                    "agreement": na(self.shadow.agreement),
                },
            },
            "testing": {"test_id": na(self.test_id), "signed_off": na(self.signed_off)},
        }


class UsageSource(Protocol):
    """Where the registry pulls usage numbers from (normally the call log)."""

    def canary_pass_rate(self, model: ModelId) -> float | None: ...

    def shadow_agreement(self, model: ModelId, reference: ModelId) -> float | None: ...


def _pct(rate: float) -> str:
    return f"{round(rate * 100, 6):g}%"


def render_fact_box_text(box: FactBox) -> str:
    """Two-column plain-text layout: provenance/testing on the left, usage right."""
    na = "n/a"
    canary = box.canary
    if canary.pass_rate is None:
        canary_line = f"Canary-test-results: {na}"
    else:
        verdict = canary.verdict or "pending"
        prev = _pct(canary.previous_pass_rate) if canary.previous_pass_rate is not None else na
        canary_line = f"Canary-test-results: {verdict} ({_pct(canary.pass_rate)}, previous {prev})"
    if box.shadow.reference is not None and box.shadow.agreement is not None:
        shadow_line = f"Shadow: {box.shadow.reference.render()} (agreement {_pct(box.shadow.agreement)})"
    else:
        shadow_line = f"Shadow: {na}"
    deployed = box.deployed_at.date().isoformat() if box.deployed_at else na
    left = [
        "Provenance:",
        f"  ID: {box.id.render()}",
        f"  Based on: {box.based_on.render() if box.based_on else na}",
        f"  Related to: {box.related_to}",
        "Testing:",
        f"  ID: {box.test_id or na}",
        f"  Signed-off: {box.signed_off or na}",
    ]
    right = [
        "Usage:",
        f"  Deployed in production: {deployed} {box.deployment_id}",
        f"  {canary_line}",
        f"  {shadow_line}",
    ]
    width = max(len(line) for line in left) + 2
    lines = []
    for i in range(max(len(left), len(right))):
        l = left[i] if i < len(left) else ""
        r = right[i] if i < len(right) else ""
        lines.append((l.ljust(width) + r).rstrip())
    return "\n".join(lines)


class ModelRegistry:
    def __init__(self, clock, audit: AuditLog | None = None, event_log_path: Path | None = None) -> None:
        self._clock = clock
        self._audit = audit
        self._lock = threading.RLock()
        self._records: dict[ModelId, ModelRecord] = {}
        self._history: dict[ModelId, list[StageChange]] = {}
        self._deploy_counter = 0
        self._event_path = Path(event_log_path) if event_log_path else None
        if self._event_path and self._event_path.exists():
            self._replay_events()

    # -- mutations ---------------------------------------------------------

    def register_version(
        self, notification: VersionNotification, deployment_id: str | None = None
    ) -> ModelRecord:
        with self._lock:
            mid = notification.model_id
            if mid in self._records:
                raise DuplicateVersion(f"{mid.render()} already registered")
            if notification.based_on is not None:
                parent = self._records.get(notification.based_on)
                if parent is None:
                    raise LineageViolation(f"based_on {notification.based_on.render()} is not registered")
                if parent.id.version >= mid.version:
                    raise LineageViolation("based_on version must be strictly smaller")
            self._deploy_counter += 1
            record = ModelRecord(
                id=mid,
                endpoint=notification.endpoint,
                based_on=notification.based_on,
                related_to=notification.related_to,
                stage=Stage.REGISTERED,
                registered_at=self._clock.now(),
                deployed_at=None,
                deployment_id=deployment_id or f"depl-id:{self._deploy_counter:08d}",
                test_id=notification.test_id,
                signed_off=notification.signed_off,
            )
            self._records[mid] = record
            self._history[mid] = []
            self._persist_event({"event": "register", "record": record.to_json_dict()})
            if self._audit is not None:
                self._audit.append(
                    "model_registered",
                    actor="system",
                    cause="version notification",
                    details={"model": mid.render(), "based_on": record.based_on.render() if record.based_on else None},
                )
            return record

    def set_stage(self, mid: ModelId, to: Stage, cause: str, actor: str = "system") -> ModelRecord:
        with self._lock:
            return self._set_stage_locked(mid, to, cause, actor)

    def _set_stage_locked(self, mid: ModelId, to: Stage, cause: str, actor: str) -> ModelRecord:
        record = self._records.get(mid)
        if record is None:
            raise UnknownModel(mid.render())
        frm = record.stage
        if frm == to:
            raise IllegalTransition(f"{mid.render()} already at {to.value}")
        legal = (
            (frm, to) in _FORWARD_EDGES
            or (to is Stage.RETIRED and frm is not Stage.RETIRED)
            or (frm is Stage.REGISTERED and to is Stage.FULL and self._champion_of(mid.service) is None)
            or (
                frm is Stage.REGISTERED
                and to is Stage.FALLBACK
                and self._single_in_stage(mid.service, {Stage.FALLBACK}) is None
            )
        )
        if not legal:
            raise IllegalTransition(f"{frm.value} -> {to.value} is not a legal stage transition")
        updated = replace(
            record,
            stage=to,
            deployed_at=record.deployed_at
            or (self._clock.now() if to in _SERVING_STAGES else None),
        )
        self._records[mid] = updated
        self._check_service_invariants(mid.service)
        change = StageChange(model=mid, from_stage=frm, to_stage=to, cause=cause, at=self._clock.now())
        self._history[mid].append(change)
        self._persist_event(
            {"event": "stage_change", "model": mid.render(), "from": frm.value, "to": to.value,
             "cause": cause, "at": render_instant(change.at)}
        )
        if self._audit is not None:
            self._audit.append(
                "stage_change",
                actor=actor,
                cause=cause,
                details={"model": mid.render()},
                before={"stage": frm.value},
                after={"stage": to.value},
            )
        return updated

    def apply_promotion(self, service: str, challenger: ModelId, cause: str, actor: str = "system") -> None:
        """Promote a thresholded challenger to full; the old champion becomes
        the fallback and any previous fallback is retired."""
        with self._lock:
            old_fallback = self._single_in_stage(service, {Stage.FALLBACK})
            champion = self._champion_of(service)
            if old_fallback is not None:
                self._set_stage_locked(old_fallback, Stage.RETIRED, f"superseded as fallback: {cause}", actor)
            if champion is not None:
                self._set_stage_locked(champion, Stage.FALLBACK, f"superseded as champion: {cause}", actor)
            self._set_stage_locked(challenger, Stage.FULL, cause, actor)

    # -- reads -------------------------------------------------------------

    def get(self, mid: ModelId) -> ModelRecord:
        with self._lock:
            record = self._records.get(mid)
            if record is None:
                raise UnknownModel(mid.render())
            return record

    def records(self, service: str | None = None) -> list[ModelRecord]:
        with self._lock:
            out = [r for r in self._records.values() if service is None or r.id.service == service]
            return sorted(out, key=lambda r: (r.id.service, r.id.version))

    def stage_history(self, mid: ModelId) -> list[StageChange]:
        with self._lock:
            if mid not in self._history:
                raise UnknownModel(mid.render())
            return list(self._history[mid])

    def resolve_chain(self, service: str) -> ActiveChain:
        with self._lock:
            champion = self._champion_of(service)
            if champion is None:
                raise NoChampion(f"service {service!r} has no full model")
            challenger = self._single_in_stage(service, {Stage.CANARY, Stage.THRESHOLDED})
            shadows = tuple(
                r.id
                for r in self.records(service)
                if r.stage is Stage.SHADOW
            )
            return ActiveChain(
                service=service,
                champion=champion,
                challenger=challenger,
                challenger_stage=self._records[challenger].stage if challenger else None,
                fallback=self._single_in_stage(service, {Stage.FALLBACK}),
                shadows=shadows,
            )

    def build_fact_box(self, mid: ModelId, usage: UsageSource | None = None) -> FactBox:
        with self._lock:
            record = self._records.get(mid)
            if record is None:
                raise UnknownModel(mid.render())
            history = list(self._history[mid])
        pass_rate = usage.canary_pass_rate(mid) if usage else None
        previous = None
        if usage and record.based_on is not None:
            previous = usage.canary_pass_rate(record.based_on)
        agreement = None
        if usage and record.based_on is not None:
            agreement = usage.shadow_agreement(mid, record.based_on)
        return FactBox(
            id=record.id,
            based_on=record.based_on,
            related_to=record.related_to,
            deployed_at=record.deployed_at,
            deployment_id=record.deployment_id,
            canary=CanaryResult(
                pass_rate=pass_rate,
                previous_pass_rate=previous,
                verdict=self._canary_verdict(record.stage, history),
            ),
            shadow=ShadowResult(reference=record.based_on, agreement=agreement),
            test_id=record.test_id,
            signed_off=record.signed_off,
        )

    # -- internals ---------------------------------------------------------

    @staticmethod
    def _canary_verdict(current: Stage, history: list[StageChange]) -> str | None:
        for change in history:
            if change.from_stage is Stage.CANARY and change.to_stage is Stage.THRESHOLDED:
                return "passed"
            if change.from_stage is Stage.CANARY and change.to_stage is Stage.RETIRED:
                return "failed"
        if current is Stage.CANARY:
            return "pending"
        return None

    def _champion_of(self, service: str) -> ModelId | None:
        return self._single_in_stage(service, {Stage.FULL})

    def _single_in_stage(self, service: str, stages: set[Stage]) -> ModelId | None:
        found = [r.id for r in self._records.values() if r.id.service == service and r.stage in stages]
        if not found:
            return None
        # invariants keep these sets at size one; latest version wins if ever not
        return max(found, key=lambda m: m.version)

    def _check_service_invariants(self, service: str) -> None:
        fulls = [r for r in self._records.values() if r.id.service == service and r.stage is Stage.FULL]
        staged = [
            r
            for r in self._records.values()
            if r.id.service == service and r.stage in (Stage.CANARY, Stage.THRESHOLDED)
        ]
        if len(fulls) > 1:
            raise IllegalTransition(f"service {service!r} would have {len(fulls)} full models")
        if len(staged) > 1:
            raise IllegalTransition(f"service {service!r} would have {len(staged)} canary/thresholded models")

    def _persist_event(self, event: dict[str, Any]) -> None:
        if not self._event_path:
            return
        with self._event_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(event, separators=(",", ":")) + "\n")

    def _replay_events(self) -> None:
        assert self._event_path is not None
        with self._event_path.open("r", encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                event = json.loads(line)
                if event["event"] == "register":
                    raw = event["record"]
                    mid = parse_model_id(raw["id"])
                    record = ModelRecord(
                        id=mid,
                        endpoint=raw["endpoint"],
                        based_on=parse_model_id(raw["based_on"]) if raw["based_on"] else None,
                        related_to=raw["related_to"],
                        stage=Stage(raw["stage"]),
                        registered_at=parse_instant(raw["registered_at"]),
                        deployed_at=parse_instant(raw["deployed_at"]) if raw["deployed_at"] else None,
                        deployment_id=raw["deployment_id"],
                        test_id=raw["test_id"],
                        signed_off=raw["signed_off"],
                    )
                    self._records[mid] = record
                    self._history[mid] = []
                    self._deploy_counter += 1
                elif event["event"] == "stage_change":
                    mid = parse_model_id(event["model"])
                    record = self._records[mid]
                    at = parse_instant(event["at"])
                    to = Stage(event["to"])
                    self._records[mid] = replace(
                        record,
                        stage=to,
                        deployed_at=record.deployed_at or (at if to in _SERVING_STAGES else None),
                    )
                    self._history[mid].append(
                        StageChange(
                            model=mid,
                            from_stage=Stage(event["from"]),
                            to_stage=to,
                            cause=event["cause"],
                            at=at,
                        )
                    )
