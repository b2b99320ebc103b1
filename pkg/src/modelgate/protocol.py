"""Message contract spoken by model backends, the gateway, and the harness.

Every model microservice exposes three interfaces: score (feature vector in,
ranked predictions out), feedback (good/bad verdicts, optionally labeled), and
notify (a new model version is available). The gateway exposes the same three,
which is what makes it a transparent proxy.

Messages travel as UTF-8 JSON with a fixed key order, so equal values always
encode to identical bytes. Decoding ignores unknown fields for forward
compatibility and rejects anything that breaks a type invariant.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from typing import Any, Iterable, Mapping, Union


class ProtocolError(ValueError):
    """Base class for wire-contract violations."""


class MalformedId(ProtocolError):
    """Model id text does not match the canonical `model-id:<service>.v<n>` form."""


class InvariantViolation(ProtocolError):
    """A message value breaks one of its type invariants."""


class ParseError(ProtocolError):
    """Input bytes are not syntactically valid JSON."""


class SchemaError(ProtocolError):
    """JSON is well-formed but missing fields, mistyped, or invariant-breaking."""


_SERVICE_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")
_MODEL_ID_RE = re.compile(r"^model-id:(?P<service>.+)\.v(?P<version>[0-9]+)$")


@dataclass(frozen=True, order=True)
class ModelId:
    """Versioned model identity, e.g. service `123-345-678` at version 221."""

    service: str
    version: int

    def __post_init__(self) -> None:
        if not self.service or not _SERVICE_RE.match(self.service):
            raise InvariantViolation(f"bad service identifier: {self.service!r}")
        if not isinstance(self.version, int) or isinstance(self.version, bool) or self.version < 1:
            raise InvariantViolation(f"version must be an integer >= 1, got {self.version!r}")

    def render(self) -> str:
        return f"model-id:{self.service}.v{self.version}"

    def __str__(self) -> str:  # pragma: no cover - convenience
        return self.render()


def parse_model_id(text: str) -> ModelId:
    """Parse the canonical `model-id:<service>.v<version>` form.

    Strict: the version must be a positive integer without leading zeros, so
    parse and render are mutual inverses on the set of valid ids.
    """
    m = _MODEL_ID_RE.match(text)
    if not m:
        raise MalformedId(f"not a canonical model id: {text!r}")
    version_text = m.group("version")
    if version_text != str(int(version_text)) or int(version_text) < 1:
        raise MalformedId(f"bad version in model id: {text!r}")
    try:
        return ModelId(service=m.group("service"), version=int(version_text))
    except InvariantViolation as exc:
        raise MalformedId(str(exc)) from exc


def render_instant(dt: datetime) -> str:
    """RFC3339 UTC text for an aware datetime (`Z` suffix, microseconds kept)."""
    if dt.tzinfo is None:
        raise InvariantViolation("timestamps must be timezone-aware")
    return dt.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")


def parse_instant(text: str) -> datetime:
    try:
        dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    except (ValueError, TypeError) as exc:
        raise SchemaError(f"bad timestamp: {text!r}") from exc
    if dt.tzinfo is None:
        raise SchemaError(f"timestamp lacks timezone: {text!r}")
    return dt.astimezone(timezone.utc)


def _finite(value: float, what: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise InvariantViolation(f"{what} must be a real number, got {value!r}")
    value = float(value)
    if not math.isfinite(value):
        raise InvariantViolation(f"{what} must be finite, got {value!r}")
    return value


@dataclass(frozen=True)
class FeatureVector:
    """Ordered list of (name, value) pairs; names unique, values finite."""

    features: tuple[tuple[str, float], ...]

    def __post_init__(self) -> None:
        names = [n for n, _ in self.features]
        if len(set(names)) != len(names):
            raise InvariantViolation("duplicate feature names")
        cleaned = []
        for name, value in self.features:
            if not name or not isinstance(name, str):
                raise InvariantViolation(f"bad feature name: {name!r}")
            cleaned.append((name, _finite(value, f"feature {name!r}")))
        object.__setattr__(self, "features", tuple(cleaned))

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, float]]) -> "FeatureVector":
        return cls(features=tuple((n, float(v)) for n, v in pairs))

    def names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.features)

    def values(self) -> tuple[float, ...]:
        return tuple(v for _, v in self.features)

    def as_dict(self) -> dict[str, float]:
        return dict(self.features)


@dataclass(frozen=True)
class Prediction:
    """One candidate answer: a label plus its uncertainty in [0, 1]."""

    result: str
    uncertainty: float

    def __post_init__(self) -> None:
        if not isinstance(self.result, str) or not self.result:
            raise InvariantViolation(f"bad prediction label: {self.result!r}")
        u = _finite(self.uncertainty, "uncertainty")
        if not 0.0 <= u <= 1.0:
            raise InvariantViolation(f"uncertainty out of [0,1]: {u}")
        object.__setattr__(self, "uncertainty", u)

    @property
    def confidence(self) -> float:
        return 1.0 - self.uncertainty


def order_predictions(predictions: Iterable[Prediction]) -> tuple[Prediction, ...]:
    """Canonical ordering: descending confidence, ties broken by label."""
    return tuple(sorted(predictions, key=lambda p: (p.uncertainty, p.result)))


def _check_prediction_order(predictions: tuple[Prediction, ...]) -> None:
    labels = [p.result for p in predictions]
    if len(set(labels)) != len(labels):
        raise InvariantViolation("duplicate labels in prediction set")
    for a, b in zip(predictions, predictions[1:]):
        if (a.uncertainty, a.result) > (b.uncertainty, b.result):
            raise InvariantViolation("predictions not in descending-confidence order")


@dataclass(frozen=True)
class ScoreRequest:
    request_id: str
    timestamp: datetime
    features: FeatureVector

    def __post_init__(self) -> None:
        if not self.request_id or not isinstance(self.request_id, str):
            raise InvariantViolation("request_id must be a non-empty string")
        if self.timestamp.tzinfo is None:
            raise InvariantViolation("request timestamp must be timezone-aware")


@dataclass(frozen=True)
class ScoreResponse:
    """Ranked predictions for one request, or an escalation to a human queue."""

    request_id: str
    served_by: ModelId
    predictions: tuple[Prediction, ...]
    status: str = "ok"
    escalation_id: str | None = None
    latency_ms: float = 0.0

    def __post_init__(self) -> None:
        if not self.request_id:
            raise InvariantViolation("request_id must be non-empty")
        if self.status not in ("ok", "escalated"):
            raise InvariantViolation(f"bad status: {self.status!r}")
        if self.status == "ok":
            if not self.predictions:
                raise InvariantViolation("ok response must carry at least one prediction")
            if self.escalation_id is not None:
                raise InvariantViolation("escalation_id only allowed when status=escalated")
        else:
            if not self.escalation_id:
                raise InvariantViolation("escalated response must carry an escalation_id")
        _check_prediction_order(self.predictions)
        lat = _finite(self.latency_ms, "latency_ms")
        if lat < 0:
            raise InvariantViolation(f"latency_ms must be >= 0: {lat}")
        object.__setattr__(self, "latency_ms", lat)
        object.__setattr__(self, "predictions", tuple(self.predictions))

    @property
    def top_prediction(self) -> Prediction | None:
        return self.predictions[0] if self.predictions else None

    @property
    def top_confidence(self) -> float | None:
        top = self.top_prediction
        return top.confidence if top else None


@dataclass(frozen=True)
class FeedbackRecord:
    request_id: str
    verdict: str
    true_label: str | None
    timestamp: datetime

    def __post_init__(self) -> None:
        if not self.request_id:
            raise InvariantViolation("request_id must be non-empty")
        if self.verdict not in ("good", "bad"):
            raise InvariantViolation(f"verdict must be good|bad, got {self.verdict!r}")
        if self.timestamp.tzinfo is None:
            raise InvariantViolation("feedback timestamp must be timezone-aware")


@dataclass(frozen=True)
class VersionNotification:
    """Announcement that a new model version is available at an endpoint."""

    model_id: ModelId
    based_on: ModelId | None
    related_to: str
    endpoint: str
    test_id: str | None = None
    signed_off: str | None = None

    def __post_init__(self) -> None:
        if not self.related_to:
            raise InvariantViolation("related_to must be non-empty")
        if not self.endpoint:
            raise InvariantViolation("endpoint must be non-empty")
        if self.based_on is not None:
            if self.based_on.service != self.model_id.service:
                raise InvariantViolation("based_on must reference the same service")
            if self.based_on.version >= self.model_id.version:
                raise InvariantViolation("based_on version must be strictly smaller")


Message = Union[ScoreRequest, ScoreResponse, FeedbackRecord, VersionNotification]


class MessageKind(str, Enum):
    SCORE_REQUEST = "score_request"
    SCORE_RESPONSE = "score_response"
    FEEDBACK = "feedback"
    NOTIFICATION = "notification"


_KIND_BY_TYPE = {
    ScoreRequest: MessageKind.SCORE_REQUEST,
    ScoreResponse: MessageKind.SCORE_RESPONSE,
    FeedbackRecord: MessageKind.FEEDBACK,
    VersionNotification: MessageKind.NOTIFICATION,
}


def kind_of(message: Message) -> MessageKind:
    try:
        return _KIND_BY_TYPE[type(message)]
    except KeyError:
        raise InvariantViolation(f"not a wire message: {type(message).__name__}")


def _to_wire_dict(message: Message) -> dict[str, Any]:
    # Key order below defines the canonical byte form; optional keys are
    # omitted entirely when absent.
    if isinstance(message, ScoreRequest):
        return {
            "request_id": message.request_id,
            "timestamp": render_instant(message.timestamp),
            "features": [{"name": n, "value": v} for n, v in message.features.features],
        }
    if isinstance(message, ScoreResponse):
        out: dict[str, Any] = {
            "request_id": message.request_id,
            "served_by": message.served_by.render(),
            "predictions": [
                {"result": p.result, "uncertainty": p.uncertainty} for p in message.predictions
            ],
            "status": message.status,
        }
        if message.escalation_id is not None:
            out["escalation_id"] = message.escalation_id
        out["latency_ms"] = message.latency_ms
        return out
    if isinstance(message, FeedbackRecord):
        out = {"request_id": message.request_id, "verdict": message.verdict}
        if message.true_label is not None:
            out["true_label"] = message.true_label
        out["timestamp"] = render_instant(message.timestamp)
        return out
    if isinstance(message, VersionNotification):
        out = {"model_id": message.model_id.render()}
        if message.based_on is not None:
            out["based_on"] = message.based_on.render()
        out["related_to"] = message.related_to
        out["endpoint"] = message.endpoint
        if message.test_id is not None:
            out["test_id"] = message.test_id
        if message.signed_off is not None:
            out["signed_off"] = message.signed_off
        return out
    raise InvariantViolation(f"not a wire message: {type(message).__name__}")


def encode_message(message: Message) -> bytes:
    """Canonical UTF-8 JSON bytes; equal messages encode identically."""
    _revalidate(message)
    return json.dumps(_to_wire_dict(message), separators=(",", ":"), ensure_ascii=False).encode(
        "utf-8"
    )


def to_wire_dict(message: Message) -> dict[str, Any]:
    """The canonical JSON object form (ordered keys, optionals omitted)."""
    _revalidate(message)
    return _to_wire_dict(message)


def from_wire_dict(kind: MessageKind | str, obj: Mapping[str, Any]) -> Message:
    """Decode an already-parsed JSON object; unknown fields are ignored."""
    if not isinstance(obj, Mapping):
        raise SchemaError("message must be a JSON object")
    try:
        return _decode_fields(MessageKind(kind), obj)
    except InvariantViolation as exc:
        raise SchemaError(str(exc)) from exc


def _revalidate(message: Message) -> None:
    # Frozen dataclasses validate on construction; re-running __post_init__
    # guards against instances mutated through object.__setattr__.
    type(message).__post_init__(message)


def _req(obj: Mapping[str, Any], key: str) -> Any:
    if key not in obj:
        raise SchemaError(f"missing required field {key!r}")
    return obj[key]


def _req_str(obj: Mapping[str, Any], key: str) -> str:
    v = _req(obj, key)
    if not isinstance(v, str):
        raise SchemaError(f"field {key!r} must be a string, got {type(v).__name__}")
    return v


def _opt_str(obj: Mapping[str, Any], key: str) -> str | None:
    v = obj.get(key)
    if v is None:
        return None
    if not isinstance(v, str):
        raise SchemaError(f"field {key!r} must be a string, got {type(v).__name__}")
    return v


def _req_number(obj: Mapping[str, Any], key: str) -> float:
    v = _req(obj, key)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise SchemaError(f"field {key!r} must be a number, got {type(v).__name__}")
    return float(v)


def _decode_features(raw: Any) -> FeatureVector:
    if not isinstance(raw, list):
        raise SchemaError("features must be an array")
    pairs = []
    for item in raw:
        if not isinstance(item, dict):
            raise SchemaError("each feature must be an object")
        pairs.append((_req_str(item, "name"), _req_number(item, "value")))
    return FeatureVector(features=tuple(pairs))


def _decode_model_id(text: str) -> ModelId:
    try:
        return parse_model_id(text)
    except MalformedId as exc:
        raise SchemaError(str(exc)) from exc


def decode_message(kind: MessageKind | str, data: bytes | str) -> Message:
    """Inverse of encode_message on canonical bytes; extra fields are dropped."""
    kind = MessageKind(kind)
    if isinstance(data, bytes):
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"not UTF-8: {exc}") from exc
    else:
        text = data
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise SchemaError("message must be a JSON object")
    try:
        return _decode_fields(kind, obj)
    except InvariantViolation as exc:
        raise SchemaError(str(exc)) from exc


def _decode_fields(kind: MessageKind, obj: Mapping[str, Any]) -> Message:
    if kind is MessageKind.SCORE_REQUEST:
        return ScoreRequest(
            request_id=_req_str(obj, "request_id"),
            timestamp=parse_instant(_req_str(obj, "timestamp")),
            features=_decode_features(_req(obj, "features")),
        )
    if kind is MessageKind.SCORE_RESPONSE:
        raw_preds = _req(obj, "predictions")
        if not isinstance(raw_preds, list):
            raise SchemaError("predictions must be an array")
        preds = []
        for item in raw_preds:
            if not isinstance(item, dict):
                raise SchemaError("each prediction must be an object")
            preds.append(
                Prediction(result=_req_str(item, "result"), uncertainty=_req_number(item, "uncertainty"))
            )
        status = _req_str(obj, "status")
        return ScoreResponse(
            request_id=_req_str(obj, "request_id"),
            served_by=_decode_model_id(_req_str(obj, "served_by")),
            predictions=tuple(preds),
            status=status,
            escalation_id=_opt_str(obj, "escalation_id"),
            latency_ms=_req_number(obj, "latency_ms"),
        )
    if kind is MessageKind.FEEDBACK:
        return FeedbackRecord(
            request_id=_req_str(obj, "request_id"),
            verdict=_req_str(obj, "verdict"),
            true_label=_opt_str(obj, "true_label"),
            timestamp=parse_instant(_req_str(obj, "timestamp")),
        )
    if kind is MessageKind.NOTIFICATION:
        based_on_text = _opt_str(obj, "based_on")
        return VersionNotification(
            model_id=_decode_model_id(_req_str(obj, "model_id")),
            based_on=_decode_model_id(based_on_text) if based_on_text else None,
            related_to=_req_str(obj, "related_to"),
            endpoint=_req_str(obj, "endpoint"),
            test_id=_opt_str(obj, "test_id"),
            signed_off=_opt_str(obj, "signed_off"),
        )
    raise SchemaError(f"unknown message kind: {kind}")
