"""Call log and the statistics derived from it.

The log is append-only with gapless sequence numbers; feedback arrives later
as keyed annotations, never as in-place edits, so replaying a persisted log
reconstructs identical state. On top of the log sit windowed usage stats,
k-means input clusters with per-cluster anomaly radii, PSI drift reports, and
pairwise top-label agreement rates.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .policy import RULE_CHALLENGER_CANARY
from .protocol import (
    FeatureVector,
    FeedbackRecord,
    MessageKind,
    ModelId,
    ScoreResponse,
    from_wire_dict,
    parse_instant,
    parse_model_id,
    render_instant,
    to_wire_dict,
)


class AnalyticsError(RuntimeError):
    pass


class StorageFailure(AnalyticsError):
    pass


class TooFewPoints(AnalyticsError):
    pass


class InconsistentSchema(AnalyticsError):
    pass


class SchemaMismatch(AnalyticsError):
    pass


class EmptyWindow(AnalyticsError):
    pass


# -- log entries -------------------------------------------------------------


@dataclass(frozen=True)
class DecisionRecord:
    """What the policy decided and which rule actually served."""

    rule: str
    tag: str  # 4a/4b/4c/4d
    reason: str
    rollout_stage: str | None = None
    tau: float | None = None

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "rule": self.rule,
            "tag": self.tag,
            "reason": self.reason,
            "rollout_stage": self.rollout_stage,
            "tau": self.tau,
        }

    @classmethod
    def from_json_dict(cls, raw: dict[str, Any]) -> "DecisionRecord":
        return cls(
            rule=raw["rule"],
            tag=raw["tag"],
            reason=raw["reason"],
            rollout_stage=raw.get("rollout_stage"),
            tau=raw.get("tau"),
        )


@dataclass(frozen=True)
class ClusterAssignment:
    index: int
    distance: float
    anomalous: bool

    def to_json_dict(self) -> dict[str, Any]:
        return {"index": self.index, "distance": self.distance, "anomalous": self.anomalous}

    @classmethod
    def from_json_dict(cls, raw: dict[str, Any]) -> "ClusterAssignment":
        return cls(index=raw["index"], distance=raw["distance"], anomalous=raw["anomalous"])


@dataclass(frozen=True)
class InvocationRecord:
    """One backend call made while handling a request (serve path or shadow)."""

    target: ModelId
    purpose: str  # serve | shadow
    outcome: str  # ok | timeout | error
    latency_ms: float
    response: ScoreResponse | None = None
    error_code: str | None = None
    error_text: str | None = None

    def top_label(self) -> str | None:
        if self.outcome == "ok" and self.response and self.response.predictions:
            return self.response.predictions[0].result
        return None

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "target": self.target.render(),
            "purpose": self.purpose,
            "outcome": self.outcome,
            "latency_ms": self.latency_ms,
            "response": to_wire_dict(self.response) if self.response else None,
            "error_code": self.error_code,
            "error_text": self.error_text,
        }

    @classmethod
    def from_json_dict(cls, raw: dict[str, Any]) -> "InvocationRecord":
        resp = raw.get("response")
        return cls(
            target=parse_model_id(raw["target"]),
            purpose=raw["purpose"],
            outcome=raw["outcome"],
            latency_ms=raw["latency_ms"],
            response=from_wire_dict(MessageKind.SCORE_RESPONSE, resp) if resp else None,
            error_code=raw.get("error_code"),
            error_text=raw.get("error_text"),
        )


@dataclass(frozen=True)
class LogEntry:
    seq: int
    request_id: str
    timestamp: datetime
    features: FeatureVector
    decision: DecisionRecord
    invocations: tuple[InvocationRecord, ...]
    served: ScoreResponse
    served_via: ModelId
    shadow_disagreement: bool
    cluster: ClusterAssignment | None = None
    feedback: FeedbackRecord | None = None

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "kind": "entry",
            "seq": self.seq,
            "request_id": self.request_id,
            "timestamp": render_instant(self.timestamp),
            "features": [[n, v] for n, v in self.features.features],
            "decision": self.decision.to_json_dict(),
            "invocations": [inv.to_json_dict() for inv in self.invocations],
            "served": to_wire_dict(self.served),
            "served_via": self.served_via.render(),
            "shadow_disagreement": self.shadow_disagreement,
            "cluster": self.cluster.to_json_dict() if self.cluster else None,
        }

    @classmethod
    def from_json_dict(cls, raw: dict[str, Any]) -> "LogEntry":
        return cls(
            seq=raw["seq"],
            request_id=raw["request_id"],
            timestamp=parse_instant(raw["timestamp"]),
            features=FeatureVector.from_pairs((n, v) for n, v in raw["features"]),
            decision=DecisionRecord.from_json_dict(raw["decision"]),
            invocations=tuple(InvocationRecord.from_json_dict(r) for r in raw["invocations"]),
            served=from_wire_dict(MessageKind.SCORE_RESPONSE, raw["served"]),
            served_via=parse_model_id(raw["served_via"]),
            shadow_disagreement=raw["shadow_disagreement"],
            cluster=ClusterAssignment.from_json_dict(raw["cluster"]) if raw.get("cluster") else None,
        )


class CallLog:
    """Append-only request log with keyed feedback annotations.

    Persistence, when enabled, writes newline-delimited JSON into segment
    files of `segment_size` entries (`log-<first_seq>.jsonl`); feedback joins
    are separate annotation lines in whichever segment is current.
    """

    def __init__(self, persist_dir: Path | None = None, segment_size: int = 10_000) -> None:
        self._entries: list[LogEntry] = []
        self._by_request: dict[str, int] = {}  # request_id -> list index
        self._lock = threading.RLock()
        self._dir = Path(persist_dir) if persist_dir else None
        self._segment_size = segment_size
        if self._dir:
            self._dir.mkdir(parents=True, exist_ok=True)

    def append(
        self,
        *,
        request_id: str,
        timestamp: datetime,
        features: FeatureVector,
        decision: DecisionRecord,
        invocations: Sequence[InvocationRecord],
        served: ScoreResponse,
        served_via: ModelId,
        shadow_disagreement: bool,
        cluster: ClusterAssignment | None = None,
    ) -> LogEntry:
        with self._lock:
            if request_id in self._by_request:
                raise StorageFailure(f"request_id {request_id!r} already logged")
            if served_via not in {inv.target for inv in invocations}:
                raise StorageFailure("served_via must appear among the invocations")
            entry = LogEntry(
                seq=len(self._entries) + 1,
                request_id=request_id,
                timestamp=timestamp,
                features=features,
                decision=decision,
                invocations=tuple(invocations),
                served=served,
                served_via=served_via,
                shadow_disagreement=shadow_disagreement,
                cluster=cluster,
            )
            self._entries.append(entry)
            self._by_request[request_id] = len(self._entries) - 1
            self._persist_line(entry.seq, entry.to_json_dict())
            return entry

    def join_feedback(self, feedback: FeedbackRecord) -> tuple[LogEntry, bool]:
        """Annotate the matching entry; returns (entry, was_first_join)."""
        with self._lock:
            idx = self._by_request.get(feedback.request_id)
            if idx is None:
                raise KeyError(feedback.request_id)
            entry = self._entries[idx]
            first = entry.feedback is None
            updated = replace(entry, feedback=feedback)
            self._entries[idx] = updated
            self._persist_line(
                entry.seq,
                {"kind": "feedback", "request_id": feedback.request_id, "record": to_wire_dict(feedback)},
            )
            return updated, first

    def has_request(self, request_id: str) -> bool:
        with self._lock:
            return request_id in self._by_request

    def by_request_id(self, request_id: str) -> LogEntry:
        with self._lock:
            idx = self._by_request.get(request_id)
            if idx is None:
                raise KeyError(request_id)
            return self._entries[idx]

    def entries(self, last: int | None = None, start_seq: int | None = None, end_seq: int | None = None) -> list[LogEntry]:
        with self._lock:
            snapshot = list(self._entries)
        if start_seq is not None or end_seq is not None:
            lo = (start_seq or 1) - 1
            hi = end_seq if end_seq is not None else len(snapshot)
            return snapshot[lo:hi]
        if last is not None:
            return snapshot[-last:] if last > 0 else []
        return snapshot

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    def _persist_line(self, seq: int, payload: dict[str, Any]) -> None:
        if not self._dir:
            return
        first_seq = ((seq - 1) // self._segment_size) * self._segment_size + 1
        path = self._dir / f"log-{first_seq:08d}.jsonl"
        try:
            with path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(payload, separators=(",", ":")) + "\n")
        except OSError as exc:
            raise StorageFailure(str(exc)) from exc

    @classmethod
    def load(cls, persist_dir: Path) -> "CallLog":
        """Rebuild a log (entries plus feedback joins) from segment files."""
        log = cls(persist_dir=None)
        paths = sorted(Path(persist_dir).glob("log-*.jsonl"))
        pending_feedback: list[dict[str, Any]] = []
        for path in paths:
            with path.open("r", encoding="utf-8") as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    raw = json.loads(line)
                    if raw.get("kind") == "feedback":
                        pending_feedback.append(raw)
                    else:
                        entry = LogEntry.from_json_dict(raw)
                        log._entries.append(entry)
                        log._by_request[entry.request_id] = len(log._entries) - 1
        for raw in pending_feedback:
            record = from_wire_dict(MessageKind.FEEDBACK, raw["record"])
            try:
                log.join_feedback(record)  # type: ignore[arg-type]
            except KeyError:
                continue
        return log


# -- usage stats ---------------------------------------------------------------

_HISTOGRAM_BINS = 10


def _nearest_rank(sorted_values: Sequence[float], q: float) -> float:
    n = len(sorted_values)
    idx = max(1, math.ceil(q * n)) - 1
    return sorted_values[min(idx, n - 1)]


@dataclass(frozen=True)
class UsageStats:
    model: ModelId
    window_from_seq: int | None
    window_to_seq: int | None
    call_count: int
    label_distribution: dict[str, int]
    confidence_mean: float | None
    confidence_histogram: tuple[int, ...]
    latency_p50: float | None
    latency_p95: float | None
    latency_p99: float | None
    good_rate: float | None
    feedback_count: int

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "model": self.model.render(),
            "window": {"from_seq": self.window_from_seq, "to_seq": self.window_to_seq},
            "call_count": self.call_count,
            "label_distribution": dict(sorted(self.label_distribution.items())),
            "confidence": {
                "mean": self.confidence_mean,
                "histogram": list(self.confidence_histogram),
            },
            "latency_ms": {"p50": self.latency_p50, "p95": self.latency_p95, "p99": self.latency_p99},
            "good_rate": self.good_rate,
            "feedback_count": self.feedback_count,
        }


def window_stats(log: CallLog | Sequence[LogEntry], model: ModelId, window: int = 1000) -> UsageStats:
    """Distributions over the last `window` log entries served by `model`.

    Entries whose served response carries no predictions (escalations without
    a provisional answer) are excluded.
    """
    if isinstance(log, CallLog):
        window_entries = log.entries(last=window)
    else:
        window_entries = list(log)[-window:] if window else list(log)
    mine = [
        e
        for e in window_entries
        if e.served.served_by == model and e.served.predictions
    ]
    labels: dict[str, int] = {}
    confidences: list[float] = []
    latencies: list[float] = []
    good = bad = 0
    histogram = [0] * _HISTOGRAM_BINS
    for e in mine:
        top = e.served.predictions[0]
        labels[top.result] = labels.get(top.result, 0) + 1
        conf = top.confidence
        confidences.append(conf)
        histogram[min(int(conf * _HISTOGRAM_BINS), _HISTOGRAM_BINS - 1)] += 1
        latencies.append(e.served.latency_ms)
        if e.feedback is not None:
            if e.feedback.verdict == "good":
                good += 1
            else:
                bad += 1
    latencies.sort()
    return UsageStats(
        model=model,
        window_from_seq=window_entries[0].seq if window_entries else None,
        window_to_seq=window_entries[-1].seq if window_entries else None,
        call_count=len(mine),
        label_distribution=labels,
        confidence_mean=sum(confidences) / len(confidences) if confidences else None,
        confidence_histogram=tuple(histogram),
        latency_p50=_nearest_rank(latencies, 0.50) if latencies else None,
        latency_p95=_nearest_rank(latencies, 0.95) if latencies else None,
        latency_p99=_nearest_rank(latencies, 0.99) if latencies else None,
        good_rate=good / (good + bad) if (good + bad) else None,
        feedback_count=good + bad,
    )


# -- k-means input clusters -----------------------------------------------------

_KMEANS_TOL = 1e-6
_KMEANS_MAX_ITER = 100
_RADIUS_PERCENTILE = 95.0
DEFAULT_ANOMALY_FACTOR = 1.5


@dataclass(frozen=True)
class ClusterStats:
    size: int
    good_rate: float | None
    mean_confidence: float | None


@dataclass(frozen=True)
class ClusterModel:
    k: int
    feature_names: tuple[str, ...]
    centroids: np.ndarray  # (k, d)
    radii: np.ndarray  # (k,) 95th-percentile training distance
    stats: tuple[ClusterStats, ...]
    fitted_at: datetime | None = None
    training_window: tuple[int, int] | None = None
    objective_trace: tuple[float, ...] = ()

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "k": self.k,
            "feature_names": list(self.feature_names),
            "centroids": [[float(x) for x in row] for row in self.centroids],
            "radii": [float(r) for r in self.radii],
            "stats": [
                {"size": s.size, "good_rate": s.good_rate, "mean_confidence": s.mean_confidence}
                for s in self.stats
            ],
            "fitted_at": render_instant(self.fitted_at) if self.fitted_at else None,
            "training_window": list(self.training_window) if self.training_window else None,
        }


def _vectors_to_matrix(vectors: Sequence[FeatureVector]) -> tuple[np.ndarray, tuple[str, ...]]:
    names = vectors[0].names()
    rows = []
    for fv in vectors:
        if fv.names() != names:
            raise InconsistentSchema(f"expected features {names}, got {fv.names()}")
        rows.append(fv.values())
    return np.asarray(rows, dtype=float), names


def _kmeanspp_init(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = data.shape[0]
    centroids = np.empty((k, data.shape[1]), dtype=float)
    centroids[0] = data[rng.integers(n)]
    d2 = np.sum((data - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:  # pragma: no cover - guarded by distinct-point check
            centroids[j] = data[rng.integers(n)]
            continue
        centroids[j] = data[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((data - centroids[j]) ** 2, axis=1))
    return centroids


def fit_clusters(
    vectors: Sequence[FeatureVector],
    k: int,
    seed: int,
    feedback_verdicts: Sequence[str | None] | None = None,
    confidences: Sequence[float | None] | None = None,
    fitted_at: datetime | None = None,
    training_window: tuple[int, int] | None = None,
) -> ClusterModel:
    """Lloyd's algorithm with k-means++ seeding from the given seed.

    Converges when the largest centroid shift drops below 1e-6 or after 100
    iterations; the within-cluster sum of squares is asserted non-increasing
    at every step. Per-cluster radii are the 95th percentile of training
    distances, which later defines the anomaly boundary.
    """
    if len(vectors) < k:
        raise TooFewPoints(f"need at least {k} points, got {len(vectors)}")
    data, names = _vectors_to_matrix(vectors)
    if np.unique(data, axis=0).shape[0] < k:
        raise TooFewPoints(f"need at least {k} distinct points")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_init(data, k, rng)
    trace: list[float] = []
    assignments = np.zeros(len(data), dtype=int)
    for _ in range(_KMEANS_MAX_ITER):
        dists = np.linalg.norm(data[:, None, :] - centroids[None, :, :], axis=2)
        assignments = np.argmin(dists, axis=1)
        objective = float(np.sum((dists[np.arange(len(data)), assignments]) ** 2))
        if trace:
            assert objective <= trace[-1] + 1e-9 * max(1.0, trace[-1]), "k-means objective increased"
        trace.append(objective)
        new_centroids = centroids.copy()
        for j in range(k):
            members = data[assignments == j]
            if len(members):
                new_centroids[j] = members.mean(axis=0)
        shift = float(np.max(np.linalg.norm(new_centroids - centroids, axis=1)))
        centroids = new_centroids
        if shift < _KMEANS_TOL:
            break
    dists = np.linalg.norm(data[:, None, :] - centroids[None, :, :], axis=2)
    assignments = np.argmin(dists, axis=1)
    point_dist = dists[np.arange(len(data)), assignments]
    radii = np.zeros(k, dtype=float)
    stats = []
    for j in range(k):
        mask = assignments == j
        size = int(mask.sum())
        radii[j] = float(np.percentile(point_dist[mask], _RADIUS_PERCENTILE)) if size else 0.0
        good = bad = 0
        confs = []
        if size:
            for i in np.flatnonzero(mask):
                if feedback_verdicts is not None and feedback_verdicts[i] is not None:
                    if feedback_verdicts[i] == "good":
                        good += 1
                    else:
                        bad += 1
                if confidences is not None and confidences[i] is not None:
                    confs.append(confidences[i])
        stats.append(
            ClusterStats(
                size=size,
                good_rate=good / (good + bad) if (good + bad) else None,
                mean_confidence=float(np.mean(confs)) if confs else None,
            )
        )
    return ClusterModel(
        k=k,
        feature_names=names,
        centroids=centroids,
        radii=radii,
        stats=tuple(stats),
        fitted_at=fitted_at,
        training_window=training_window,
        objective_trace=tuple(trace),
    )


def assign_cluster(
    fv: FeatureVector, model: ClusterModel, gamma: float = DEFAULT_ANOMALY_FACTOR
) -> ClusterAssignment:
    """Nearest centroid by L2 (ties to the smallest index); anomalous when the
    distance exceeds gamma times that cluster's training radius."""
    if fv.names() != model.feature_names:
        raise SchemaMismatch(f"expected features {model.feature_names}, got {fv.names()}")
    x = np.asarray(fv.values(), dtype=float)
    dists = np.linalg.norm(model.centroids - x, axis=1)
    index = int(np.argmin(dists))
    distance = float(dists[index])
    return ClusterAssignment(
        index=index,
        distance=distance,
        anomalous=distance > gamma * float(model.radii[index]),
    )


# -- drift ----------------------------------------------------------------------

_PSI_EPSILON = 1e-4
DEFAULT_DRIFT_BINS = 10
DEFAULT_ALARM_THRESHOLD = 0.2


def psi_from_proportions(
    reference: Sequence[float], current: Sequence[float], epsilon: float = _PSI_EPSILON
) -> float:
    """Population stability index over matched bin proportions.

    Proportions are floored at epsilon before the log-ratio, so empty bins
    stay finite. Every term (c-r)*ln(c/r) is non-negative, hence PSI >= 0,
    with 0 exactly when the floored proportions coincide.
    """
    if len(reference) != len(current):
        raise ValueError("proportion vectors must have equal length")
    total = 0.0
    for r, c in zip(reference, current):
        r = max(float(r), epsilon)
        c = max(float(c), epsilon)
        total += (c - r) * math.log(c / r)
    return total


def _bin_proportions(values: Sequence[float], lo: float, hi: float, bins: int) -> list[float]:
    # `bins` equal-width bins over [lo, hi] plus open under/overflow bins.
    counts = [0] * (bins + 2)
    width = (hi - lo) / bins if hi > lo else 0.0
    for x in values:
        if x < lo:
            counts[0] += 1
        elif x > hi:
            counts[-1] += 1
        elif width == 0.0:
            counts[1] += 1
        else:
            counts[1 + min(int((x - lo) / width), bins - 1)] += 1
    n = len(values)
    return [c / n for c in counts]


def feature_psi(
    reference_values: Sequence[float],
    current_values: Sequence[float],
    bins: int = DEFAULT_DRIFT_BINS,
    epsilon: float = _PSI_EPSILON,
) -> float:
    """PSI for one feature, binning both windows on the reference min/max."""
    if not reference_values or not current_values:
        raise EmptyWindow("both windows must be non-empty")
    lo, hi = min(reference_values), max(reference_values)
    ref_props = _bin_proportions(reference_values, lo, hi, bins)
    cur_props = _bin_proportions(current_values, lo, hi, bins)
    return psi_from_proportions(ref_props, cur_props, epsilon)


@dataclass(frozen=True)
class DriftReport:
    per_feature: dict[str, float]
    aggregate: float
    anomalous_rate: float
    alarm: bool
    alarm_threshold: float
    anomaly_basis: str  # "clusters" or "none"

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "per_feature": dict(sorted(self.per_feature.items())),
            "aggregate": self.aggregate,
            "anomalous_rate": self.anomalous_rate,
            "alarm": self.alarm,
            "alarm_threshold": self.alarm_threshold,
            "anomaly_basis": self.anomaly_basis,
        }


def drift_report(
    reference: Sequence[FeatureVector],
    current: Sequence[FeatureVector],
    bins: int = DEFAULT_DRIFT_BINS,
    alarm_threshold: float = DEFAULT_ALARM_THRESHOLD,
    clusters: ClusterModel | None = None,
    gamma: float = DEFAULT_ANOMALY_FACTOR,
) -> DriftReport:
    """Aggregate drift (max per-feature PSI) plus the individual-anomaly rate."""
    if not reference or not current:
        raise EmptyWindow("both windows must be non-empty")
    ref_matrix, names = _vectors_to_matrix(list(reference))
    cur_matrix, cur_names = _vectors_to_matrix(list(current))
    if names != cur_names:
        raise InconsistentSchema(f"window schemas differ: {names} vs {cur_names}")
    per_feature = {
        name: feature_psi(ref_matrix[:, i].tolist(), cur_matrix[:, i].tolist(), bins=bins)
        for i, name in enumerate(names)
    }
    aggregate = max(per_feature.values())
    anomalous_rate = 0.0
    basis = "none"
    if clusters is not None and clusters.feature_names == names:
        flagged = sum(1 for fv in current if assign_cluster(fv, clusters, gamma).anomalous)
        anomalous_rate = flagged / len(current)
        basis = "clusters"
    return DriftReport(
        per_feature=per_feature,
        aggregate=aggregate,
        anomalous_rate=anomalous_rate,
        alarm=aggregate >= alarm_threshold,
        alarm_threshold=alarm_threshold,
        anomaly_basis=basis,
    )


# -- agreement -------------------------------------------------------------------


def agreement_rate(
    entries: Iterable[LogEntry], a: ModelId, b: ModelId
) -> tuple[float | None, int]:
    """Fraction of requests where both models answered with the same top label.

    Serve-path and shadow invocations both count. Returns (None, 0) when the
    two models share no requests in the window.
    """
    common = agree = 0
    for entry in entries:
        label_a = label_b = None
        for inv in entry.invocations:
            if label_a is None and inv.target == a:
                label_a = inv.top_label()
            if label_b is None and inv.target == b:
                label_b = inv.top_label()
        if label_a is not None and label_b is not None:
            common += 1
            if label_a == label_b:
                agree += 1
    return (agree / common if common else None, common)


class LogUsageSource:
    """Adapter feeding registry fact boxes from the call log."""

    def __init__(self, log: CallLog) -> None:
        self._log = log

    def canary_pass_rate(self, model: ModelId) -> float | None:
        good = bad = 0
        for entry in self._log.entries():
            if (
                entry.decision.rule == RULE_CHALLENGER_CANARY
                and entry.served_via == model
                and entry.feedback is not None
            ):
                if entry.feedback.verdict == "good":
                    good += 1
                else:
                    bad += 1
        total = good + bad
        return good / total if total else None

    def shadow_agreement(self, model: ModelId, reference: ModelId) -> float | None:
        rate, _ = agreement_rate(self._log.entries(), model, reference)
        return rate
