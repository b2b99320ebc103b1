"""Synthetic model backends with tunable accuracy, confidence, and latency.

A stub answers a two-label classification against a linear ground-truth rule:
with probability `accuracy` it emits the true label, otherwise the other one.
Confidence is sampled from a Beta distribution (different parameters for
correct and wrong answers) mapped into [0.5, 1] so the emitted label is always
the top-ranked one. Everything is driven by an injected RNG, so runs replay
bit-exactly.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from ..protocol import (
    FeatureVector,
    FeedbackRecord,
    MessageKind,
    ModelId,
    Prediction,
    ScoreRequest,
    ScoreResponse,
    decode_message,
    encode_message,
    order_predictions,
)
from ..router import BackendResult


@dataclass(frozen=True)
class TruthRule:
    """Linear decision rule: positive label iff w . x + b > 0."""

    weights: dict[str, float]
    bias: float = 0.0
    positive_label: str = "pos"
    negative_label: str = "neg"

    def label_for(self, fv: FeatureVector) -> str:
        total = self.bias
        values = fv.as_dict()
        for name, weight in self.weights.items():
            total += weight * values.get(name, 0.0)
        return self.positive_label if total > 0 else self.negative_label

    def other(self, label: str) -> str:
        return self.negative_label if label == self.positive_label else self.positive_label


@dataclass(frozen=True)
class ConfidenceModel:
    alpha_correct: float = 8.0
    beta_correct: float = 2.0
    alpha_wrong: float = 2.0
    beta_wrong: float = 4.0

    def __post_init__(self) -> None:
        for name in ("alpha_correct", "beta_correct", "alpha_wrong", "beta_wrong"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")


@dataclass(frozen=True)
class StubModelConfig:
    model_id: ModelId
    truth_rule: TruthRule
    accuracy: float = 0.9
    confidence: ConfidenceModel = field(default_factory=ConfidenceModel)
    latency_mean_ms: float = 10.0
    latency_jitter_ms: float = 2.0
    failure_rate: float = 0.0
    flip_request_ids: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy must be in [0,1], got {self.accuracy}")
        if not 0.0 <= self.failure_rate <= 1.0:
            raise ValueError(f"failure_rate must be in [0,1], got {self.failure_rate}")


def synth_score(cfg: StubModelConfig, fv: FeatureVector, rng: np.random.Generator) -> tuple[Prediction, ...]:
    """Sample one two-label prediction set; label and complement carry
    complementary uncertainties, ordered by confidence."""
    truth = cfg.truth_rule.label_for(fv)
    correct = rng.random() < cfg.accuracy
    label = truth if correct else cfg.truth_rule.other(truth)
    params = cfg.confidence
    beta = rng.beta(
        params.alpha_correct if correct else params.alpha_wrong,
        params.beta_correct if correct else params.beta_wrong,
    )
    # map into the decisive half-interval so the chosen label stays on top
    confidence = min(max(0.5 + 0.5 * float(beta), 0.5 + 1e-12), 1.0 - 1e-12)
    return order_predictions(
        [
            Prediction(result=label, uncertainty=1.0 - confidence),
            Prediction(result=cfg.truth_rule.other(label), uncertainty=confidence),
        ]
    )


class StubModel:
    """In-process model microservice with simulated latency and failures."""

    def __init__(self, cfg: StubModelConfig, rng: np.random.Generator) -> None:
        self.cfg = cfg
        self._rng = rng
        self._lock = threading.Lock()
        self.received_feedback: list[FeedbackRecord] = []
        self.score_calls = 0

    def score(self, request: ScoreRequest, deadline_ms: float) -> BackendResult:
        with self._lock:
            self.score_calls += 1
            failed = self._rng.random() < self.cfg.failure_rate
            latency = max(
                0.0,
                self.cfg.latency_mean_ms
                + self.cfg.latency_jitter_ms * float(self._rng.uniform(-1.0, 1.0)),
            )
            if failed:
                return BackendResult(
                    outcome="error", latency_ms=latency, error_code="STUB_FAILURE", error_text="injected failure"
                )
            predictions = synth_score(self.cfg, request.features, self._rng)
        if request.request_id in self.cfg.flip_request_ids:
            # swap the two labels, keeping the confidence ranking intact
            a, b = predictions
            predictions = (
                Prediction(result=b.result, uncertainty=a.uncertainty),
                Prediction(result=a.result, uncertainty=b.uncertainty),
            )
        if latency > deadline_ms:
            return BackendResult(outcome="timeout", latency_ms=latency)
        response = ScoreResponse(
            request_id=request.request_id,
            served_by=self.cfg.model_id,
            predictions=predictions,
            status="ok",
            latency_ms=latency,
        )
        return BackendResult(outcome="ok", latency_ms=latency, response=response)

    def feedback(self, record: FeedbackRecord) -> None:
        with self._lock:
            self.received_feedback.append(record)


class StubModelServer(ThreadingHTTPServer):
    """Run a stub as a real HTTP model microservice (score/feedback/notify)."""

    daemon_threads = True

    def __init__(self, address, stub: StubModel) -> None:
        super().__init__(address, _StubHandler)
        self.stub = stub

    @property
    def endpoint(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "StubModelServer":
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return self


class _StubHandler(BaseHTTPRequestHandler):
    server: StubModelServer

    def log_message(self, fmt: str, *args) -> None:
        pass

    def do_POST(self) -> None:
        length = int(self.headers.get("content-length", "0") or 0)
        body = self.rfile.read(length) if length else b""
        if self.path == "/v1/score":
            request = decode_message(MessageKind.SCORE_REQUEST, body)
            result = self.server.stub.score(request, deadline_ms=60_000.0)
            if result.ok and result.response is not None:
                payload = encode_message(result.response)
                self.send_response(200)
            else:
                payload = json.dumps({"error": result.error_code or result.outcome}).encode()
                self.send_response(500)
            self.send_header("content-type", "application/json")
            self.send_header("content-length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)
            return
        if self.path == "/v1/feedback":
            record = decode_message(MessageKind.FEEDBACK, body)
            self.server.stub.feedback(record)
            self._ack()
            return
        if self.path == "/v1/notify":
            self._ack()
            return
        self.send_response(404)
        self.end_headers()

    def _ack(self) -> None:
        payload = b'{"ok":true}'
        self.send_response(200)
        self.send_header("content-type", "application/json")
        self.send_header("content-length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)
