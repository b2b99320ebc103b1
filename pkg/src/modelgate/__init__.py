"""modelgate: a policy-driven gateway for versioned model microservices.

The gateway sits between a business application and its model backends with
the same score/feedback/notify interface as a model, logs every call, detects
input drift, and walks new versions through shadow -> canary -> thresholded ->
full with automatic rollback and human escalation.
"""

from .protocol import (
    FeatureVector,
    FeedbackRecord,
    MessageKind,
    ModelId,
    Prediction,
    ScoreRequest,
    ScoreResponse,
    VersionNotification,
    decode_message,
    encode_message,
    parse_model_id,
)
from .registry import ActiveChain, FactBox, ModelRecord, ModelRegistry, Stage
from .policy import PolicyConfig, PolicyEngine, RoutingDecision, canary_assign, decide
from .analytics import CallLog, ClusterModel, DriftReport, UsageStats, fit_clusters, drift_report
from .router import Gateway, GatewayBackend
from .control_plane import AdminApi, EscalationQueue

__version__ = "0.1.0"

__all__ = [
    "ActiveChain",
    "AdminApi",
    "CallLog",
    "ClusterModel",
    "DriftReport",
    "EscalationQueue",
    "FactBox",
    "FeatureVector",
    "FeedbackRecord",
    "Gateway",
    "GatewayBackend",
    "MessageKind",
    "ModelId",
    "ModelRecord",
    "ModelRegistry",
    "PolicyConfig",
    "PolicyEngine",
    "Prediction",
    "RoutingDecision",
    "ScoreRequest",
    "ScoreResponse",
    "Stage",
    "UsageStats",
    "VersionNotification",
    "canary_assign",
    "decide",
    "decode_message",
    "drift_report",
    "encode_message",
    "fit_clusters",
    "parse_model_id",
]
