"""Seeded traffic generator: Gaussian mixture features with a drift program."""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Iterator

import numpy as np

from ..protocol import FeatureVector, ScoreRequest


@dataclass(frozen=True)
class MixtureComponent:
    weight: float
    mean: tuple[float, ...]
    cov_diag: tuple[float, ...]


@dataclass(frozen=True)
class DriftEvent:
    """From request `at`+1 onward, component means move by `mean_shift`
    (absolute offset from the base configuration; later events replace
    earlier ones)."""

    at: int
    mean_shift: tuple[float, ...]


@dataclass(frozen=True)
class TrafficConfig:
    feature_names: tuple[str, ...]
    components: tuple[MixtureComponent, ...]
    drift_program: tuple[DriftEvent, ...] = ()
    rate: float = 1.0  # requests per clock second
    total: int = 0
    start_time: datetime = datetime(2018, 6, 16, tzinfo=timezone.utc)

    def __post_init__(self) -> None:
        if not self.components:
            raise ValueError("at least one mixture component required")
        weight_sum = sum(c.weight for c in self.components)
        if abs(weight_sum - 1.0) > 1e-9:
            raise ValueError(f"component weights must sum to 1, got {weight_sum}")
        d = len(self.feature_names)
        for c in self.components:
            if len(c.mean) != d or len(c.cov_diag) != d:
                raise ValueError("component dimensions must match the feature schema")
        for event in self.drift_program:
            if len(event.mean_shift) != d:
                raise ValueError("drift shift dimension must match the feature schema")
        if self.total < 0:
            raise ValueError("total must be >= 0")
        if self.rate <= 0:
            raise ValueError("rate must be > 0")


def request_id_for(ordinal: int) -> str:
    return f"req-{ordinal:06d}"


def gen_traffic(cfg: TrafficConfig, rng: np.random.Generator) -> Iterator[ScoreRequest]:
    """Yield `total` requests numbered req-000001...; byte-identical given the
    same config and generator seed."""
    weights = np.asarray([c.weight for c in cfg.components], dtype=float)
    means = np.asarray([c.mean for c in cfg.components], dtype=float)
    stds = np.sqrt(np.asarray([c.cov_diag for c in cfg.components], dtype=float))
    program = sorted(cfg.drift_program, key=lambda e: e.at)
    for i in range(1, cfg.total + 1):
        shift = np.zeros(len(cfg.feature_names))
        for event in program:
            if i > event.at:
                shift = np.asarray(event.mean_shift, dtype=float)
        component = int(rng.choice(len(cfg.components), p=weights)) if len(cfg.components) > 1 else 0
        sample = means[component] + shift + stds[component] * rng.standard_normal(len(cfg.feature_names))
        yield ScoreRequest(
            request_id=request_id_for(i),
            timestamp=cfg.start_time + timedelta(seconds=(i - 1) / cfg.rate),
            features=FeatureVector.from_pairs(zip(cfg.feature_names, sample.tolist())),
        )
