"""k-means fitting and anomaly assignment."""

from __future__ import annotations

import numpy as np
import pytest

from modelgate.analytics import (
    InconsistentSchema,
    SchemaMismatch,
    TooFewPoints,
    assign_cluster,
    fit_clusters,
)
from modelgate.protocol import FeatureVector


def fv(x: float, y: float) -> FeatureVector:
    return FeatureVector.from_pairs([("x", x), ("y", y)])


def planted_two_clusters(seed: int = 17, n: int = 100, sigma: float = 0.5):
    rng = np.random.default_rng(seed)
    a = rng.normal((0.0, 0.0), sigma, size=(n, 2))
    b = rng.normal((10.0, 10.0), sigma, size=(n, 2))
    return [fv(float(p[0]), float(p[1])) for p in np.vstack([a, b])]


class TestFitClusters:
    def test_k1_equals_coordinate_mean(self):
        rng = np.random.default_rng(3)
        points = rng.normal(2.0, 1.5, size=(60, 2))
        vectors = [fv(float(p[0]), float(p[1])) for p in points]
        model = fit_clusters(vectors, k=1, seed=0)
        expected = points.mean(axis=0)
        assert np.max(np.abs(model.centroids[0] - expected)) < 1e-9

    def test_planted_clusters_recovered(self):
        vectors = planted_two_clusters()
        model = fit_clusters(vectors, k=2, seed=42)
        planted = np.asarray([[0.0, 0.0], [10.0, 10.0]])
        # each planted mean matched by exactly one centroid within L2 0.3
        for mean in planted:
            distances = np.linalg.norm(model.centroids - mean, axis=1)
            assert distances.min() < 0.3
        assert {int(np.argmin(np.linalg.norm(model.centroids - m, axis=1))) for m in planted} == {0, 1}

    def test_objective_non_increasing(self):
        vectors = planted_two_clusters(seed=23)
        model = fit_clusters(vectors, k=2, seed=5)
        trace = model.objective_trace
        assert len(trace) >= 1
        for earlier, later in zip(trace, trace[1:]):
            assert later <= earlier + 1e-9

    def test_too_few_points(self):
        with pytest.raises(TooFewPoints):
            fit_clusters([fv(0, 0), fv(1, 1)], k=3, seed=0)

    def test_too_few_distinct_points(self):
        with pytest.raises(TooFewPoints):
            fit_clusters([fv(0, 0), fv(0, 0), fv(1, 1)], k=3, seed=0)

    def test_inconsistent_schema(self):
        bad = FeatureVector.from_pairs([("x", 1.0), ("z", 2.0)])
        with pytest.raises(InconsistentSchema):
            fit_clusters([fv(0, 0), bad], k=1, seed=0)

    def test_deterministic_given_seed(self):
        vectors = planted_two_clusters(seed=9)
        a = fit_clusters(vectors, k=2, seed=4)
        b = fit_clusters(vectors, k=2, seed=4)
        assert np.array_equal(a.centroids, b.centroids)
        assert a.objective_trace == b.objective_trace

    def test_cluster_stats_from_training_outcomes(self):
        vectors = [fv(0, 0)] * 10 + [fv(10, 10)] * 10
        verdicts = ["good"] * 9 + ["bad"] + ["bad"] * 9 + ["good"]
        confidences = [0.9] * 10 + [0.6] * 10
        model = fit_clusters(vectors, k=2, seed=1, feedback_verdicts=verdicts, confidences=confidences)
        sizes = sorted(s.size for s in model.stats)
        assert sizes == [10, 10]
        rates = sorted(s.good_rate for s in model.stats)
        assert rates == [pytest.approx(0.1), pytest.approx(0.9)]

    def test_radius_is_95th_percentile(self):
        rng = np.random.default_rng(2)
        points = rng.normal(0.0, 1.0, size=(200, 2))
        vectors = [fv(float(p[0]), float(p[1])) for p in points]
        model = fit_clusters(vectors, k=1, seed=0)
        distances = np.linalg.norm(points - model.centroids[0], axis=1)
        assert model.radii[0] == pytest.approx(np.percentile(distances, 95))


class TestAssign:
    @pytest.fixture
    def model(self):
        return fit_clusters(planted_two_clusters(seed=31), k=2, seed=8)

    def test_at_centroid_not_anomalous(self, model):
        point = fv(float(model.centroids[1][0]), float(model.centroids[1][1]))
        assignment = assign_cluster(point, model)
        assert assignment.index == 1
        assert assignment.distance == pytest.approx(0.0)
        assert not assignment.anomalous

    def test_beyond_radius_is_anomalous(self, model):
        r = float(model.radii[0])
        cx, cy = model.centroids[0]
        point = fv(float(cx + 2 * 1.5 * r), float(cy))
        assignment = assign_cluster(point, model, gamma=1.5)
        assert assignment.anomalous

    def test_within_radius_normal(self, model):
        cx, cy = model.centroids[0]
        point = fv(float(cx + 0.5 * float(model.radii[0])), float(cy))
        assert not assign_cluster(point, model).anomalous

    def test_tie_breaks_to_smallest_index(self):
        vectors = [fv(0, 0)] * 5 + [fv(10, 10)] * 5
        model = fit_clusters(vectors, k=2, seed=0)
        midpoint = fv(
            float(model.centroids[:, 0].mean()), float(model.centroids[:, 1].mean())
        )
        assignment = assign_cluster(midpoint, model)
        distances = np.linalg.norm(model.centroids - np.asarray(midpoint.values()), axis=1)
        assert distances[0] == distances[1]
        assert assignment.index == 0

    def test_schema_mismatch(self, model):
        bad = FeatureVector.from_pairs([("x", 1.0)])
        with pytest.raises(SchemaMismatch):
            assign_cluster(bad, model)

    def test_assign_deterministic(self, model):
        point = fv(3.3, 4.4)
        assert assign_cluster(point, model) == assign_cluster(point, model)
