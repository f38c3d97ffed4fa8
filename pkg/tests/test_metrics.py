"""Unit tests for FID, the kNN threshold, precision / recall and the feature path."""

import numpy as np
import pytest
from scipy import linalg
from scipy.spatial.distance import cdist

import sketchDiffusion as sd

SMALL = sd.MetricConfig(resolution = 32, k = 5, channels = (4, 4))


def _features(vectors, extractor_id = "x"):
    return sd.FeatureSet(np.asarray(vectors, dtype = np.float64), extractor_id)


## FID ###############

def test_fid_of_identical_sets():
    vectors = np.random.default_rng(0).normal(size = (200, 5))
    assert sd.fid(_features(vectors), _features(vectors)) < 1e-8


def test_fid_one_dimensional():
    assert sd.fid_from_moments([0.0], [[1.0]], [1.0], [[1.0]]) == pytest.approx(1.0)
    assert sd.fid_from_moments(0.0, 4.0, 0.0, 1.0) == pytest.approx(1.0)


def test_fid_matches_direct_formula():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size = (3, 3)), rng.normal(size = (3, 3))
    sigma_r, sigma_g = a @ a.T + 0.1 * np.eye(3), b @ b.T + 0.1 * np.eye(3)
    mu_r, mu_g = rng.normal(size = 3), rng.normal(size = 3)
    direct = np.sum((mu_r - mu_g) ** 2) + np.trace(sigma_r + sigma_g - 2.0 * np.real(linalg.sqrtm(sigma_r @ sigma_g)))
    assert sd.fid_from_moments(mu_r, sigma_r, mu_g, sigma_g) == pytest.approx(direct, rel = 1e-8)


def test_fid_rejects_bad_inputs():
    with pytest.raises(sd.NumericError):
        sd.fid_from_moments([0.0, 0.0], np.diag([1.0, -1.0]), [0.0, 0.0], np.eye(2))
    with pytest.raises(sd.NumericError):
        sd.fid_from_moments([0.0, 0.0], np.diag([1e3, -1e-6]), [0.0, 0.0], np.eye(2))
    # eigenvalues down to -1e-8 are rounding and clip to zero
    clipped = sd.fid_from_moments([0.0, 0.0], np.diag([1.0, -5e-9]), [0.0, 0.0], np.diag([1.0, 0.0]))
    assert clipped == pytest.approx(0.0, abs = 1e-12)
    vectors = np.random.default_rng(2).normal(size = (10, 3))
    with pytest.raises(sd.MetricError):
        sd.fid(_features(vectors[:1]), _features(vectors))
    with pytest.raises(sd.MetricError):
        sd.fid(_features(vectors, "a"), _features(vectors, "b"))


## Precision and recall ###############

def test_knn_threshold_examples():
    assert sd.knn_threshold(np.array([[0.0], [1.0], [2.0]]), 1) == pytest.approx(1.0)
    assert sd.knn_threshold(np.ones((5, 3)), 2) == 0.0
    with pytest.raises(sd.MetricError):
        sd.knn_threshold(np.zeros((3, 2)), 3)


def test_knn_threshold_matches_brute_force():
    points = np.random.default_rng(3).normal(size = (200, 4))
    expected = []
    for i, point in enumerate(points):
        others = np.delete(points, i, axis = 0)
        expected.append(np.sort(np.linalg.norm(others - point, axis = 1))[4])
    assert sd.knn_threshold(_features(points), 5) == pytest.approx(np.mean(expected), rel = 1e-12)


def test_precision_recall_matches_brute_force():
    rng = np.random.default_rng(4)
    real, gen = rng.normal(size = (60, 3)), rng.normal(0.5, 1.0, size = (40, 3))
    delta = 0.6
    distances = cdist(gen, real)
    precision, recall = sd.precision_recall(real, gen, delta)
    assert precision == pytest.approx(np.mean([d.min() <= delta for d in distances]))
    assert recall == pytest.approx(np.mean([d.min() <= delta for d in distances.T]))


def test_precision_recall_examples():
    real = np.array([[0.0], [1.0]])
    assert sd.precision_recall(real, real, 0.0) == (1.0, 1.0)
    assert sd.precision_recall(real, np.array([[100.0]]), 1.0) == (0.0, 0.0)
    with pytest.raises(sd.MetricError):
        sd.precision_recall(real, real, -0.1)
    with pytest.raises(sd.MetricError):
        sd.precision_recall(real, np.zeros((0, 1)), 1.0)


## Features ###############

def test_rasterize_is_binary(toy_sketches):
    raster = sd.rasterize_sketch(toy_sketches[0].strokes, SMALL)
    assert raster.shape == (32, 32)
    assert set(np.unique(raster)) <= {0.0, 1.0}
    assert raster.sum() > 0
    assert sd.rasterize_sketch([], SMALL).sum() == 0.0


def test_features_are_deterministic_and_order_free(toy_sketches):
    sketch = toy_sketches[1]
    features = sd.extract_features([sketch, sketch, list(reversed(sketch.strokes))], SMALL)
    assert features.vectors.shape == (3, 8)
    assert np.array_equal(features.vectors[0], features.vectors[1])
    assert np.array_equal(features.vectors[0], features.vectors[2])
    assert features.extractor_id == SMALL.extractor_id
    assert sd.MetricConfig(extractor_seed = 1).extractor_id != sd.MetricConfig().extractor_id


def test_metric_render_gamma():
    cfg = sd.MetricConfig(resolution = 64)
    assert cfg.render_gamma == pytest.approx(np.log(2.0) * 128 ** 2)
    assert sd.MetricConfig(gamma = 50.0).render_gamma == 50.0


## Evaluation ###############

def test_evaluate_against_itself(toy_sketches):
    report = sd.evaluate(toy_sketches[:16], toy_sketches[:16], SMALL)
    assert report.fid < 1e-6
    assert (report.precision, report.recall) == (1.0, 1.0)
    assert (report.n_real, report.n_gen, report.k) == (16, 16, 5)
    assert '"extractor_id"' in report.to_json()
    table = sd.report_to_frame({"holdout": report})
    assert list(table.index) == ["holdout"]
    assert "fid" in table.columns


def test_stroke_complexity_groups():
    assert [sd.stroke_complexity_group(n) for n in (1, 3.9, 4, 7.9, 8, 20)] == ["low", "low", "medium", "medium",
                                                                                  "high", "high"]


def test_evaluate_by_group(toy_sketches):
    generated = [sd.GeneratedSketch(list(s.strokes), {"label": s.label}) for s in toy_sketches]
    reports = sd.evaluate_by_group(toy_sketches, generated, SMALL)
    assert reports
    assert set(reports) <= {"low", "medium", "high"}
    for report in reports.values():
        assert report.precision == 1.0 and report.recall == 1.0
