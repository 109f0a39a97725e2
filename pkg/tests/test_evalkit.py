from __future__ import annotations

import json

import numpy as np
import pytest

from vlogkit.backends import Embedding
from vlogkit.errors import DomainError, ShapeError
from vlogkit.evalkit import (
    PSNR_CAP,
    FeatureSet,
    MetricReport,
    cosine_image_video,
    cosine_text_video,
    frechet_distance,
    psnr,
)


def spd(rng, d=4):
    a = rng.standard_normal((d, d))
    return a @ a.T + 0.1 * np.eye(d)


def eig_oracle(m1, c1, m2, c2):
    """Fréchet distance via symmetric eigendecompositions: tr sqrt(C1 C2) = tr sqrt(S C2 S), S = C1^(1/2)."""
    w, v = np.linalg.eigh(c1)
    s = (v * np.sqrt(np.clip(w, 0, None))) @ v.T
    inner = np.linalg.eigvalsh(s @ c2 @ s)
    return float(np.sum((m1 - m2) ** 2) + np.trace(c1) + np.trace(c2) - 2 * np.sum(np.sqrt(np.clip(inner, 0, None))))


def test_frechet_identical_and_offset():
    rng = np.random.default_rng(0)
    c = spd(rng)
    a = FeatureSet(rng.standard_normal(4), c, 10)
    assert abs(frechet_distance(a, a)) <= 1e-8
    v = np.array([1.0, -2.0, 0.5, 3.0])
    assert abs(frechet_distance(a, FeatureSet(a.mean + v, c, 10)) - v @ v) <= 1e-8


def test_frechet_matches_eigen_oracle_and_is_symmetric():
    rng = np.random.default_rng(1)
    for _ in range(200):
        m1, m2, c1, c2 = rng.standard_normal(4), rng.standard_normal(4), spd(rng), spd(rng)
        a, b = FeatureSet(m1, c1, 5), FeatureSet(m2, c2, 5)
        d = frechet_distance(a, b)
        assert abs(d - eig_oracle(m1, c1 + 1e-6 * np.eye(4), m2, c2 + 1e-6 * np.eye(4))) <= 1e-6
        assert abs(d - frechet_distance(b, a)) <= 1e-6 and d >= 0


def test_feature_set_validation():
    with pytest.raises(DomainError):
        FeatureSet.from_features(np.zeros((1, 3)))
    with pytest.raises(ShapeError):
        FeatureSet(np.zeros(3), np.eye(2), 4)
    with pytest.raises(ShapeError):
        frechet_distance(FeatureSet(np.zeros(2), np.eye(2), 4), FeatureSet(np.zeros(3), np.eye(3), 4))
    fs = FeatureSet.from_features(np.random.default_rng(0).standard_normal((50, 3)))
    assert fs.n == 50 and fs.cov.shape == (3, 3)


def test_cosine_examples():
    t = np.array([[1.0, 0.0]])
    assert cosine_text_video(Embedding(t), [Embedding(t), Embedding(t)]) == pytest.approx(1.0)
    assert cosine_text_video(t, [np.array([[0.0, 1.0]])]) == pytest.approx(0.0)
    half = np.array([[0.5, np.sqrt(3) / 2]])
    assert cosine_image_video(t, [half, t]) == pytest.approx(0.75)
    with pytest.raises(DomainError):
        cosine_text_video(np.zeros((1, 2)), [t])


def test_cosine_scale_invariant():
    rng = np.random.default_rng(0)
    t, frames = rng.standard_normal((1, 8)), [rng.standard_normal((1, 8)) for _ in range(4)]
    base = cosine_text_video(t, frames)
    assert cosine_text_video(3.0 * t, [f * s for f, s in zip(frames, [0.1, 2, 5, 9])]) == pytest.approx(base)


def test_psnr_examples():
    a = np.random.default_rng(0).random((2, 3, 4, 4))
    assert psnr(a, a) == PSNR_CAP
    assert psnr(np.zeros(100), np.full(100, 0.1)) == pytest.approx(20.0)
    assert psnr(np.zeros(10), np.ones(10)) == pytest.approx(0.0)
    with pytest.raises(ShapeError):
        psnr(np.zeros(3), np.zeros(4))


def test_metric_report_json(tmp_path):
    r = MetricReport("frechet", 1.5, 10, "mock:0", 3)
    assert json.loads(r.save(tmp_path / "r.json").read_text()) == {
        "metric": "frechet", "value": 1.5, "n_samples": 10, "embedder_id": "mock:0", "seed": 3}
