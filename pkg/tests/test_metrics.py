import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from artery_surrogate.metrics import (
    EvalReport, SsimParams, aggregate_rows, evaluate, mean_error_pct, mse_metric, ssim,
)

GLOBAL = SsimParams(mode="global")
images = arrays(np.float64, (16, 16), elements=st.floats(0, 1, width=32))


def ssim_loop(x, y, k1=0.01, k2=0.03, L=1.0):
    n = x.size
    xs, ys = x.ravel().tolist(), y.ravel().tolist()
    mx = sum(xs) / n
    my = sum(ys) / n
    vx = sum((a - mx) ** 2 for a in xs) / n
    vy = sum((b - my) ** 2 for b in ys) / n
    cxy = sum((a - mx) * (b - my) for a, b in zip(xs, ys)) / n
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    return (2 * mx * my + c1) * (2 * cxy + c2) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))


def test_params_constants():
    p = SsimParams(k1=0.02, k2=0.05, dynamic_range=2.0)
    assert p.c1 == pytest.approx(0.0016) and p.c2 == pytest.approx(0.01)
    with pytest.raises(ValueError):
        SsimParams(k1=0.0)
    with pytest.raises(ValueError):
        SsimParams(mode="sliding")


@pytest.mark.parametrize("mode", ["global", "windowed"])
def test_identical_images(mode, rng):
    x = rng.random((32, 32))
    assert ssim(x, x, SsimParams(mode=mode)) == 1.0


def test_constant_images_global():
    value = ssim(np.zeros((8, 8)), np.ones((8, 8)), GLOBAL)
    assert value == pytest.approx(1e-4 / 1.0001, rel=1e-12)


def test_global_matches_loop_oracle(rng):
    for _ in range(5):
        x, y = rng.random((8, 8)), rng.random((8, 8))
        assert abs(ssim(x, y, GLOBAL) - ssim_loop(x, y)) < 1e-10


def test_windowed_on_uniform_offset():
    # every window sees the same constant pair, so windowed equals global
    x = np.full((20, 20), 0.3)
    y = np.full((20, 20), 0.5)
    assert ssim(x, y) == pytest.approx(ssim(x, y, GLOBAL), rel=1e-12)


def test_shape_checks():
    with pytest.raises(ValueError):
        ssim(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ValueError):
        ssim(np.zeros(4), np.zeros(4))


@settings(max_examples=40, deadline=None)
@given(images, images, st.sampled_from(["global", "windowed"]))
def test_ssim_properties(x, y, mode):
    p = SsimParams(mode=mode)
    s = ssim(x, y, p)
    # anticorrelated images drive the structure term negative
    assert -1 - 1e-12 <= s <= 1 + 1e-12
    assert s == pytest.approx(ssim(y, x, p), abs=1e-12)
    assert s == pytest.approx(ssim(x[::-1, ::-1], y[::-1, ::-1], p), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(images, st.floats(0.05, 1), st.floats(0, 0.5), st.sampled_from(["global", "windowed"]))
def test_ssim_positive_for_increasing_relation(x, a, b, mode):
    # nonnegative images related by an increasing map: every term is positive
    assert 0 < ssim(x, a * x + b, SsimParams(mode=mode)) <= 1 + 1e-12


def test_mse_examples(rng):
    x = rng.random((2, 2))
    assert mse_metric(x, x) == 0.0
    assert mse_metric(x, x + 0.1) == pytest.approx(0.01)
    y = rng.random((2, 2))
    loop = sum((a - b) ** 2 for a, b in zip(x.ravel(), y.ravel())) / 4
    assert abs(mse_metric(x, y) - loop) < 1e-12


def test_mean_error_pct_examples(rng):
    x = rng.random((4, 4)) * 0.9
    assert mean_error_pct(x, x) == 0.0
    assert mean_error_pct(x, x + 0.05) == pytest.approx(5.0)
    y = rng.random((4, 4))
    loop = 100 * sum(abs(a - b) for a, b in zip(x.ravel(), y.ravel())) / 16
    assert mean_error_pct(x, y) == pytest.approx(loop, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(images, images, images)
def test_mse_relaxed_triangle(x, y, z):
    assert mse_metric(x, z) <= 2 * (mse_metric(x, y) + mse_metric(y, z)) + 1e-15


class Oracle:
    def __init__(self, y):
        self.y = y

    def predict(self, X):
        return self.y


def test_evaluate_oracle_model(rng):
    y = rng.random((5, 16, 16)).astype(np.float32)
    report = evaluate(Oracle(y), np.zeros((5, 16, 16, 3)), y)
    assert report.mean_ssim == 1.0 and report.mean_mse == 0.0
    assert len(report.rows) == 5


def test_aggregates_match_rows_and_ignore_order(rng):
    y = rng.random((6, 16, 16))
    pred = np.clip(y + 0.1 * rng.standard_normal(y.shape), 0, 1)
    report = evaluate(Oracle(pred), None, y, model_id="m")
    ssims = [r["ssim"] for r in report.rows]
    assert report.aggregates["ssim"] == {"min": min(ssims), "max": max(ssims),
                                         "mean": pytest.approx(np.mean(ssims), abs=1e-15)}
    assert aggregate_rows(report.rows[::-1]) == report.aggregates
    assert aggregate_rows(report.rows) == report.aggregates


def test_report_files(tmp_path, rng):
    y = rng.random((3, 16, 16))
    report = evaluate(Oracle(y * 0.9), None, y, sample_ids=["a", "b", "c"], model_id="m")
    report.write(tmp_path)
    back = EvalReport.read(tmp_path)
    assert back.rows == report.rows and back.aggregates == report.aggregates
    with open(tmp_path / "rows.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["sample_id"] for r in rows] == ["a", "b", "c"]
    with open(tmp_path / "distribution.csv") as fh:
        dist = list(csv.reader(fh))
    assert dist[0] == ["model_id", "metric", "value"] and len(dist) == 1 + 2 * 3
    assert json.loads((tmp_path / "report.json").read_text())["model_id"] == "m"


def test_evaluate_rejects_shape_mismatch(rng):
    with pytest.raises(ValueError):
        evaluate(Oracle(np.zeros((2, 8, 8))), None, np.zeros((2, 8, 9)))
