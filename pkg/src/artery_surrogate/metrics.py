"""Image-similarity metrics and evaluation reports."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

__all__ = ["SsimParams", "EvalReport", "ssim", "mse_metric", "mean_error_pct",
           "evaluate", "aggregate_rows"]


@dataclass(frozen=True)
class SsimParams:
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0
    mode: str = "windowed"
    window_size: int = 11
    sigma: float = 1.5

    def __post_init__(self):
        if not (self.k1 > 0 and self.k2 > 0 and self.dynamic_range > 0):
            raise ValueError("k1, k2 and the dynamic range must be positive")
        if self.mode not in ("global", "windowed"):
            raise ValueError(f"unknown SSIM mode {self.mode!r}")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


def _ssim_formula(mx, my, vx, vy, cxy, c1, c2):
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))


def _gaussian_window(size, sigma):
    g = np.exp(-0.5 * ((np.arange(size) - (size - 1) / 2) / sigma) ** 2)
    return g / g.sum()


def ssim(x, y, params: SsimParams | None = None) -> float:
    """Structural similarity of two equally shaped 2-D images.

    ``global`` mode applies the formula once with whole-image statistics
    (population variances).  ``windowed`` mode averages it over all fully
    contained Gaussian windows.
    """
    p = params or SsimParams()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.ndim != 2:
        raise ValueError("ssim expects 2-D images")
    if np.array_equal(x, y):
        return 1.0
    if p.mode == "global":
        mx, my = x.mean(), y.mean()
        vx, vy = ((x - mx) ** 2).mean(), ((y - my) ** 2).mean()
        cxy = ((x - mx) * (y - my)).mean()
        return float(_ssim_formula(mx, my, vx, vy, cxy, p.c1, p.c2))

    win = _gaussian_window(min(p.window_size, *x.shape), p.sigma)
    pad = len(win) // 2

    def blur(img):
        out = ndimage.correlate1d(img, win, axis=0, mode="constant")
        out = ndimage.correlate1d(out, win, axis=1, mode="constant")
        h, w = out.shape
        return out[pad:h - (len(win) - 1 - pad), pad:w - (len(win) - 1 - pad)]

    mx, my = blur(x), blur(y)
    vx = blur(x * x) - mx ** 2
    vy = blur(y * y) - my ** 2
    cxy = blur(x * y) - mx * my
    return float(np.mean(_ssim_formula(mx, my, vx, vy, cxy, p.c1, p.c2)))


def mse_metric(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float(np.mean((x - y) ** 2))


def mean_error_pct(x, y) -> float:
    """100 x mean absolute difference of two [0, 1]-normalized maps."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float(100.0 * np.mean(np.abs(x - y)))


def aggregate_rows(rows) -> dict:
    agg = {}
    for key in ("mse", "ssim", "mean_error_pct"):
        vals = np.array(sorted(r[key] for r in rows), dtype=np.float64)
        agg[key] = {"min": float(vals.min()), "max": float(vals.max()),
                    "mean": float(np.mean(vals))} if len(vals) else {}
    return agg


@dataclass
class EvalReport:
    model_id: str
    rows: list = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def mean_ssim(self) -> float:
        return self.aggregates["ssim"]["mean"]

    @property
    def mean_mse(self) -> float:
        return self.aggregates["mse"]["mean"]

    def write(self, directory) -> None:
        """report.json, rows.csv and a box-plot-ready distribution.csv."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "report.json").write_text(json.dumps(asdict(self), indent=1))
        with open(directory / "rows.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["sample_id", "mse", "ssim", "mean_error_pct"])
            writer.writeheader()
            writer.writerows(self.rows)
        with open(directory / "distribution.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["model_id", "metric", "value"])
            for r in self.rows:
                writer.writerow([self.model_id, "ssim", r["ssim"]])
                writer.writerow([self.model_id, "mse", r["mse"]])

    @classmethod
    def read(cls, directory) -> "EvalReport":
        data = json.loads((Path(directory) / "report.json").read_text())
        return cls(**data)


def evaluate(model, X, y, sample_ids=None, model_id: str = "model",
             params: SsimParams | None = None, return_predictions: bool = False):
    """Predict every sample and tabulate MSE, SSIM and mean error percentage.

    ``model`` is anything with ``predict(X) -> (N, H, W)``.
    """
    y = np.asarray(y)
    pred = np.asarray(model.predict(X))
    if pred.shape != y.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match targets {y.shape}")
    if sample_ids is None:
        sample_ids = [str(k) for k in range(len(y))]
    rows = [{"sample_id": sid, "mse": mse_metric(p, t), "ssim": ssim(p, t, params),
             "mean_error_pct": mean_error_pct(p, t)}
            for sid, p, t in zip(sample_ids, pred, y)]
    report = EvalReport(model_id, rows, aggregate_rows(rows))
    if return_predictions:
        return report, pred
    return report
