"""Forecast verification: Z-R conversion, rainfall MSE, CSI/FAR/POD and correlation.

Skill scores whose denominator is empty are reported as ``UNDEFINED`` (NaN)
and skipped when averaging over steps.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .radar import Affine

UNDEFINED = float("nan")
CORRELATION_EPS = 1e-9
METRICS = ("rainfall_mse", "csi", "far", "pod", "correlation")


@dataclass(frozen=True)
class ZRParams:
    """``Z = 10 log10(a) + 10 b log10(R)`` with Z in dBZ and R in mm/h."""

    a: float = 118.239
    b: float = 1.5241
    threshold: float = 0.5  # mm/h

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0:
            raise ValueError("Z-R coefficients must be positive")


def dbz_to_rain(z, zr: ZRParams = ZRParams()) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return 10.0 ** ((z - 10.0 * math.log10(zr.a)) / (10.0 * zr.b))


def rain_to_dbz(r, zr: ZRParams = ZRParams()) -> np.ndarray:
    return 10.0 * math.log10(zr.a) + 10.0 * zr.b * np.log10(np.asarray(r, dtype=np.float64))


def pixel_to_rain(p, affine: Affine, zr: ZRParams = ZRParams()) -> np.ndarray:
    """Normalised pixel -> reflectivity via the dataset affine -> rain rate."""
    return dbz_to_rain(affine.inverse(p), zr)


def _same_shape(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"prediction shape {a.shape} != truth shape {b.shape}")
    return a, b


def rainfall_mse(pred_rain, truth_rain) -> float:
    p, t = _same_shape(pred_rain, truth_rain)
    return float(np.mean((p - t) ** 2))


@dataclass(frozen=True)
class Contingency:
    hits: int
    misses: int
    false_alarms: int
    correct_negatives: int

    @property
    def total(self) -> int:
        return self.hits + self.misses + self.false_alarms + self.correct_negatives

    def __add__(self, other: "Contingency") -> "Contingency":
        return Contingency(self.hits + other.hits, self.misses + other.misses,
                           self.false_alarms + other.false_alarms,
                           self.correct_negatives + other.correct_negatives)

    def scores(self) -> tuple[float, float, float]:
        """``(csi, far, pod)``, each UNDEFINED when its denominator is zero."""
        h, m, f = self.hits, self.misses, self.false_alarms
        csi = h / (h + m + f) if h + m + f else UNDEFINED
        far = f / (h + f) if h + f else UNDEFINED
        pod = h / (h + m) if h + m else UNDEFINED
        return csi, far, pod


def contingency(pred_rain, truth_rain, threshold: float = 0.5) -> Contingency:
    p, t = _same_shape(pred_rain, truth_rain)
    pw, tw = p >= threshold, t >= threshold
    return Contingency(int(np.sum(pw & tw)), int(np.sum(~pw & tw)), int(np.sum(pw & ~tw)), int(np.sum(~pw & ~tw)))


def skill_scores(pred_rain, truth_rain, threshold: float = 0.5) -> tuple[float, float, float]:
    """CSI, FAR, POD after thresholding both fields at ``threshold`` mm/h."""
    return contingency(pred_rain, truth_rain, threshold).scores()


def correlation(pred, truth, eps: float = CORRELATION_EPS) -> float:
    """Uncentred correlation ``sum(P T) / (sqrt(sum P^2 * sum T^2) + eps)``."""
    p, t = _same_shape(pred, truth)
    return float(np.sum(p * t) / (math.sqrt(float(np.sum(p * p)) * float(np.sum(t * t))) + eps))


def nan_average(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    v = v[~np.isnan(v)]
    return float(v.mean()) if len(v) else UNDEFINED


@dataclass
class EvaluationReport:
    steps: dict[str, list[float]]  # metric -> per-step values

    @property
    def n_steps(self) -> int:
        return len(self.steps["csi"])

    def averages(self) -> dict[str, float]:
        return {m: nan_average(self.steps[m]) for m in METRICS}

    def rows(self) -> list[list]:
        out = [[k + 1] + [self.steps[m][k] for m in METRICS] for k in range(self.n_steps)]
        avg = self.averages()
        out.append(["mean"] + [avg[m] for m in METRICS])
        return out

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", *METRICS])
            for row in self.rows():
                w.writerow([row[0]] + ["" if isinstance(x, float) and math.isnan(x) else repr(float(x)) for x in row[1:]])


def evaluate_frames(pred: np.ndarray, truth: np.ndarray, affine: Affine, zr: ZRParams = ZRParams()) -> EvaluationReport:
    """Score ``n x K x ... `` normalised predictions against the truth.

    Per step: rainfall MSE over all sequences and pixels, CSI/FAR/POD from
    the contingency counts pooled over sequences, and the per-frame
    correlation averaged over sequences.
    """
    pred, truth = _same_shape(pred, truth)
    if pred.ndim < 3:
        raise ValueError("expected n x K x ... frame stacks")
    steps = {m: [] for m in METRICS}
    for k in range(pred.shape[1]):
        pr, tr = pixel_to_rain(pred[:, k], affine, zr), pixel_to_rain(truth[:, k], affine, zr)
        steps["rainfall_mse"].append(rainfall_mse(pr, tr))
        table = contingency(pr, tr, zr.threshold)
        csi, far, pod = table.scores()
        steps["csi"].append(csi)
        steps["far"].append(far)
        steps["pod"].append(pod)
        steps["correlation"].append(float(np.mean([correlation(pred[i, k], truth[i, k]) for i in range(len(pred))])))
    return EvaluationReport(steps)
