"""Inverse-power accuracy predictor ``accuracy(n) = a - b * n**(-c)``."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

C_GRID = np.round(np.arange(1, 61) * 0.05, 10)
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class FitError(ValueError):
    pass


@dataclass(frozen=True)
class PowerLawPredictor:
    a: float
    b: float
    c: float
    resource_kind: str = "samples"
    floor: float = 0.0

    def __post_init__(self):
        for name in ("a", "b", "c", "floor"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.b > 0 and self.c > 0):
            raise ValueError("b and c must be > 0")

    def to_dict(self):
        return {"a": self.a, "b": self.b, "c": self.c, "resource_kind": self.resource_kind,
                "floor": self.floor}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["a"]), float(d["b"]), float(d["c"]), d.get("resource_kind", "samples"),
                   float(d.get("floor", 0.0)))


@dataclass(frozen=True)
class CalibrationPoint:
    resource: int
    observed_accuracy: float

    def __post_init__(self):
        if self.resource < 1:
            raise ValueError("resource must be >= 1")


def predict(p: PowerLawPredictor, n) -> float:
    if n < 1:
        raise ValueError("n must be >= 1")
    return p.a - p.b * float(n) ** (-p.c)


def marginal_gain(p: PowerLawPredictor, n) -> float:
    """Predicted gain of the (n+1)-th resource unit; at n=0 measured from the floor."""
    if n < 0:
        raise ValueError("n must be >= 0")
    if n == 0:
        return predict(p, 1) - p.floor
    return p.b * (float(n) ** (-p.c) - float(n + 1) ** (-p.c))


def stage_gain(p: PowerLawPredictor, rounds) -> float:
    """Increment ``b (1 - (r+1)^-c)`` contributed by ``rounds`` FL rounds (0 at r=0)."""
    return p.b * (1.0 - float(rounds + 1) ** (-p.c))


def _linear_fit(n, y, c):
    x = n ** (-c)
    A = np.column_stack([np.ones_like(x), -x])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    return float(coef[0]), float(coef[1]), float(resid @ resid)


def fit(points, resource_kind="samples", tol=1e-10) -> tuple[PowerLawPredictor, float]:
    """Least-squares fit: grid over ``c``, closed form for ``(a, b)``, golden-section polish.

    Returns the predictor and its residual RMSE.
    """
    pts = [p if isinstance(p, CalibrationPoint) else CalibrationPoint(int(p[0]), float(p[1]))
           for p in points]
    n = np.array([p.resource for p in pts], dtype=np.float64)
    y = np.array([p.observed_accuracy for p in pts], dtype=np.float64)
    if len(np.unique(n)) < 3:
        raise FitError("underdetermined")

    sse = [_linear_fit(n, y, c)[2] for c in C_GRID]
    k = int(np.argmin(sse))
    lo = C_GRID[max(k - 1, 0)] if k > 0 else C_GRID[0] / 2
    hi = C_GRID[min(k + 1, len(C_GRID) - 1)]

    def f(c):
        return _linear_fit(n, y, c)[2]

    x1, x2 = hi - _GOLDEN * (hi - lo), lo + _GOLDEN * (hi - lo)
    f1, f2 = f(x1), f(x2)
    while hi - lo > tol:
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - _GOLDEN * (hi - lo)
            f1 = f(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + _GOLDEN * (hi - lo)
            f2 = f(x2)
    best_c = 0.5 * (lo + hi)
    # keep the grid point if the polish did not help
    if sse[k] < f(best_c):
        best_c = float(C_GRID[k])
    a, b, s = _linear_fit(n, y, best_c)
    if not b > 1e-9 * max(1.0, abs(a)):
        raise FitError("non-monotone data")
    return PowerLawPredictor(a, b, best_c, resource_kind), math.sqrt(s / len(n))


def rmse(p: PowerLawPredictor, points) -> float:
    res = [pt.observed_accuracy - predict(p, pt.resource) for pt in points]
    return math.sqrt(sum(r * r for r in res) / len(res))


def read_calibration_csv(path) -> list[CalibrationPoint]:
    with open(Path(path), newline="") as fh:
        rows = csv.DictReader(line for line in fh if not line.startswith("#"))
        return [CalibrationPoint(int(float(r["resource"])), float(r["accuracy"])) for r in rows]
