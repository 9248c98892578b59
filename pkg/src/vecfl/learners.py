"""Desk-scale surrogate learners and their synthetic data.

Two learners stand in for perception DNNs:

* ``BoxRegressionTask`` -- a linear correction on top of a raw box-center
  measurement. Features are the scaled measurement, a bias, and occlusion
  cues (bearing times an occlusion flag). The ``feature`` segment holds the
  measurement/bias weights, the ``head`` segment the occlusion weights.
* ``ClassificationTask`` -- multinomial logistic regression on Gaussian
  class clusters (weather / sign recognition stand-in).

Regions differ by a ``BoxProfile`` / ``ClassProfile`` so that models trained
on cloud data transfer imperfectly to edge regions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .world import Scenario, SensorPose, visibility_codes

FEATURE_SCALE = 20.0
BOX_FEATURES = 6


@dataclass
class Dataset:
    features: np.ndarray
    target: np.ndarray
    base: np.ndarray | None = None
    occluded: np.ndarray | None = None
    origin: np.ndarray | None = None
    object_ids: np.ndarray | None = None

    def __len__(self):
        return int(self.features.shape[0])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(**{k: (None if v is None else v[idx]) for k, v in self._fields().items()})

    def _fields(self):
        return {"features": self.features, "target": self.target, "base": self.base,
                "occluded": self.occluded, "origin": self.origin, "object_ids": self.object_ids}

    @staticmethod
    def concat(parts) -> "Dataset":
        parts = [p for p in parts if p is not None]
        if not parts:
            raise ValueError("nothing to concatenate")
        out = {}
        for k in parts[0]._fields():
            vals = [getattr(p, k) for p in parts]
            out[k] = None if any(v is None for v in vals) else np.concatenate(vals, axis=0)
        return Dataset(**out)


class LearningTask:
    """Loss, gradient and score of a surrogate learner over flat parameters."""

    kind = "generic"
    layout: dict

    @property
    def size(self):
        return max(stop for _, stop in self.layout.values())

    def init_values(self):
        return np.zeros(self.size)

    def loss(self, w, data):
        raise NotImplementedError

    def grad(self, w, data):
        raise NotImplementedError

    def metric(self, w, data):
        raise NotImplementedError


class QuadraticTask(LearningTask):
    """``sum((w - target)**2)``; a fixed point for checks and examples."""

    kind = "quadratic"

    def __init__(self, target):
        self.target = np.atleast_1d(np.asarray(target, dtype=np.float64))
        self.layout = {"w": (0, self.target.size)}

    def loss(self, w, data=None):
        r = w - self.target
        return float(r @ r)

    def grad(self, w, data=None):
        return 2.0 * (w - self.target)

    def metric(self, w, data=None):
        return 100.0 * math.exp(-math.sqrt(self.loss(w)))


class BoxRegressionTask(LearningTask):
    kind = "regression"

    def __init__(self, ridge=1e-4, metric_scale=1.0):
        self.ridge = ridge
        self.metric_scale = metric_scale
        self.layout = {"feature": (0, 6), "head": (6, 12)}

    def predict(self, w, data):
        W = w.reshape(BOX_FEATURES, 2)
        return data.base + data.features @ W

    def loss(self, w, data):
        if len(data) == 0:
            return 0.5 * self.ridge * float(w @ w)
        r = self.predict(w, data) - data.target
        return 0.5 * float(np.mean(np.sum(r * r, axis=1))) + 0.5 * self.ridge * float(w @ w)

    def grad(self, w, data):
        if len(data) == 0:
            return self.ridge * w
        r = self.predict(w, data) - data.target
        g = data.features.T @ r / len(data)
        return g.reshape(-1) + self.ridge * w

    def errors(self, w, data):
        """Euclidean distance between predicted and true centers, per row."""
        r = self.predict(w, data) - data.target
        return np.hypot(r[:, 0], r[:, 1])

    def metric(self, w, data):
        """``100 exp(-RMSE / scale)``, averaged over the visible and occluded strata present."""
        if len(data) == 0:
            return 0.0
        err2 = self.errors(w, data) ** 2
        if data.occluded is None:
            strata = [err2]
        else:
            occ = np.asarray(data.occluded, dtype=bool)
            strata = [e for e in (err2[~occ], err2[occ]) if len(e)]
        return float(np.mean([100.0 * math.exp(-math.sqrt(float(np.mean(e))) / self.metric_scale)
                              for e in strata]))


class ClassificationTask(LearningTask):
    kind = "classification"

    def __init__(self, dim, n_classes, ridge=1e-3):
        self.dim, self.n_classes, self.ridge = dim, n_classes, ridge
        self.layout = {"feature": (0, dim * n_classes),
                       "head": (dim * n_classes, (dim + 1) * n_classes)}

    def _logits(self, w, X):
        W = w[: self.dim * self.n_classes].reshape(self.dim, self.n_classes)
        b = w[self.dim * self.n_classes:]
        return X @ W + b

    def _probs(self, w, X):
        z = self._logits(w, X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def loss(self, w, data):
        reg = 0.5 * self.ridge * float(w @ w)
        if len(data) == 0:
            return reg
        z = self._logits(w, data.features)
        zmax = z.max(axis=1, keepdims=True)
        lse = (zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)))[:, 0]
        y = data.target.astype(np.int64)
        return float(np.mean(lse - z[np.arange(len(y)), y])) + reg

    def grad(self, w, data):
        if len(data) == 0:
            return self.ridge * w
        p = self._probs(w, data.features)
        y = data.target.astype(np.int64)
        p[np.arange(len(y)), y] -= 1.0
        p /= len(y)
        gW = data.features.T @ p
        gb = p.sum(axis=0)
        return np.concatenate([gW.reshape(-1), gb]) + self.ridge * w

    def metric(self, w, data):
        if len(data) == 0:
            return 0.0
        pred = np.argmax(self._logits(w, data.features), axis=1)
        return 100.0 * float(np.mean(pred == data.target.astype(np.int64)))


def train_centralized(task: LearningTask, w0, data, epochs, learning_rate):
    """Full-batch gradient descent from ``w0``."""
    w = np.array(w0, dtype=np.float64)
    for _ in range(int(epochs)):
        w = w - learning_rate * task.grad(w, data)
    return w


# ------------------------------------------------------------ box samples


@dataclass(frozen=True)
class BoxProfile:
    """How a region distorts raw box measurements.

    ``range_scale`` inflates the measured offset (uncalibrated ranging),
    ``occlusion_bias`` pulls occluded centers toward the sensor by that many
    meters (only the near face is seen).
    """

    range_scale: float = 0.0
    occlusion_bias: float = 1.0
    noise: float = 0.3
    occluded_noise: float = 0.5


def box_observations(scenario: Scenario, pose: SensorPose, profile: BoxProfile, rng,
                     visible_only=False) -> Dataset:
    """Feature rows for every in-wedge object seen from ``pose``."""
    codes = visibility_codes(pose, scenario.objects)
    rows = [(o, c) for o, c in zip(scenario.objects, codes) if c == 1 or (c == 2 and not visible_only)]
    n = len(rows)
    feats = np.zeros((n, BOX_FEATURES))
    base = np.zeros((n, 2))
    target = np.zeros((n, 2))
    occ = np.zeros(n, dtype=bool)
    ids = np.zeros(n, dtype=np.int64)
    s = np.asarray(pose.position, dtype=np.float64)
    for i, (obj, code) in enumerate(rows):
        rel = np.asarray(obj.center, dtype=np.float64) - s
        dist = math.hypot(rel[0], rel[1])
        u = rel / dist if dist > 0 else np.zeros(2)
        is_occ = code == 2
        sigma = profile.occluded_noise if is_occ else profile.noise
        m = (1.0 + profile.range_scale) * rel + sigma * rng.standard_normal(2)
        if is_occ:
            m = m - profile.occlusion_bias * u
        flag = 1.0 if is_occ else 0.0
        feats[i] = (m[0] / FEATURE_SCALE, m[1] / FEATURE_SCALE, 1.0, flag * u[0], flag * u[1], flag)
        base[i], target[i], occ[i], ids[i] = m, rel, is_occ, obj.id
    origin = np.tile(s, (n, 1))
    return Dataset(feats, target, base, occ, origin, ids)


def box_dataset(scenario, poses, profile, rng, visible_only=False) -> Dataset:
    parts = [box_observations(scenario, p, profile, rng, visible_only) for p in poses]
    return Dataset.concat(parts) if parts else empty_box_dataset()


def empty_box_dataset() -> Dataset:
    return Dataset(np.zeros((0, BOX_FEATURES)), np.zeros((0, 2)), np.zeros((0, 2)),
                   np.zeros(0, dtype=bool), np.zeros((0, 2)), np.zeros(0, dtype=np.int64))


# ------------------------------------------------------ classification data


@dataclass(frozen=True)
class ClassProfile:
    """Gaussian class clusters; ``shift`` moves each class mean along its own direction."""

    dim: int = 4
    n_classes: int = 3
    separation: float = 2.0
    spread: float = 1.0
    shift: float = 0.0
    task_seed: int = 0
    class_weights: tuple = field(default=())

    def with_shift(self, shift):
        return replace(self, shift=shift)


def class_dataset(n, profile: ClassProfile, rng) -> Dataset:
    layout = np.random.default_rng(profile.task_seed)
    means = layout.standard_normal((profile.n_classes, profile.dim)) * profile.separation
    dirs = layout.standard_normal((profile.n_classes, profile.dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = means + profile.shift * dirs
    p = np.asarray(profile.class_weights, dtype=np.float64) if profile.class_weights else None
    if p is not None:
        p = p / p.sum()
    y = rng.choice(profile.n_classes, size=n, p=p)
    X = means[y] + profile.spread * rng.standard_normal((n, profile.dim))
    return Dataset(X, y.astype(np.int64))
