"""Federated learning primitives over flat, segmented parameter vectors."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .learners import BoxRegressionTask, Dataset, LearningTask
from .seeding import derive_seed
from .world import DetectionReport

DEFAULT_GATE = 3.0
EXACT_INCLUSION_LIMIT = 12


class LayoutMismatchError(ValueError):
    pass


class DivergedError(FloatingPointError):
    pass


@dataclass
class ModelParams:
    values: np.ndarray
    layout: dict

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        spans = sorted(self.layout.values())
        pos = 0
        for start, stop in spans:
            if start != pos or stop < start:
                raise ValueError("layout segments must partition the vector")
            pos = stop
        if pos != self.values.size:
            raise ValueError("layout does not cover the parameter vector")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("parameters must be finite")

    def segment(self, name):
        start, stop = self.layout[name]
        return self.values[start:stop]

    def copy(self):
        return ModelParams(self.values.copy(), dict(self.layout))

    def with_values(self, values):
        return ModelParams(np.array(values, dtype=np.float64), dict(self.layout))

    def __add__(self, other):
        _check_layouts([self, other])
        return self.with_values(self.values + other.values)

    def __sub__(self, other):
        _check_layouts([self, other])
        return self.with_values(self.values - other.values)

    def to_dict(self):
        return {"values": [float(v) for v in self.values],
                "layout": [[k, int(a), int(b)] for k, (a, b) in self.layout.items()]}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["values"], dtype=np.float64),
                   {k: (int(a), int(b)) for k, a, b in d["layout"]})

    @classmethod
    def zeros_for(cls, task: LearningTask):
        return cls(task.init_values(), dict(task.layout))


def _check_layouts(models):
    first = models[0].layout
    for m in models[1:]:
        if m.layout != first or m.values.shape != models[0].values.shape:
            raise LayoutMismatchError("model layouts differ")


@dataclass
class ClientState:
    client_id: int
    task: LearningTask
    data: Dataset
    params: ModelParams
    grad_norm: float = 0.0


def gradient_norm(client: ClientState) -> float:
    g = client.task.grad(client.params.values, client.data)
    return float(np.linalg.norm(g))


def local_update(client: ClientState, epochs: int, learning_rate: float):
    """Full-batch gradient descent on the client's data.

    Returns ``(delta, first_gradient_norm)`` and records the norm on the client.
    The client's parameters are not modified.
    """
    if epochs < 1 or not learning_rate > 0:
        raise ValueError("epochs >= 1 and learning_rate > 0 required")
    w = client.params.values.copy()
    first = None
    for _ in range(int(epochs)):
        g = client.task.grad(w, client.data)
        if not np.all(np.isfinite(g)):
            raise DivergedError("diverged")
        if first is None:
            first = float(np.linalg.norm(g))
        w = w - learning_rate * g
    if not np.all(np.isfinite(w)) or not math.isfinite(client.task.loss(w, client.data)):
        raise DivergedError("diverged")
    client.grad_norm = first
    return client.params.with_values(w - client.params.values), first


def fedavg(models: Sequence[ModelParams], weights=None) -> ModelParams:
    """Weighted component-wise mean; weights are normalized."""
    if not models:
        raise ValueError("nothing to aggregate")
    _check_layouts(models)
    w = np.ones(len(models)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (len(models),) or np.any(w < 0) or not w.sum() > 0:
        raise ValueError("weights must be non-negative with a positive sum")
    p = w / w.sum()
    stacked = np.stack([m.values for m in models])
    return models[0].with_values(p @ stacked)


def noisy_aggregate(deltas: Sequence[ModelParams], weights, noise_sigma, rng_seed) -> ModelParams:
    """FedAvg of deltas after each is masked by i.i.d. Gaussian noise."""
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    if not deltas:
        raise ValueError("nothing to aggregate")
    rng = np.random.default_rng(rng_seed)
    noisy = [d.with_values(d.values + rng.standard_normal(d.values.shape) * noise_sigma)
             for d in deltas]
    return fedavg(noisy, weights)


# ------------------------------------------------------------ device selection


@dataclass
class SelectionResult:
    selected: list
    inclusion_probs: dict
    uniform_fallback: bool = False


def _sequential_draw(weights, k, rng):
    """Weighted draws without replacement; uniform over leftovers once mass runs out."""
    remaining = list(range(len(weights)))
    picked, fallback = [], False
    for _ in range(k):
        w = np.array([weights[i] for i in remaining], dtype=np.float64)
        total = w.sum()
        if total > 0:
            j = int(np.searchsorted(np.cumsum(w / total), rng.random(), side="right"))
            j = min(j, len(remaining) - 1)
            while w[j] == 0:  # guard against landing on a zero cell at the boundary
                j -= 1
        else:
            fallback = True
            j = int(rng.integers(len(remaining)))
        picked.append(remaining.pop(j))
    return picked, fallback


def inclusion_probabilities(weights, k) -> np.ndarray:
    """Exact inclusion probabilities of sequential proportional sampling (DP over subsets)."""
    w = np.asarray(weights, dtype=np.float64)
    n = len(w)
    if n > EXACT_INCLUSION_LIMIT:
        raise ValueError("too many clients for exact inclusion probabilities")
    prob = {0: 1.0}
    for _ in range(k):
        nxt: dict = {}
        for mask, p in prob.items():
            rest = [i for i in range(n) if not mask >> i & 1]
            mass = sum(w[i] for i in rest)
            for i in rest:
                q = w[i] / mass if mass > 0 else 1.0 / len(rest)
                if q > 0:
                    nxt[mask | 1 << i] = nxt.get(mask | 1 << i, 0.0) + p * q
        prob = nxt
    incl = np.zeros(n)
    for mask, p in prob.items():
        for i in range(n):
            if mask >> i & 1:
                incl[i] += p
    return incl


def select_devices(clients: Sequence[ClientState], k: int, rng_seed) -> SelectionResult:
    """Schedule ``k`` clients with per-draw probability proportional to gradient norm."""
    if not 1 <= k <= len(clients):
        raise ValueError("need 1 <= k <= number of clients")
    norms = [max(float(c.grad_norm), 0.0) for c in clients]
    all_zero = sum(norms) == 0
    rng = np.random.default_rng(rng_seed)
    weights = [1.0] * len(norms) if all_zero else norms
    picked, fallback = _sequential_draw(weights, k, rng)
    if len(clients) <= EXACT_INCLUSION_LIMIT:
        incl = inclusion_probabilities(weights, k)
    else:
        mc = np.random.default_rng(derive_seed(0, "inclusion", len(clients), k))
        counts = np.zeros(len(clients))
        for _ in range(4096):
            counts[_sequential_draw(weights, k, mc)[0]] += 1
        incl = counts / 4096
    ids = [clients[i].client_id for i in picked]
    return SelectionResult(ids, {c.client_id: float(p) for c, p in zip(clients, incl)},
                           all_zero or fallback)


# ------------------------------------------------------------------ freezing


def apply_freeze(delta: ModelParams, frozen_segments) -> tuple[ModelParams, Fraction]:
    """Zero frozen segments; return the masked delta and the transmitted fraction."""
    frozen = set(frozen_segments)
    unknown = frozen - set(delta.layout)
    if unknown:
        raise KeyError(f"unknown segments {sorted(unknown)}")
    if frozen and frozen == set(delta.layout):
        raise ValueError("nothing trainable")
    values = delta.values.copy()
    kept = 0
    for name, (start, stop) in delta.layout.items():
        if name in frozen:
            values[start:stop] = 0.0
        else:
            kept += stop - start
    return delta.with_values(values), Fraction(kept, delta.values.size)


# ----------------------------------------------------- output-level fusion


@dataclass
class FusedBox:
    center: tuple[float, float]
    uncertainty: float
    members: list  # (agent_id, object_id, weight)
    object_id: int


@dataclass
class FusedOutput:
    boxes: list[FusedBox] = field(default_factory=list)

    def centers(self):
        return np.array([b.center for b in self.boxes], dtype=np.float64).reshape(-1, 2)


def road_average_output(reports: Sequence[DetectionReport], gate=DEFAULT_GATE,
                        road_weight=1.0) -> FusedOutput:
    """Inverse-variance fusion of detections matched greedily across reports.

    Detections are visited in (agent_id, object_id) order, so the output does
    not depend on the order of ``reports``. Each joins the nearest open group
    (fused center within ``gate``, no detection yet from the same agent).
    ``road_weight`` >= 1 boosts the precision of road-sensor reports.
    """
    if not reports:
        raise ValueError("need at least one report")
    if road_weight < 1:
        raise ValueError("road_weight must be >= 1")
    dets = []
    for rep in reports:
        mult = road_weight if rep.source == "road" else 1.0
        for d in rep.detected:
            dets.append((rep.agent_id, d.object_id, d.center, d.uncertainty, mult))
    dets.sort(key=lambda t: (t[0], t[1], t[2]))

    groups: list[dict] = []
    for agent, oid, center, sigma, mult in dets:
        prec = mult / sigma**2
        best, best_d = None, None
        for g in groups:
            if agent in g["agents"]:
                continue
            dist = math.dist(center, g["center"])
            if dist <= gate and (best is None or (dist, g["label"]) < (best_d, best["label"])):
                best, best_d = g, dist
        if best is None:
            best = {"agents": set(), "members": [], "label": oid, "center": center}
            groups.append(best)
        best["agents"].add(agent)
        best["members"].append((agent, oid, center, prec))
        best["label"] = min(best["label"], oid)
        ptot = sum(m[3] for m in best["members"])
        best["center"] = (sum(m[3] * m[2][0] for m in best["members"]) / ptot,
                          sum(m[3] * m[2][1] for m in best["members"]) / ptot)

    out = FusedOutput()
    for g in sorted(groups, key=lambda g: (g["label"], g["center"])):
        ptot = sum(m[3] for m in g["members"])
        out.boxes.append(FusedBox(
            g["center"], ptot ** -0.5,
            [(a, o, p / ptot) for a, o, _, p in g["members"]], g["label"]))
    return out


# ------------------------------------------------------------- distillation


@dataclass
class DistillResult:
    params: ModelParams
    loss_before: float
    loss_after: float
    supervised: bool
    matches: list


def match_to_fused(pred_world: np.ndarray, fused: FusedOutput, object_ids=None, gate=DEFAULT_GATE):
    """Greedy one-to-one matching of predicted centers to fused boxes by distance."""
    centers = fused.centers()
    pairs = []
    for i, p in enumerate(pred_world):
        for j, c in enumerate(centers):
            d = math.dist(p, c)
            if d <= gate:
                oid = int(object_ids[i]) if object_ids is not None else i
                pairs.append((d, oid, fused.boxes[j].object_id, i, j))
    pairs.sort()
    used_i, used_j, matches = set(), set(), []
    for _d, _o, _l, i, j in pairs:
        if i in used_i or j in used_j:
            continue
        used_i.add(i)
        used_j.add(j)
        matches.append((i, j))
    return sorted(matches)


def match_frames(pred_world: np.ndarray, observation: Dataset, fused: FusedOutput, gate=DEFAULT_GATE):
    """``match_to_fused`` run separately on each frame (rows sharing a sensor origin)."""
    if observation.origin is None or len(observation) == 0:
        return match_to_fused(pred_world, fused, observation.object_ids, gate)
    origin = np.asarray(observation.origin, dtype=np.float64)
    _, frame = np.unique(origin, axis=0, return_inverse=True)
    frame = frame.reshape(-1)
    ids = observation.object_ids
    matches = []
    for f in range(int(frame.max()) + 1):
        rows = np.flatnonzero(frame == f)
        sub = match_to_fused(pred_world[rows], fused, None if ids is None else np.asarray(ids)[rows], gate)
        matches.extend((int(rows[i]), j) for i, j in sub)
    return sorted(matches)


class DistillLoss:
    """Uncertainty-weighted squared error between predicted and fused centers."""

    def __init__(self, task: BoxRegressionTask, observation: Dataset, fused: FusedOutput, matches):
        self.task = task
        idx = np.array([i for i, _ in matches], dtype=np.int64)
        self.rows = observation.subset(idx)
        fc = fused.centers()
        self.targets = np.array([fc[j] for _, j in matches], dtype=np.float64).reshape(-1, 2)
        prec = np.array([fused.boxes[j].uncertainty ** -2 for _, j in matches], dtype=np.float64)
        self.weights = prec / prec.sum() if len(prec) else prec

    def residual(self, w):
        pred = self.rows.origin + self.task.predict(w, self.rows)
        return pred - self.targets

    def __call__(self, w):
        r = self.residual(w)
        return float(np.sum(self.weights * np.sum(r * r, axis=1)))

    def grad(self, w):
        r = self.residual(w) * self.weights[:, None]
        return (2.0 * self.rows.features.T @ r).reshape(-1)


def distill_update(client: ClientState, observation: Dataset, fused: FusedOutput, steps: int,
                   learning_rate: float, gate=DEFAULT_GATE) -> DistillResult:
    """Pull the client's predicted boxes toward the fused road-average boxes.

    ``observation`` holds the client's current feature rows (with ``origin``
    set to the sensor position), possibly from several frames. Matching is
    one-to-one within each frame and fixed at the start.
    """
    if not fused.boxes:
        raise ValueError("fused output is empty")
    if not isinstance(client.task, BoxRegressionTask):
        raise TypeError("distillation needs the box regression learner")
    w = client.params.values.copy()
    pred = observation.origin + client.task.predict(w, observation) if len(observation) else np.zeros((0, 2))
    matches = match_frames(pred, observation, fused, gate)
    if not matches:
        return DistillResult(client.params.copy(), 0.0, 0.0, False, [])
    loss = DistillLoss(client.task, observation, fused, matches)
    before = loss(w)
    for _ in range(int(steps)):
        g = loss.grad(w)
        if not np.all(np.isfinite(g)):
            raise DivergedError("diverged")
        w = w - learning_rate * g
    return DistillResult(client.params.with_values(w), before, loss(w), True, matches)


# ---------------------------------------------------------- personalization


def personalize(global_params: ModelParams, client_deltas: Sequence[ModelParams], shared_segments,
                personal_segments, weights=None):
    """Aggregate shared segments across clients; keep personal segments local.

    Returns ``(per_client_models, shared_model)``.
    """
    shared, personal = set(shared_segments), set(personal_segments)
    if shared & personal:
        raise ValueError("shared and personal segments overlap")
    if shared | personal != set(global_params.layout):
        raise ValueError("shared and personal segments must cover the layout")
    locals_ = [global_params + d for d in client_deltas]
    avg = fedavg(locals_, weights)
    shared_vals = global_params.values.copy()
    per_client = []
    for m in locals_:
        v = m.values.copy()
        for name in shared:
            a, b = global_params.layout[name]
            v[a:b] = avg.values[a:b]
        per_client.append(m.with_values(v))
    for name in shared:
        a, b = global_params.layout[name]
        shared_vals[a:b] = avg.values[a:b]
    return per_client, global_params.with_values(shared_vals)


# --------------------------------------------------------------- transcripts

TRANSCRIPT_COLUMNS = ["round", "client_id", "loss", "grad_norm", "selected"]


def transcript_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=TRANSCRIPT_COLUMNS, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()
