"""Road-sensor placement by error coverage, and the visibility baseline.

A road sensor suite at candidate site ``x`` with tier range ``r`` covers the
registered false detections inside the closed disc ``|e - x| <= r`` (ground
plane projection). Placement is budgeted max-coverage over (site, tier)
pairs: at most one tier per site, total tier cost within the budget.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from .world import CandidateSite, ErrorRegistry, Scenario, SensorPose, TWO_PI, visibility_codes

__all__ = ["CandidateSite", "SensorTier", "Placement", "coverage", "place_sensors",
           "baseline_density_placement", "exact_placement", "pose_dissimilarity",
           "placement_to_dict", "OracleLimitError"]

ORACLE_LIMIT = 20


class OracleLimitError(ValueError):
    pass


@dataclass(frozen=True)
class SensorTier:
    name: str
    cost: float
    range: float

    def __post_init__(self):
        if not (self.cost > 0 and self.range > 0):
            raise ValueError("tier cost and range must be > 0")


@dataclass
class Placement:
    sensors: list = field(default_factory=list)  # (site_id, tier name)
    total_cost: float = 0.0
    covered: int = 0
    positions: dict = field(default_factory=dict)  # site_id -> (x, y)
    tier_costs: dict = field(default_factory=dict)  # tier name -> cost

    @property
    def site_ids(self):
        return [s for s, _ in self.sensors]


def _check_tiers(tiers):
    tiers = sorted(tiers, key=lambda t: (t.cost, t.range))
    if not tiers:
        raise ValueError("need at least one sensor tier")
    for lo, hi in zip(tiers, tiers[1:]):
        if not (hi.cost > lo.cost and hi.range > lo.range):
            raise ValueError("tier range must be strictly increasing in cost")
    return tiers


def _check_sites(candidates):
    cands = sorted(candidates, key=lambda c: c.site_id)
    ids = [c.site_id for c in cands]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate site ids")
    if len({tuple(c.position) for c in cands}) != len(cands):
        raise ValueError("candidate positions must be distinct")
    for c in cands:
        if not all(math.isfinite(v) for v in c.position):
            raise ValueError("candidate positions must be finite")
    return cands


def coverage(position, r, registry: ErrorRegistry) -> int:
    """Errors in the closed disc of radius ``r`` around ``position``."""
    if r < 0:
        raise ValueError("r must be >= 0")
    xy = registry.xy() if isinstance(registry, ErrorRegistry) else np.asarray(registry, dtype=np.float64)
    if len(xy) == 0:
        return 0
    xy = np.asarray(xy, dtype=np.float64)[:, :2]
    out = _kernels.count_within(np.array([float(position[0])]), np.array([float(position[1])]),
                                np.array([float(r) * float(r)]), np.ascontiguousarray(xy[:, 0]),
                                np.ascontiguousarray(xy[:, 1]))
    return int(out[0])


def _pairs(cands, tiers):
    """(site, tier) pairs ordered by site id then cost, which fixes the tie-break."""
    return [(c, t) for c in cands for t in tiers]


def _placement(pairs, chosen, cover, weight):
    mask = np.zeros(cover.shape[1], dtype=bool)
    for i in chosen:
        mask |= cover[i].astype(bool)
    sel = sorted((pairs[i] for i in chosen), key=lambda p: p[0].site_id)
    return Placement([(c.site_id, t.name) for c, t in sel], float(sum(t.cost for _, t in sel)),
                     int(weight[mask].sum()), {c.site_id: tuple(c.position) for c, _ in sel},
                     {t.name: t.cost for _, t in sel})


def _greedy(cover, weight, pairs, cands, budget):
    cost = np.array([t.cost for _, t in pairs], dtype=np.float64)
    group = np.array([i // (len(pairs) // len(cands)) for i in range(len(pairs))], dtype=np.int64)
    runs = [_kernels.greedy_cover(cover, weight, cost, group, float(budget), by_ratio)
            for by_ratio in (True, False)]
    best = None
    for chosen in runs:
        p = _placement(pairs, [int(i) for i in chosen], cover, weight)
        if best is None or p.covered > best.covered or (p.covered == best.covered and
                                                        p.total_cost < best.total_cost):
            best = p
    if not best.sensors:
        # nothing adds coverage: place the first site at the cheapest tier if affordable
        if pairs and pairs[0][1].cost <= budget + 1e-9:
            best = _placement(pairs, [0], cover, weight)
    return best


def _cover_from_points(cands, tiers, xy):
    pairs = _pairs(cands, tiers)
    px = np.array([c.position[0] for c, _ in pairs], dtype=np.float64)
    py = np.array([c.position[1] for c, _ in pairs], dtype=np.float64)
    r2 = np.array([t.range * t.range for _, t in pairs], dtype=np.float64)
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    cover = _kernels.cover_matrix(px, py, r2, np.ascontiguousarray(xy[:, 0]), np.ascontiguousarray(xy[:, 1]))
    return pairs, np.asarray(cover, dtype=np.uint8)


def place_sensors(registry: ErrorRegistry, candidates: Sequence[CandidateSite],
                  tiers: Sequence[SensorTier], cost_budget) -> Placement:
    """Budgeted greedy max-coverage of registered errors.

    Runs the gain-per-cost greedy and the raw-gain greedy and keeps the
    placement with more coverage (cheaper on ties).
    """
    cands, tiers = _check_sites(candidates), _check_tiers(tiers)
    if not cands or cost_budget < tiers[0].cost:
        return Placement()
    pairs, cover = _cover_from_points(cands, tiers, registry.xy())
    return _greedy(cover, np.ones(cover.shape[1], dtype=np.int64), pairs, cands, cost_budget)


def _sightings(scenarios, cands, tiers):
    """Cover matrix over (frame, object) sightings from a 360-degree suite."""
    pairs = _pairs(cands, tiers)
    cols = []
    for sc in scenarios:
        block = np.zeros((len(pairs), len(sc.objects)), dtype=np.uint8)
        for i, (c, t) in enumerate(pairs):
            pose = SensorPose(tuple(c.position), 0.0, TWO_PI, t.range)
            block[i] = visibility_codes(pose, sc.objects) == 1
        cols.append(block)
    cover = np.concatenate(cols, axis=1) if cols else np.zeros((len(pairs), 0), dtype=np.uint8)
    return pairs, cover


def baseline_density_placement(scenario, candidates, tiers, cost_budget) -> Placement:
    """Place sensors to see as many objects as possible (conventional baseline).

    ``scenario`` may be one ``Scenario`` or a sequence of frames; each visible
    object in each frame counts once.
    """
    frames = [scenario] if isinstance(scenario, Scenario) else list(scenario)
    cands, tiers = _check_sites(candidates), _check_tiers(tiers)
    if not cands or cost_budget < tiers[0].cost:
        return Placement()
    pairs, cover = _sightings(frames, cands, tiers)
    return _greedy(cover, np.ones(cover.shape[1], dtype=np.int64), pairs, cands, cost_budget)


def exact_placement(registry: ErrorRegistry, candidates, tiers, cost_budget) -> Placement:
    """Exhaustive optimum (oracle). Ties go to lower cost, then to the first found."""
    cands, tiers = _check_sites(candidates), _check_tiers(tiers)
    if len(cands) * len(tiers) > ORACLE_LIMIT:
        raise OracleLimitError("oracle limit")
    if not cands or cost_budget < tiers[0].cost:
        return Placement()
    pairs, cover = _cover_from_points(cands, tiers, registry.xy())
    masks = [int("".join("1" if b else "0" for b in row[::-1]) or "0", 2) for row in cover]
    nt = len(tiers)
    best = (0, 0.0, [])

    def rec(site, mask, spent, chosen):
        nonlocal best
        if site == len(cands):
            cnt = bin(mask).count("1")
            if cnt > best[0] or (cnt == best[0] and spent < best[1] - 1e-12):
                best = (cnt, spent, list(chosen))
            return
        rec(site + 1, mask, spent, chosen)
        for k in range(nt):
            i = site * nt + k
            c = pairs[i][1].cost
            if spent + c <= cost_budget + 1e-9:
                chosen.append(i)
                rec(site + 1, mask | masks[i], spent + c, chosen)
                chosen.pop()

    rec(0, 0, 0.0, [])
    return _placement(pairs, best[2], cover, np.ones(cover.shape[1], dtype=np.int64))


def pose_dissimilarity(placement: Placement, registry: ErrorRegistry, cav_poses, tiers) -> float | None:
    """Mean ``1 - cos`` of the angle between road and CAV viewing rays at covered errors.

    Each covered error is paired with the nearest placed sensor that covers it
    and the nearest CAV pose. Returns ``None`` when nothing is covered.
    """
    rng_of = {t.name: t.range for t in tiers}
    cav = np.array([p.position for p in cav_poses], dtype=np.float64).reshape(-1, 2)
    if not placement.sensors or len(cav) == 0:
        return None
    vals = []
    for e in registry.xy():
        best = None
        for sid, tier in placement.sensors:
            s = np.asarray(placement.positions[sid], dtype=np.float64)
            d = float(np.hypot(*(e - s)))
            if d <= rng_of[tier] and (best is None or d < best[0]):
                best = (d, s)
        if best is None:
            continue
        c = cav[int(np.argmin(np.hypot(*(cav - e).T)))]
        u, v = e - best[1], e - c
        nu, nv = float(np.hypot(*u)), float(np.hypot(*v))
        if nu == 0 or nv == 0:
            vals.append(0.0)
            continue
        vals.append(1.0 - float(u @ v) / (nu * nv))
    return float(np.mean(vals)) if vals else None


def placement_to_dict(placement: Placement, registry: ErrorRegistry | None, cost_budget) -> dict:
    total = len(registry) if registry is not None else 0
    return {
        "sensors": [{"site_id": int(s), "tier": t,
                     "position": [float(v) for v in placement.positions[s]],
                     "cost": float(placement.tier_costs[t])} for s, t in placement.sensors],
        "summary": {"covered": int(placement.covered), "total_errors": int(total),
                    "budget": float(cost_budget), "budget_used": float(placement.total_cost)},
    }


def placement_from_dict(d: dict) -> Placement:
    sensors = [(int(s["site_id"]), s["tier"]) for s in d["sensors"]]
    return Placement(sensors, float(d["summary"]["budget_used"]), int(d["summary"]["covered"]),
                     {int(s["site_id"]): tuple(s["position"]) for s in d["sensors"]},
                     {s["tier"]: float(s["cost"]) for s in d["sensors"]})


def tier_from_dict(d) -> SensorTier:
    return SensorTier(str(d["name"]), float(d["cost"]), float(d["range"]))

