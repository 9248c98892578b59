"""Synthetic driving scenarios, field-of-view occlusion and detection errors.

Geometry is planar. Traffic objects are discs, sensors see a circular wedge,
and an object is occluded when the segment from the sensor to its center
crosses another object's disc. Error items carry ``z = 0`` so they can be
treated as 3D positions downstream.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from .seeding import derive_seed

ODD_KINDS = ("urban", "rural", "campus", "parking_lot")
LAYOUTS = ("straight_road", "cross_road", "t_road", "roundabout")
OBJECT_CLASSES = ("car", "truck", "pedestrian")

CLASS_PROBS = (0.7, 0.15, 0.15)
CLASS_RADIUS = {"car": 1.2, "truck": 2.0, "pedestrian": 0.4}
VEHICLE_LANE_OFFSET = 1.75
PEDESTRIAN_OFFSET = 4.5
POLE_OFFSET = 6.0
POLE_SPACING = 25.0
MIN_ZONE_SIDE = 10.0
JUNCTION_HALF = 15.0
MIN_UNCERTAINTY = 1e-3
FP_AREA_UNIT = 100.0
TWO_PI = 2.0 * math.pi


class DegenerateZoneError(ValueError):
    pass


@dataclass(frozen=True)
class OddSpec:
    odd_kind: str = "urban"
    traffic_density: float = 0.0
    speed_limit: float = 13.9
    fov_requirement: float = 50.0

    def __post_init__(self):
        if self.odd_kind not in ODD_KINDS:
            raise ValueError(f"unknown odd_kind {self.odd_kind!r}")
        if not self.traffic_density >= 0:
            raise ValueError("traffic_density must be >= 0")
        if not self.fov_requirement > 0:
            raise ValueError("fov_requirement must be > 0")


@dataclass(frozen=True)
class ScenarioSpec:
    layout: str
    zone_limits: tuple[float, float, float, float]  # xmin, ymin, xmax, ymax
    odd: OddSpec = field(default_factory=OddSpec)
    seed: int = 0

    def __post_init__(self):
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown layout {self.layout!r}")
        xmin, ymin, xmax, ymax = self.zone_limits
        if not (xmax > xmin and ymax > ymin):
            raise ValueError("zone_limits must have positive area")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class TrafficObject:
    id: int
    center: tuple[float, float]
    footprint_radius: float
    object_class: str = "car"

    def __post_init__(self):
        if not self.footprint_radius > 0:
            raise ValueError("footprint_radius must be > 0")
        if self.object_class not in OBJECT_CLASSES:
            raise ValueError(f"unknown object_class {self.object_class!r}")


@dataclass(frozen=True)
class CandidateSite:
    site_id: int
    position: tuple[float, float]


@dataclass
class Scenario:
    lanes: list[list[tuple[float, float]]]
    objects: list[TrafficObject]
    candidate_sites: list[CandidateSite]
    zone_limits: tuple[float, float, float, float]
    layout: str = "straight_road"

    def object_by_id(self, object_id):
        for obj in self.objects:
            if obj.id == object_id:
                return obj
        raise KeyError(object_id)

    def lane_length(self):
        return sum(_polyline_length(lane) for lane in self.lanes)


@dataclass(frozen=True)
class SensorPose:
    position: tuple[float, float]
    yaw: float = 0.0
    fov_angle: float = TWO_PI
    range: float = 50.0

    def __post_init__(self):
        if not self.range > 0:
            raise ValueError("range must be > 0")
        if not 0 < self.fov_angle <= TWO_PI + 1e-12:
            raise ValueError("fov_angle must lie in (0, 2*pi]")

    @property
    def full_circle(self):
        return self.fov_angle >= TWO_PI - 1e-12

    def wedge_area(self):
        return 0.5 * min(self.fov_angle, TWO_PI) * self.range**2


@dataclass(frozen=True)
class DetectorQuality:
    miss_rate: float = 0.0
    fp_rate: float = 0.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if not 0 <= self.miss_rate <= 1:
            raise ValueError("miss_rate must lie in [0, 1]")
        if not 0 <= self.fp_rate <= 1:
            raise ValueError("fp_rate must lie in [0, 1]")
        if not self.noise_sigma >= 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass(frozen=True)
class Detection:
    object_id: int
    center: tuple[float, float]
    uncertainty: float


@dataclass
class DetectionReport:
    agent_id: int
    detected: list[Detection] = field(default_factory=list)
    misses: list[int] = field(default_factory=list)
    false_positives: list[tuple[float, float]] = field(default_factory=list)
    source: str = "cav"

    @property
    def clean(self):
        return not self.misses and not self.false_positives


@dataclass(frozen=True)
class ErrorItem:
    position: tuple[float, float, float]
    kind: str
    zone: str = ""

    def __post_init__(self):
        if self.kind not in ("miss", "false_positive"):
            raise ValueError(f"unknown error kind {self.kind!r}")
        if not all(math.isfinite(v) for v in self.position):
            raise ValueError("error positions must be finite")


@dataclass
class ErrorRegistry:
    items: list[ErrorItem] = field(default_factory=list)
    source_runs: int = 0

    def __len__(self):
        return len(self.items)

    def xy(self):
        """(n, 2) array of item positions projected on the ground plane."""
        if not self.items:
            return np.zeros((0, 2))
        return np.array([it.position[:2] for it in self.items], dtype=np.float64)


# ---------------------------------------------------------------- geometry


def _polyline_length(lane):
    pts = np.asarray(lane, dtype=np.float64)
    if len(pts) < 2:
        return 0.0
    return float(np.hypot(*np.diff(pts, axis=0).T).sum())


def _point_at(lane, s):
    """Point and unit tangent at arc length ``s`` along a polyline."""
    pts = np.asarray(lane, dtype=np.float64)
    seg = np.diff(pts, axis=0)
    lengths = np.hypot(seg[:, 0], seg[:, 1])
    for i, length in enumerate(lengths):
        if s <= length or i == len(lengths) - 1:
            frac = 0.0 if length == 0 else min(max(s / length, 0.0), 1.0)
            tangent = seg[i] / length if length > 0 else np.array([1.0, 0.0])
            return pts[i] + frac * seg[i], tangent
        s -= length
    raise ValueError("empty polyline")


def _layout_lanes(layout, zone):
    xmin, ymin, xmax, ymax = zone
    cx, cy = 0.5 * (xmin + xmax), 0.5 * (ymin + ymax)
    if layout == "straight_road":
        return [[(xmin, cy), (xmax, cy)]]
    if layout == "cross_road":
        return [[(xmin, cy), (xmax, cy)], [(cx, ymin), (cx, ymax)]]
    if layout == "t_road":
        return [[(xmin, cy), (xmax, cy)], [(cx, cy), (cx, ymax)]]
    radius = 0.2 * min(xmax - xmin, ymax - ymin)
    ring = [
        (cx + radius * math.cos(a), cy + radius * math.sin(a))
        for a in np.linspace(0.0, TWO_PI, 33)
    ]
    return [
        ring,
        [(xmin, cy), (cx - radius, cy)],
        [(cx + radius, cy), (xmax, cy)],
        [(cx, ymin), (cx, cy - radius)],
        [(cx, cy + radius), (cx, ymax)],
    ]


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def _inside(p, zone, margin=0.0):
    xmin, ymin, xmax, ymax = zone
    return xmin + margin <= p[0] <= xmax - margin and ymin + margin <= p[1] <= ymax - margin


def candidate_sites_along(lanes, zone, spacing=POLE_SPACING, offset=POLE_OFFSET):
    """Utility-pole sites every ``spacing`` m along each lane, alternating sides."""
    sites: list[CandidateSite] = []
    for lane in lanes:
        length = _polyline_length(lane)
        for k, s in enumerate(np.arange(0.0, length + 1e-9, spacing)):
            p, t = _point_at(lane, float(s))
            side = 1.0 if k % 2 == 0 else -1.0
            pole = p + side * offset * np.array([-t[1], t[0]])
            if not _inside(pole, zone):
                continue
            if any(math.dist(pole, q.position) < 1.0 for q in sites):
                continue
            sites.append(CandidateSite(len(sites), (float(pole[0]), float(pole[1]))))
    return sites


def generate_scenario(spec: ScenarioSpec) -> Scenario:
    """Sample a scenario from ``spec``; a pure function of its fields, seed included."""
    zone = tuple(float(v) for v in spec.zone_limits)
    xmin, ymin, xmax, ymax = zone
    if min(xmax - xmin, ymax - ymin) < MIN_ZONE_SIDE:
        raise DegenerateZoneError("degenerate zone")
    lanes = [[(float(x), float(y)) for x, y in lane] for lane in _layout_lanes(spec.layout, zone)]
    lengths = np.array([_polyline_length(lane) for lane in lanes])
    total = float(lengths.sum())
    n_objects = _round_half_up(spec.odd.traffic_density * total / 100.0)

    rng = np.random.default_rng(derive_seed(spec.seed, "scenario"))
    objects: list[TrafficObject] = []
    for oid in range(n_objects):
        cls = OBJECT_CLASSES[int(rng.choice(3, p=CLASS_PROBS))]
        radius = CLASS_RADIUS[cls]
        offset = PEDESTRIAN_OFFSET if cls == "pedestrian" else VEHICLE_LANE_OFFSET
        for _attempt in range(20):
            s = rng.uniform(0.0, total)
            lane_idx = int(np.searchsorted(np.cumsum(lengths), s, side="right"))
            lane_idx = min(lane_idx, len(lanes) - 1)
            s_local = s - float(lengths[:lane_idx].sum())
            p, t = _point_at(lanes[lane_idx], s_local)
            side = 1.0 if rng.random() < 0.5 else -1.0
            c = p + side * offset * np.array([-t[1], t[0]])
            c[0] = min(max(c[0], xmin + radius), xmax - radius)
            c[1] = min(max(c[1], ymin + radius), ymax - radius)
            if all(math.dist(c, o.center) >= radius + o.footprint_radius for o in objects):
                break
        objects.append(TrafficObject(oid, (float(c[0]), float(c[1])), radius, cls))

    return Scenario(lanes, objects, candidate_sites_along(lanes, zone), zone, spec.layout)


def lane_route(scenario, lane_index=0, spacing=10.0, fov_angle=math.pi / 2, sensor_range=40.0,
               reverse=False, lateral=-VEHICLE_LANE_OFFSET):
    """Ego poses every ``spacing`` m along a lane, driving on its right-hand side."""
    lane = scenario.lanes[lane_index]
    length = _polyline_length(lane)
    poses = []
    for s in np.arange(0.0, length + 1e-9, spacing):
        s = length - s if reverse else s
        p, t = _point_at(lane, float(s))
        if reverse:
            t = -t
        pos = p + lateral * np.array([-t[1], t[0]])
        poses.append(SensorPose((float(pos[0]), float(pos[1])), math.atan2(t[1], t[0]),
                                fov_angle, sensor_range))
    return poses


# -------------------------------------------------------------- visibility


def visibility_codes(sensor: SensorPose, objects: Sequence[TrafficObject]) -> np.ndarray:
    """Per-object code: 0 outside the wedge or range, 1 visible, 2 occluded."""
    if not objects:
        return np.zeros(0, dtype=np.int8)
    cx = np.array([o.center[0] for o in objects], dtype=np.float64)
    cy = np.array([o.center[1] for o in objects], dtype=np.float64)
    rad = np.array([o.footprint_radius for o in objects], dtype=np.float64)
    half = 0.5 * min(sensor.fov_angle, TWO_PI)
    return _kernels.wedge_visibility(
        float(sensor.position[0]), float(sensor.position[1]),
        math.cos(sensor.yaw), math.sin(sensor.yaw), math.cos(half),
        sensor.full_circle, float(sensor.range) ** 2, cx, cy, rad,
    )


def visible_objects(sensor: SensorPose, scenario: Scenario) -> set[int]:
    codes = visibility_codes(sensor, scenario.objects)
    return {o.id for o, c in zip(scenario.objects, codes) if c == 1}


def occluded_objects(sensor: SensorPose, scenario: Scenario) -> set[int]:
    """In-range, in-wedge objects hidden behind another footprint."""
    codes = visibility_codes(sensor, scenario.objects)
    return {o.id for o, c in zip(scenario.objects, codes) if c == 2}


def in_wedge(sensor: SensorPose, point) -> bool:
    dx = point[0] - sensor.position[0]
    dy = point[1] - sensor.position[1]
    d2 = dx * dx + dy * dy
    if d2 > sensor.range**2 * (1 + 1e-12):
        return False
    if sensor.full_circle or d2 == 0:
        return True
    half = 0.5 * sensor.fov_angle
    return dx * math.cos(sensor.yaw) + dy * math.sin(sensor.yaw) >= math.sqrt(d2) * math.cos(half) - 1e-9


def zone_of(point, scenario: Scenario) -> str:
    """Layout zone label used to tag registered errors."""
    if scenario.layout == "straight_road":
        return "road"
    xmin, ymin, xmax, ymax = scenario.zone_limits
    cx, cy = 0.5 * (xmin + xmax), 0.5 * (ymin + ymax)
    half = JUNCTION_HALF
    if scenario.layout == "roundabout":
        half += 0.2 * min(xmax - xmin, ymax - ymin)
    if max(abs(point[0] - cx), abs(point[1] - cy)) <= half:
        return "junction"
    return "arm"


# -------------------------------------------------------------- detections


def simulate_detections(agent_sensor: SensorPose, scenario: Scenario, quality: DetectorQuality,
                        rng_seed, agent_id=0, source="cav") -> DetectionReport:
    """One frame of detector output for an agent.

    Visible objects are missed with probability ``miss_rate`` and otherwise
    reported with isotropic Gaussian center noise. Occluded in-wedge objects
    are always missed. False positives follow a Poisson law whose mean is
    ``fp_rate`` times the wedge area in units of 100 m^2.
    """
    rng = np.random.default_rng(rng_seed)
    codes = visibility_codes(agent_sensor, scenario.objects)
    report = DetectionReport(agent_id, source=source)
    sigma = quality.noise_sigma
    for obj, code in zip(scenario.objects, codes):
        if code == 0:
            continue
        if code == 2:
            report.misses.append(obj.id)
            continue
        u = rng.random()
        noise = rng.standard_normal(2) * sigma
        if u < quality.miss_rate:
            report.misses.append(obj.id)
        else:
            center = (obj.center[0] + float(noise[0]), obj.center[1] + float(noise[1]))
            report.detected.append(Detection(obj.id, center, max(sigma, MIN_UNCERTAINTY)))

    lam = quality.fp_rate * agent_sensor.wedge_area() / FP_AREA_UNIT
    n_fp = int(rng.poisson(lam)) if lam > 0 else 0
    sx, sy = agent_sensor.position
    for _ in range(n_fp):
        radius = agent_sensor.range * math.sqrt(rng.random())
        if agent_sensor.full_circle:
            ang = TWO_PI * rng.random()
        else:
            ang = agent_sensor.yaw + (rng.random() - 0.5) * agent_sensor.fov_angle
        report.false_positives.append((sx + radius * math.cos(ang), sy + radius * math.sin(ang)))
    return report


def collect_error_registry(scenario: Scenario, cav_routes: Sequence[Sequence[SensorPose]],
                           quality: DetectorQuality, episodes: int, rng_seed) -> ErrorRegistry:
    """Drive every route ``episodes`` times and register each miss and false positive."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    if not cav_routes or not any(len(r) for r in cav_routes):
        raise ValueError("no CAV trace")
    centers = {o.id: o.center for o in scenario.objects}
    items: list[ErrorItem] = []
    for ep in range(episodes):
        for ri, route in enumerate(cav_routes):
            for pi, pose in enumerate(route):
                seed = derive_seed(rng_seed, "episode", ep, "route", ri, "pose", pi)
                rep = simulate_detections(pose, scenario, quality, seed, agent_id=ri)
                for oid in rep.misses:
                    x, y = centers[oid]
                    items.append(ErrorItem((x, y, 0.0), "miss", zone_of((x, y), scenario)))
                for x, y in rep.false_positives:
                    items.append(ErrorItem((x, y, 0.0), "false_positive", zone_of((x, y), scenario)))
    return ErrorRegistry(items, episodes)


# ------------------------------------------------------------------- JSON


def _xy(p):
    return [float(p[0]), float(p[1])]


def scenario_to_dict(scenario: Scenario) -> dict:
    return {
        "layout": scenario.layout,
        "zone_limits": [float(v) for v in scenario.zone_limits],
        "lanes": [[_xy(p) for p in lane] for lane in scenario.lanes],
        "objects": [
            {"id": o.id, "center": _xy(o.center), "footprint_radius": o.footprint_radius,
             "object_class": o.object_class}
            for o in scenario.objects
        ],
        "candidate_sites": [
            {"site_id": s.site_id, "position": _xy(s.position)} for s in scenario.candidate_sites
        ],
    }


def scenario_from_dict(d: dict) -> Scenario:
    return Scenario(
        lanes=[[tuple(p) for p in lane] for lane in d["lanes"]],
        objects=[
            TrafficObject(int(o["id"]), tuple(o["center"]), float(o["footprint_radius"]),
                          o.get("object_class", "car"))
            for o in d["objects"]
        ],
        candidate_sites=[CandidateSite(int(s["site_id"]), tuple(s["position"]))
                         for s in d["candidate_sites"]],
        zone_limits=tuple(d["zone_limits"]),
        layout=d.get("layout", "straight_road"),
    )


def registry_to_dict(reg: ErrorRegistry) -> dict:
    return {
        "source_runs": reg.source_runs,
        "items": [
            {"position": [float(v) for v in it.position], "kind": it.kind, "zone": it.zone}
            for it in reg.items
        ],
    }


def registry_from_dict(d: dict) -> ErrorRegistry:
    return ErrorRegistry(
        [ErrorItem(tuple(float(v) for v in it["position"]), it["kind"], it.get("zone", ""))
         for it in d["items"]],
        int(d.get("source_runs", 0)),
    )


def pose_to_dict(p: SensorPose) -> dict:
    return {"position": _xy(p.position), "yaw": p.yaw, "fov_angle": p.fov_angle, "range": p.range}


def pose_from_dict(d: dict) -> SensorPose:
    return SensorPose(tuple(d["position"]), float(d.get("yaw", 0.0)),
                      float(d.get("fov_angle", TWO_PI)), float(d.get("range", 50.0)))
