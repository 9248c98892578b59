"""Run configuration: JSON schema, loading, and assembly into runnable objects."""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from .mlgra import TaskSpec, VehicleLink, allocate, build_graph, default_cards, equal_allocation, plan_from_dict
from .netmodel import STAGES, EdgeNode, NetworkTopology, ResourceBudget, VehicleNode
from .pipeline import FlFlags, PipelineConfig, TrainSettings, config_hash, freeze_scaled_cards
from .predictor import PowerLawPredictor, fit, read_calibration_csv
from .vrcsp import SensorTier, baseline_density_placement, place_sensors, tier_from_dict
from .world import (TWO_PI, DetectorQuality, OddSpec, ScenarioSpec, SensorPose, collect_error_registry,
                    generate_scenario, lane_route, scenario_from_dict)

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_INT = {"type": "integer", "minimum": 0}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


_QUALITY = _obj({"miss_rate": _NONNEG, "fp_rate": _NONNEG, "noise_sigma": _NONNEG})
_PREDICTOR = {"oneOf": [
    _obj({"a": _NUM, "b": _POS, "c": _POS, "floor": _NUM}, ["a", "b", "c"]),
    _obj({"calibration": {"type": "string"}, "floor": _NUM}, ["calibration"]),
]}

SCHEMA = _obj({
    "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
    "scenario": {"oneOf": [
        _obj({"preset": {"enum": ["demo_cross_road"]}}, ["preset"]),
        _obj({"file": {"type": "string"}}, ["file"]),
        _obj({"layout": {"enum": ["straight_road", "cross_road", "t_road", "roundabout"]},
              "zone_limits": {"type": "array", "items": _NUM, "minItems": 4, "maxItems": 4},
              "odd": _obj({"odd_kind": {"enum": ["urban", "rural", "campus", "parking_lot"]},
                           "traffic_density": _NONNEG, "speed_limit": _NONNEG, "fov_requirement": _POS}),
              "seed": _INT}, ["layout", "zone_limits"]),
    ]},
    "topology": _obj({"edges": {"type": "integer", "minimum": 1}, "vehicles_per_edge": _INT,
                      "throughput_mb": _POS}, ["edges", "vehicles_per_edge"]),
    "budget": _obj({"wireless_mb": _NONNEG, "wireline_mb": _NONNEG}, ["wireless_mb", "wireline_mb"]),
    "group_size": {"type": "integer", "minimum": 1},
    "similarity_threshold": {"type": "number", "minimum": 0, "maximum": 1},
    "tasks": {"type": "array", "minItems": 1, "items": _obj({
        "name": {"type": "string"}, "modality": {"type": "string"},
        "tags": {"type": "array", "items": {"type": "string"}}, "weight": _NONNEG,
        "learner": {"enum": ["regression", "classification"]},
        "sample_size_mb": _POS, "dnn_size_mb": _POS, "ceiling": _NUM,
        "predictors": _obj({"I": _PREDICTOR, "II": _PREDICTOR, "III": _PREDICTOR}, ["I"]),
        "profile": {"type": "object"},
    }, ["name", "modality", "learner", "sample_size_mb", "dnn_size_mb", "predictors"])},
    "allocation": _obj({"mode": {"enum": ["optimize", "equal", "manual"]},
                        "stages": {"type": "array", "items": {"enum": list(STAGES)}},
                        "manual": {"type": "array", "items": _obj({
                            "dnn": {"type": "string"}, "stage": {"enum": list(STAGES)}, "units": _INT},
                            ["dnn", "stage", "units"])}}),
    "fl": _obj({"device_selection": {"type": "boolean"}, "noisy_sigma": _NONNEG,
                "freeze_segments": {"type": "array", "items": {"type": "string"}},
                "personalization": {"type": "boolean"}, "distillation": {"type": "boolean"},
                "road_weight": {"type": "number", "minimum": 1},
                "stage1_epochs": _INT, "learning_rate": _POS, "local_epochs": {"type": "integer", "minimum": 1},
                "stage3_local_epochs": _INT, "distill_steps": _INT, "distill_learning_rate": _POS,
                "distill_gate": _POS, "poses_per_vehicle": {"type": "integer", "minimum": 1},
                "samples_per_vehicle": _INT, "test_occluded": _INT,
                "test_samples": {"type": "integer", "minimum": 1},
                "personal_segments": {"type": "array", "items": {"type": "string"}}}),
    "sensors": _obj({"tiers": {"type": "array", "minItems": 1, "items": _obj(
                         {"name": {"type": "string"}, "cost": _POS, "range": _POS}, ["name", "cost", "range"])},
                     "cost_budget": _NONNEG, "episodes": {"type": "integer", "minimum": 1},
                     "route_spacing": _POS, "placement": {"enum": ["vrcsp", "density", "none"]},
                     "cav_quality": _QUALITY, "road_quality": _QUALITY}),
    "calibration": _obj({"samples": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                         "rounds": {"type": "array", "items": _INT}}),
}, ["seed", "scenario", "topology", "budget", "tasks"])


class ConfigSchemaError(ValueError):
    pass


def validate(cfg: dict):
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigSchemaError(f"config error at {where}: {exc.message}") from None


def load(path) -> tuple[dict, Path]:
    path = Path(path)
    with open(path) as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigSchemaError(f"config is not valid JSON: {exc}") from None
    validate(cfg)
    return cfg, path.parent


def hash_of(cfg: dict) -> str:
    return config_hash(cfg)


def resolve(base: Path, name: str) -> Path:
    if name.startswith("pkg:"):
        from importlib import resources
        return Path(str(resources.files("vecfl").joinpath("data", name[4:])))
    p = Path(name)
    return p if p.is_absolute() else base / p


# ------------------------------------------------------------------ assembly


def build_scenario(cfg, base):
    sc = cfg["scenario"]
    if "preset" in sc:
        from .demo import demo_scenario
        return demo_scenario()
    if "file" in sc:
        with open(resolve(base, sc["file"])) as fh:
            return scenario_from_dict(json.load(fh))
    odd = OddSpec(**sc.get("odd", {}))
    return generate_scenario(ScenarioSpec(sc["layout"], tuple(sc["zone_limits"]), odd, sc.get("seed", cfg["seed"])))


def build_topology(cfg):
    t = cfg["topology"]
    thr = t.get("throughput_mb", math.inf)
    edges = [EdgeNode(i) for i in range(t["edges"])]
    vehicles = [VehicleNode(e * t["vehicles_per_edge"] + k, e, 1.0, thr)
                for e in range(t["edges"]) for k in range(t["vehicles_per_edge"])]
    return NetworkTopology(vehicles, edges)


def _predictor(d, base, kind):
    if "calibration" in d:
        pred, _ = fit(read_calibration_csv(resolve(base, d["calibration"])), kind)
        return PowerLawPredictor(pred.a, pred.b, pred.c, kind, float(d.get("floor", 0.0)))
    return PowerLawPredictor(float(d["a"]), float(d["b"]), float(d["c"]), kind, float(d.get("floor", 0.0)))


def build_tasks(cfg, base):
    out = []
    for t in cfg["tasks"]:
        preds = {s: _predictor(p, base, "samples" if s == "I" else "rounds") for s, p in t["predictors"].items()}
        out.append(TaskSpec(t["name"], t["modality"], frozenset(t.get("tags", [])), float(t.get("weight", 1.0)),
                            preds, float(t["sample_size_mb"]), float(t["dnn_size_mb"]), t["learner"],
                            float(t.get("ceiling", 100.0)), dict(t.get("profile", {}))))
    return out


def fl_settings(cfg):
    fl = dict(cfg.get("fl", {}))
    flag_keys = ("device_selection", "noisy_sigma", "freeze_segments", "personalization", "distillation",
                 "road_weight")
    flags = FlFlags(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in fl.items() if k in flag_keys})
    train = TrainSettings(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in fl.items()
                             if k not in flag_keys})
    return flags, train


def tiers_of(cfg):
    s = cfg.get("sensors", {})
    return [tier_from_dict(t) for t in s.get("tiers", [{"name": "lidar16", "cost": 1.0, "range": 20.0}])]


def quality(cfg, key, default):
    q = cfg.get("sensors", {}).get(key)
    return DetectorQuality(**q) if q else default


def cav_routes(scenario, spacing=5.0):
    return [lane_route(scenario, i, spacing=spacing, reverse=r) for i in range(len(scenario.lanes))
            for r in (False, True)]


@dataclass
class Run:
    cfg: dict
    base: Path
    scenario: object
    topology: NetworkTopology
    tasks: list
    graph: object
    cards: dict
    budget: ResourceBudget
    flags: FlFlags
    train: TrainSettings
    extras: dict = field(default_factory=dict)

    @property
    def seed(self):
        return int(self.cfg["seed"])

    @property
    def hash(self):
        return hash_of(self.cfg)

    def plan(self, mode=None, stages=None, plan_dict=None):
        alloc = self.cfg.get("allocation", {})
        mode = mode or alloc.get("mode", "optimize")
        stages = tuple(stages or alloc.get("stages", STAGES))
        if plan_dict is not None:
            return plan_from_dict(plan_dict, self.graph, self.cards)
        if mode == "manual":
            rows = [{"dnn": r["dnn"], "stage": r["stage"], "units": r["units"]} for r in alloc.get("manual", [])]
            for r in rows:
                if r["dnn"] not in self.graph.dnns:
                    raise ConfigSchemaError(f"config error at allocation/manual: unknown dnn {r['dnn']!r}")
            return plan_from_dict({"rows": rows, "mode": "manual"}, self.graph, self.cards)
        planner = allocate if mode == "optimize" else equal_allocation
        return planner(self.graph, self.budget, self.cards, stages)

    def registry(self):
        s = self.cfg.get("sensors", {})
        routes = cav_routes(self.scenario, s.get("route_spacing", 5.0))
        from .seeding import derive_seed
        return collect_error_registry(self.scenario, routes, quality(self.cfg, "cav_quality", DetectorQuality(0, 0, 0.3)),
                                      s.get("episodes", 1), derive_seed(self.seed, "registry"))

    def placement(self, method=None, registry=None):
        s = self.cfg.get("sensors", {})
        method = method or s.get("placement", "vrcsp")
        budget = s.get("cost_budget", 1.0)
        if method == "none":
            return None
        if method == "density":
            return baseline_density_placement(self.scenario, self.scenario.candidate_sites, tiers_of(self.cfg), budget)
        return place_sensors(registry if registry is not None else self.registry(), self.scenario.candidate_sites,
                             tiers_of(self.cfg), budget)

    def road_poses(self, placement):
        if placement is None:
            return []
        ranges = {t.name: t.range for t in tiers_of(self.cfg)}
        return [SensorPose(tuple(placement.positions[s]), 0.0, TWO_PI, ranges[t]) for s, t in placement.sensors]

    def pipeline_config(self, plan, flags=None, placement=None) -> PipelineConfig:
        flags = flags or self.flags
        return PipelineConfig(self.tasks, self.graph, plan, self.cards, self.budget, self.topology, self.scenario,
                              flags, self.train, self.seed, self.road_poses(placement),
                              quality(self.cfg, "cav_quality", DetectorQuality(0.0, 0.0, 0.3)),
                              quality(self.cfg, "road_quality", DetectorQuality(0.0, 0.0, 0.1)))


def assemble(cfg: dict, base=Path(".")) -> Run:
    validate(cfg)
    cfg = copy.deepcopy(cfg)
    scenario = build_scenario(cfg, base)
    topology = build_topology(cfg)
    tasks = build_tasks(cfg, base)
    links = {}
    for t in tasks:
        links.setdefault(t.modality, [VehicleLink(v.id, v.throughput_mb, v.data_quality) for v in topology.vehicles])
    try:
        graph = build_graph(tasks, cfg.get("similarity_threshold", 1.0), links)
    except ValueError as exc:
        raise ConfigSchemaError(f"config error at tasks: {exc}") from None
    flags, train = fl_settings(cfg)
    cards = default_cards(graph, cfg.get("group_size", 4), len(topology.edges))
    cards = freeze_scaled_cards(graph, cards, flags.freeze_segments)
    budget = ResourceBudget(cfg["budget"]["wireless_mb"], cfg["budget"]["wireline_mb"])
    return Run(cfg, Path(base), scenario, topology, tasks, graph, cards, budget, flags, train)
