"""Three-stage training flow: cloud pretraining, edge FL, cloud FL.

Every DNN in the allocation plan is backed by one surrogate learner. Data
come from two kinds of region: the cloud's annotated pool (stage I) and the
edge regions where vehicles drive (stages II and III, and the test sets).
All traffic is metered on a ``UsageLedger`` capped by the plan's implied
allocation, so a run either spends exactly what was planned or raises.

Per-round order in both FL stages: select -> local_update -> freeze ->
(noisy) aggregate -> distill. Distillation offsets are computed after
aggregation and ride along with the vehicle's next parameter upload, so they
cost no extra traffic; offsets computed in the last round are dropped.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from .fedcore import (ClientState, ModelParams, apply_freeze, distill_update, fedavg, gradient_norm,
                      local_update, noisy_aggregate, road_average_output, select_devices)
from .learners import (BoxProfile, BoxRegressionTask, ClassificationTask, ClassProfile, Dataset,
                       box_observations, class_dataset, empty_box_dataset, train_centralized)
from .mlgra import AllocationPlan, MultiLayerGraph, TaskSpec, allocate, build_graph, equal_allocation
from .netmodel import (STAGES, EdgeNode, NetworkTopology, ResourceBudget, UsageLedger, VehicleNode,
                       exact, stage_capacity, validate_allocation)
from .seeding import derive_seed
from .world import (DetectionReport, DetectorQuality, ErrorItem, Scenario, SensorPose, lane_route,
                    simulate_detections, zone_of)

CLOUD_POOL_BLOCK = 4096
METRIC_COLUMNS = ["stage", "task", "metric_before", "metric_after", "mb_wireless", "mb_wireline"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FlFlags:
    device_selection: bool = False
    noisy_sigma: float = 0.0
    freeze_segments: tuple = ()
    personalization: bool = False
    distillation: bool = False
    road_weight: float = 1.0


@dataclass(frozen=True)
class TrainSettings:
    stage1_epochs: int = 150
    learning_rate: float = 0.2
    local_epochs: int = 1
    stage3_local_epochs: int = 1
    distill_steps: int = 5
    distill_learning_rate: float = 0.05
    distill_gate: float = 3.0
    poses_per_vehicle: int = 8
    samples_per_vehicle: int = 40
    test_samples: int = 600
    test_occluded: int = 60
    personal_segments: tuple = ("head",)


@dataclass
class PipelineConfig:
    tasks: list
    graph: MultiLayerGraph
    plan: AllocationPlan
    cards: dict
    budget: ResourceBudget
    topology: NetworkTopology
    scenario: Scenario
    flags: FlFlags = field(default_factory=FlFlags)
    train: TrainSettings = field(default_factory=TrainSettings)
    seed: int = 0
    road_sensors: list = field(default_factory=list)  # SensorPose per placed suite
    cav_quality: DetectorQuality = field(default_factory=lambda: DetectorQuality(0.0, 0.0, 0.3))
    road_quality: DetectorQuality = field(default_factory=lambda: DetectorQuality(0.0, 0.0, 0.1))

    def check(self):
        res = validate_allocation(self.plan.allocation, self.budget)
        if not res.ok:
            raise ConfigError(f"plan exceeds budget: {res.violations}")
        if self.flags.distillation and not self.road_sensors:
            raise ConfigError("distillation requires placed road sensors")
        if self.flags.noisy_sigma < 0:
            raise ConfigError("noisy_sigma must be >= 0")
        if self.flags.road_weight < 1:
            raise ConfigError("road_weight must be >= 1")
        for d in self.graph.dnns:
            if d not in self.cards:
                raise ConfigError(f"no cost card for {d}")
            if self.cards[d].num_edges != len(self.topology.edges):
                raise ConfigError(f"cost card for {d} assumes {self.cards[d].num_edges} edges")


@dataclass
class StageReport:
    stage: str
    units: dict
    metric_before: dict
    metric_after: dict
    ledger: dict
    mb: dict
    warnings: list = field(default_factory=list)


@dataclass
class FlRequest:
    requester: int
    error: ErrorItem | None
    edge_id: int
    group: list


@dataclass
class PipelineResult:
    reports: list
    deployed: dict  # dnn -> {edge_id: ModelParams}
    task_metrics: dict
    weighted_metric: float
    ledger: UsageLedger
    requests: dict = field(default_factory=dict)  # edge_id -> FlRequest | None
    edge_models: dict = field(default_factory=dict)
    pretrained: dict = field(default_factory=dict)


# ------------------------------------------------------------------ world data


def _per_edge(value, index):
    if isinstance(value, (list, tuple)):
        return value[index % len(value)]
    return value


def make_learner(spec: TaskSpec):
    prof = spec.profile
    if spec.learner == "regression":
        return BoxRegressionTask(ridge=prof.get("ridge", 1e-4), metric_scale=prof.get("metric_scale", 1.0))
    if spec.learner == "classification":
        return ClassificationTask(prof.get("dim", 4), prof.get("n_classes", 3), ridge=prof.get("ridge", 1e-3))
    raise ConfigError(f"unknown learner {spec.learner!r}")


def box_profile(spec: TaskSpec, region, edge_index=0) -> BoxProfile:
    p = spec.profile
    if region == "cloud":
        return BoxProfile(p.get("cloud_range_scale", 0.0), p.get("cloud_occlusion_bias", 0.8),
                          p.get("noise", 0.3), p.get("occluded_noise", 0.5))
    return BoxProfile(_per_edge(p.get("edge_range_scale", 0.06), edge_index),
                      _per_edge(p.get("edge_occlusion_bias", 2.0), edge_index),
                      p.get("noise", 0.3), p.get("occluded_noise", 0.5))


def class_profile(spec: TaskSpec, region, edge_index=0) -> ClassProfile:
    p = spec.profile
    shift = 0.0 if region == "cloud" else _per_edge(p.get("edge_shift", 1.5), edge_index)
    return ClassProfile(p.get("dim", 4), p.get("n_classes", 3), p.get("separation", 2.0),
                        p.get("spread", 1.0), shift, p.get("task_seed", 0), tuple(p.get("class_weights", ())))


def _all_poses(scenario, fov=math.pi / 2, rng_=40.0):
    poses = []
    for i in range(len(scenario.lanes)):
        for rev in (False, True):
            poses.extend(lane_route(scenario, i, spacing=5.0, fov_angle=fov, sensor_range=rng_, reverse=rev))
    return poses


def box_rows(scenario, pose_pool, n, profile, seed, visible_only=False) -> Dataset:
    """Exactly ``n`` rows from randomly drawn poses (fewer only if no pose sees anything)."""
    rng = np.random.default_rng(seed)
    parts, have, empty_draws = [], 0, 0
    while have < n and pose_pool:
        pose = pose_pool[int(rng.integers(len(pose_pool)))]
        obs = box_observations(scenario, pose, profile, rng, visible_only)
        if len(obs) == 0:
            empty_draws += 1
            if empty_draws > 10 * len(pose_pool):
                break
            continue
        parts.append(obs)
        have += len(obs)
    if not parts:
        return empty_box_dataset()
    return Dataset.concat(parts).subset(np.arange(min(n, have)))


def box_test_rows(scenario, pose_pool, n_visible, n_occluded, profile, seed) -> Dataset:
    """Test rows with fixed visible/occluded quotas (short only if a stratum is unreachable)."""
    rng = np.random.default_rng(seed)
    vis, occ, nv, no = [], [], 0, 0
    for _ in range(50 * len(pose_pool)):
        if nv >= n_visible and no >= n_occluded:
            break
        obs = box_observations(scenario, pose_pool[int(rng.integers(len(pose_pool)))], profile, rng)
        m = np.asarray(obs.occluded, dtype=bool)
        if nv < n_visible and (~m).any():
            take = np.flatnonzero(~m)[: n_visible - nv]
            vis.append(obs.subset(take))
            nv += len(take)
        if no < n_occluded and m.any():
            take = np.flatnonzero(m)[: n_occluded - no]
            occ.append(obs.subset(take))
            no += len(take)
    parts = vis + occ
    return Dataset.concat(parts) if parts else empty_box_dataset()


def task_key(graph: MultiLayerGraph, dnn_id):
    """Stable name of a DNN for seeding: its first task's name."""
    return graph.dnns[dnn_id].tasks[0]


@dataclass
class WorldData:
    vehicle_poses: dict  # vehicle id -> [SensorPose]
    vehicle_data: dict  # dnn -> {vehicle id: Dataset}
    test_sets: dict  # dnn -> {edge id: Dataset}
    learners: dict  # dnn -> LearningTask
    specs: dict  # dnn -> TaskSpec of the DNN's first task


def build_world(config: PipelineConfig) -> WorldData:
    sc, topo, train, seed = config.scenario, config.topology, config.train, config.seed
    edge_index = {e.id: i for i, e in enumerate(topo.edges)}
    pool = _all_poses(sc)
    routes = [lane_route(sc, i, spacing=5.0, fov_angle=math.pi / 2, sensor_range=40.0, reverse=r)
              for i in range(len(sc.lanes)) for r in (False, True)]
    poses = {}
    for v in topo.vehicles:
        # each vehicle drives a contiguous stretch of one route
        g = np.random.default_rng(derive_seed(seed, "poses", v.id))
        route = routes[int(g.integers(len(routes)))]
        span = min(train.poses_per_vehicle, len(route))
        start = int(g.integers(len(route) - span + 1))
        poses[v.id] = route[start:start + span]
    vehicle_data, test_sets, learners, specs = {}, {}, {}, {}
    for d in config.graph.dnns:
        spec = config.graph.tasks[task_key(config.graph, d)]
        key = spec.name
        learners[d], specs[d] = make_learner(spec), spec
        vehicle_data[d], test_sets[d] = {}, {}
        for e in topo.edges:
            ei = edge_index[e.id]
            for v in topo.vehicles_at(e.id):
                s = derive_seed(seed, "data", key, "vehicle", v.id)
                if spec.learner == "regression":
                    rng = np.random.default_rng(s)
                    vehicle_data[d][v.id] = Dataset.concat(
                        [box_observations(sc, p, box_profile(spec, "edge", ei), rng, visible_only=True)
                         for p in poses[v.id]]) if poses[v.id] else empty_box_dataset()
                else:
                    vehicle_data[d][v.id] = class_dataset(train.samples_per_vehicle, class_profile(spec, "edge", ei),
                                                          np.random.default_rng(s))
            ts = derive_seed(seed, "data", key, "test", e.id)
            if spec.learner == "regression":
                test_sets[d][e.id] = box_test_rows(sc, pool, train.test_samples, train.test_occluded,
                                                   box_profile(spec, "edge", ei), ts)
            else:
                test_sets[d][e.id] = class_dataset(train.test_samples, class_profile(spec, "edge", ei),
                                                   np.random.default_rng(ts))
    return WorldData(poses, vehicle_data, test_sets, learners, specs)


def cloud_samples(config: PipelineConfig, dnn_id, n) -> Dataset:
    spec = config.graph.tasks[task_key(config.graph, dnn_id)]
    s = derive_seed(config.seed, "data", spec.name, "cloud")
    pool_cap = spec.profile.get("cloud_pool")
    n_avail = n if pool_cap is None else min(n, int(pool_cap))
    if spec.learner == "regression":
        return box_rows(config.scenario, _all_poses(config.scenario), n_avail, box_profile(spec, "cloud"), s)
    # a prefix of one fixed pool, so larger uploads extend smaller ones
    pool = class_dataset(max(n_avail, CLOUD_POOL_BLOCK), class_profile(spec, "cloud"), np.random.default_rng(s))
    return pool.subset(np.arange(n_avail))


# --------------------------------------------------------------------- metrics


def _edge_metric(world: WorldData, dnn, models: dict):
    task = world.learners[dnn]
    vals = [task.metric(models[e].values, ds) for e, ds in world.test_sets[dnn].items()]
    return float(np.mean(vals))


def _task_metrics(config, world, models_by_dnn):
    out = {}
    for t, d, _ in config.graph.layer1:
        out[t] = _edge_metric(world, d, models_by_dnn[d])
    return out


def weighted(config, metrics):
    wsum = sum(w for _, _, w in config.graph.layer1)
    return sum(w * metrics[t] for t, _, w in config.graph.layer1) / wsum if wsum > 0 else 0.0


def occluded_miss_distance(task: BoxRegressionTask, params, data: Dataset) -> float:
    """Mean center error over the occluded rows of ``data``."""
    mask = np.asarray(data.occluded, dtype=bool)
    if not mask.any():
        return 0.0
    return float(np.mean(task.errors(params.values if hasattr(params, "values") else params, data.subset(np.flatnonzero(mask)))))


def _stage_mb(ledger, stage, dnn):
    return (ledger.total("wireless", stage, dnn), ledger.total("wireline", stage, dnn))


# ------------------------------------------------------------------- stage I


def run_stage1(config: PipelineConfig, world: WorldData, ledger: UsageLedger):
    """Upload the planned samples per DNN, train centrally, broadcast."""
    warn, units, pretrained = [], {}, {}
    for d in config.graph.dnns:
        task = world.learners[d]
        init = ModelParams(task.init_values(), dict(task.layout))
        n = config.plan.units.get((d, "I"), 0)
        w_mb, l_mb = config.plan.allocation.get(d, "I")
        cap = stage_capacity("I", w_mb, l_mb, config.cards[d])
        if n > cap:
            raise ConfigError(f"stage I units for {d} exceed capacity")
        data = cloud_samples(config, d, n) if n > 0 else None
        used = len(data) if data is not None else 0
        if used < n:
            warn.append(f"{d}: cloud pool holds {used} of {n} samples")
        if used:
            mb = exact(config.cards[d].sample_size_mb) * used
            ledger.record(d, "I", "wireless", mb)
            ledger.record(d, "I", "wireline", mb)
            w = train_centralized(task, init.values, data, config.train.stage1_epochs, config.train.learning_rate)
            pretrained[d] = init.with_values(w)
        else:
            pretrained[d] = init
        ledger.record(d, "I", "wireline", config.cards[d].dnn_size_mb, direction="down")
        units[d] = used
    before = _task_metrics(config, world, {d: {e: ModelParams(world.learners[d].init_values(),
                                                               dict(world.learners[d].layout))
                                               for e in world.test_sets[d]} for d in config.graph.dnns})
    after = _task_metrics(config, world, {d: {e: pretrained[d] for e in world.test_sets[d]}
                                          for d in config.graph.dnns})
    mb = {d: _stage_mb(ledger, "I", d) for d in config.graph.dnns}
    return StageReport("I", units, before, after, ledger.snapshot(), mb, warn), pretrained


# ------------------------------------------------------------------ stage II


def trigger_fl_request(report: DetectionReport, vehicle: VehicleNode, edge: EdgeNode,
                       topology: NetworkTopology, positions: dict, group_size: int,
                       scenario: Scenario | None = None) -> FlRequest | None:
    """An FL request if the report holds a miss or false positive.

    The group is the requester plus its ``group_size - 1`` nearest vehicles
    at the same edge (ties by vehicle id).
    """
    if report.clean:
        return None
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    error = None
    if report.misses and scenario is not None:
        c = scenario.object_by_id(report.misses[0]).center
        error = ErrorItem((c[0], c[1], 0.0), "miss", zone_of(c, scenario))
    elif report.false_positives:
        c = report.false_positives[0]
        error = ErrorItem((c[0], c[1], 0.0), "false_positive",
                          zone_of(c, scenario) if scenario is not None else "")
    me = np.asarray(positions[vehicle.id], dtype=np.float64)
    others = [v for v in topology.vehicles_at(edge.id) if v.id != vehicle.id]
    others.sort(key=lambda v: (float(np.hypot(*(np.asarray(positions[v.id]) - me))), v.id))
    group = [vehicle.id] + [v.id for v in others[: group_size - 1]]
    return FlRequest(vehicle.id, error, edge.id, group)


def _form_group(config, world, edge, warn):
    vehicles = config.topology.vehicles_at(edge.id)
    gsize = next(iter(config.cards.values())).group_size if config.cards else 4
    positions = {v.id: (world.vehicle_poses[v.id][0].position if world.vehicle_poses[v.id] else (0.0, 0.0))
                 for v in vehicles}
    for v in sorted(vehicles, key=lambda v: v.id):
        if not world.vehicle_poses[v.id]:
            continue
        rep = simulate_detections(world.vehicle_poses[v.id][0], config.scenario, config.cav_quality,
                                  derive_seed(config.seed, "request", v.id), agent_id=v.id)
        req = trigger_fl_request(rep, v, edge, config.topology, positions, gsize, config.scenario)
        if req is not None:
            return req
    warn.append(f"edge {edge.id}: no FL request, grouping the first vehicles by id")
    ids = sorted(v.id for v in vehicles)[:gsize]
    return FlRequest(ids[0], None, edge.id, ids) if ids else None


def split_rounds(total, n_edges):
    base, rem = divmod(int(total), n_edges)
    return [base + (1 if i < rem else 0) for i in range(n_edges)]


def _aggregate(deltas, weights, sigma, seed):
    w = np.asarray(weights, dtype=np.float64)
    if not w.sum() > 0:
        w = np.ones(len(deltas))
    if sigma > 0:
        return noisy_aggregate(deltas, w, sigma, seed)
    return fedavg(deltas, w)


def _fused_for(config, world, participants, round_idx, edge_id):
    """Fuse road-sensor reports with every logged frame of the participating vehicles."""
    reports = []
    for v in participants:
        for j, pose in enumerate(world.vehicle_poses[v]):
            reports.append(simulate_detections(
                pose, config.scenario, config.cav_quality,
                derive_seed(config.seed, "distill", edge_id, round_idx, "cav", v, j), agent_id=v * 1000 + j))
    for k, road in enumerate(config.road_sensors):
        reports.append(simulate_detections(road, config.scenario, config.road_quality,
                                           derive_seed(config.seed, "distill", edge_id, round_idx, "road", k),
                                           agent_id=-1 - k, source="road"))
    return road_average_output(reports, config.train.distill_gate, config.flags.road_weight)


def _distill_view(config, world, spec, edge_pos, v, seed):
    """The vehicle's own view of every logged frame, occluded objects included."""
    rng = np.random.default_rng(seed)
    parts = [box_observations(config.scenario, pose, box_profile(spec, "edge", edge_pos), rng)
             for pose in world.vehicle_poses[v]]
    return Dataset.concat(parts) if parts else empty_box_dataset()


def run_stage2(config: PipelineConfig, world: WorldData, ledger: UsageLedger, pretrained: dict):
    flags, train = config.flags, config.train
    warn, units, edge_models, requests = [], {}, {}, {}
    n_edges = len(config.topology.edges)
    for e in config.topology.edges:
        requests[e.id] = _form_group(config, world, e, warn) if config.topology.vehicles_at(e.id) else None
    for d in config.graph.dnns:
        task, key, card = world.learners[d], task_key(config.graph, d), config.cards[d]
        total = config.plan.units.get((d, "II"), 0)
        w_mb, _ = config.plan.allocation.get(d, "II")
        if total > stage_capacity("II", w_mb, 0, card):
            raise ConfigError(f"stage II units for {d} exceed capacity")
        per_edge = split_rounds(total, n_edges)
        edge_models[d] = {}
        units[d] = 0
        distill = flags.distillation and isinstance(task, BoxRegressionTask)
        for e, rounds in zip(config.topology.edges, per_edge):
            model = pretrained[d].copy()
            pool = sorted(config.topology.vehicles_at(e.id), key=lambda v: v.id)
            if not pool:
                if rounds:
                    warn.append(f"edge {e.id}: no vehicles, keeping the pretrained {d}")
                edge_models[d][e.id] = model
                continue
            group = requests[e.id].group
            pending = {}
            for r in range(rounds):
                clients = {v.id: ClientState(v.id, task, world.vehicle_data[d][v.id], model) for v in pool}
                if flags.device_selection:
                    k = min(card.group_size, len(pool))
                    cand = [clients[v.id] for v in pool]
                    for c in cand:
                        c.grad_norm = gradient_norm(c)
                    sel = select_devices(cand, k, derive_seed(config.seed, "stage2", key, e.id, r, "select"))
                    participants = sel.selected
                else:
                    participants = list(group)
                deltas, weights, frac = [], [], Fraction(1)
                for v in participants:
                    delta, _ = local_update(clients[v], train.local_epochs, train.learning_rate)
                    if v in pending:
                        delta = delta + pending.pop(v)
                    delta, frac = apply_freeze(delta, flags.freeze_segments)
                    deltas.append(delta)
                    weights.append(len(clients[v].data))
                    ledger.record(d, "II", "wireless", exact(config.graph.dnns[d].dnn_size_mb) * frac)
                agg = _aggregate(deltas, weights, flags.noisy_sigma,
                                 derive_seed(config.seed, "stage2", key, e.id, r, "noise"))
                model = model + agg
                ledger.record(d, "II", "wireless", card.dnn_size_mb, direction="down")
                units[d] += 1
                if distill and r + 1 < rounds:
                    fused = _fused_for(config, world, participants, r, e.id)
                    if fused.boxes:
                        for v in participants:
                            obs = _distill_view(config, world, world.specs[d], config.topology.edges.index(e), v,
                                                derive_seed(config.seed, "distill", key, e.id, r, "obs", v))
                            res = distill_update(ClientState(v, task, obs, model), obs, fused,
                                                 train.distill_steps, train.distill_learning_rate,
                                                 train.distill_gate)
                            pending[v] = res.params - model
            edge_models[d][e.id] = model
    before = _task_metrics(config, world, {d: {e: pretrained[d] for e in world.test_sets[d]}
                                           for d in config.graph.dnns})
    after = _task_metrics(config, world, edge_models)
    mb = {d: _stage_mb(ledger, "II", d) for d in config.graph.dnns}
    return StageReport("II", units, before, after, ledger.snapshot(), mb, warn), edge_models, requests


# ----------------------------------------------------------------- stage III


def run_stage3(config: PipelineConfig, world: WorldData, ledger: UsageLedger, edge_models: dict):
    """Cloud FL with each edge server as one client holding its vehicles' data."""
    flags, train = config.flags, config.train
    warn, units, deployed = [], {}, {}
    edges = config.topology.edges
    for d in config.graph.dnns:
        task, key, card = world.learners[d], task_key(config.graph, d), config.cards[d]
        rounds = config.plan.units.get((d, "III"), 0)
        _, l_mb = config.plan.allocation.get(d, "III")
        if rounds > stage_capacity("III", 0, l_mb, card):
            raise ConfigError(f"stage III units for {d} exceed capacity")
        units[d] = rounds
        if rounds == 0:
            deployed[d] = dict(edge_models[d])
            continue
        data = {}
        for e in edges:
            parts = [world.vehicle_data[d][v.id] for v in config.topology.vehicles_at(e.id)]
            data[e.id] = Dataset.concat(parts) if parts else None
        sizes = [len(data[e.id]) if data[e.id] is not None else 0 for e in edges]
        weights = sizes if sum(sizes) > 0 else [1] * len(edges)
        models = [edge_models[d][e.id] for e in edges]
        if flags.personalization:
            local = [m.copy() for m in models]
        else:
            local = [fedavg(models, weights)] * len(edges)
        shared = [s for s in task.layout if s not in train.personal_segments]
        for r in range(rounds):
            deltas = []
            frac = Fraction(1)
            for i, e in enumerate(edges):
                if train.stage3_local_epochs > 0 and data[e.id] is not None:
                    client = ClientState(e.id, task, data[e.id], local[i])
                    delta, _ = local_update(client, train.stage3_local_epochs, train.learning_rate)
                else:
                    delta = local[i].with_values(np.zeros_like(local[i].values))
                delta, frac = apply_freeze(delta, flags.freeze_segments)
                deltas.append(delta)
                ledger.record(d, "III", "wireline", exact(config.graph.dnns[d].dnn_size_mb) * frac)
            agg = _aggregate(deltas, weights, flags.noisy_sigma,
                             derive_seed(config.seed, "stage3", key, r, "noise"))
            if flags.personalization:
                merged = fedavg(local, weights) + agg
                new = []
                for i in range(len(edges)):
                    v = (local[i] + deltas[i]).values.copy()
                    for name in shared:
                        a, b = task.layout[name]
                        v[a:b] = merged.values[a:b]
                    new.append(local[i].with_values(v))
                local = new
            else:
                g = local[0] + agg
                local = [g] * len(edges)
            ledger.record(d, "III", "wireline", card.dnn_size_mb, direction="down")
        deployed[d] = {e.id: local[i] for i, e in enumerate(edges)}
    before = _task_metrics(config, world, edge_models)
    after = _task_metrics(config, world, deployed)
    mb = {d: _stage_mb(ledger, "III", d) for d in config.graph.dnns}
    return StageReport("III", units, before, after, ledger.snapshot(), mb, warn), deployed


# ------------------------------------------------------------------ full run


def run_pipeline(config: PipelineConfig, world: WorldData | None = None) -> PipelineResult:
    config.check()
    world = world or build_world(config)
    ledger = UsageLedger(config.plan.allocation)
    r1, pretrained = run_stage1(config, world, ledger)
    r2, edge_models, requests = run_stage2(config, world, ledger, pretrained)
    r3, deployed = run_stage3(config, world, ledger, edge_models)
    metrics = _task_metrics(config, world, deployed)
    return PipelineResult([r1, r2, r3], deployed, metrics, weighted(config, metrics), ledger,
                          requests, edge_models, pretrained)


def stage_csv(config: PipelineConfig, result: PipelineResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for rep in result.reports:
        for t, d, _ in config.graph.layer1:
            mw, ml = rep.mb[d]
            w.writerow([rep.stage, t, repr(rep.metric_before[t]), repr(rep.metric_after[t]),
                        repr(float(mw)), repr(float(ml))])
    return buf.getvalue()


def manifest(config: PipelineConfig, result: PipelineResult, config_hash="") -> dict:
    return {
        "config_hash": config_hash,
        "seed": config.seed,
        "seeds": {s: derive_seed(config.seed, f"stage{i + 1}") for i, s in enumerate(STAGES)},
        "plan": config.plan.to_dict(config.graph),
        "flags": {"device_selection": config.flags.device_selection, "noisy_sigma": config.flags.noisy_sigma,
                  "freeze_segments": list(config.flags.freeze_segments),
                  "personalization": config.flags.personalization,
                  "distillation": config.flags.distillation, "road_weight": config.flags.road_weight},
        "task_metrics": dict(sorted(result.task_metrics.items())),
        "weighted_metric": result.weighted_metric,
        "ledger": result.ledger.snapshot(),
        "units": {r.stage: dict(sorted(r.units.items())) for r in result.reports},
        "warnings": [w for r in result.reports for w in r.warnings],
        "requests": {str(e): (None if q is None else {"requester": q.requester, "group": q.group,
                                                       "error": None if q.error is None else
                                                       {"position": list(q.error.position),
                                                        "kind": q.error.kind, "zone": q.error.zone}})
                     for e, q in sorted(result.requests.items())},
    }


# ----------------------------------------------------------- task importance


def evaluate_task_importance(config: PipelineConfig, mode="optimize", stages=STAGES, priority_floor=0.0,
                             similarity_threshold=1.0):
    """Objective loss when each task is dropped and the rest are replanned and retrained.

    Returns ``{task: (importance, high_priority)}``. The objective is the
    weighted sum of task metrics. A lone task's importance is its own metric.
    """
    tasks = list(config.tasks)
    if not tasks:
        raise ValueError("need at least one task")

    def objective(task_list):
        if not task_list:
            return 0.0
        cfg = replan(config, task_list, mode, stages, similarity_threshold)
        res = run_pipeline(cfg)
        return sum(t.weight * res.task_metrics[t.name] for t in task_list)

    full = objective(tasks)
    out = {}
    for t in tasks:
        rest = [u for u in tasks if u.name != t.name]
        imp = max(0.0, full - objective(rest)) if rest else full
        out[t.name] = (imp, imp >= priority_floor)
    return out


def replan(config: PipelineConfig, tasks, mode="optimize", stages=STAGES, similarity_threshold=1.0):
    """A copy of ``config`` with the graph and plan rebuilt for ``tasks``."""
    from .mlgra import default_cards

    card0 = next(iter(config.cards.values()))
    vehicles = {}
    for m, v in config.graph.layer3:
        vehicles.setdefault(m, []).append(v)
    graph = build_graph(tasks, similarity_threshold, vehicles)
    cards = default_cards(graph, card0.group_size, card0.num_edges)
    frac = _freeze_fraction_cards(graph, cards, config.flags.freeze_segments)
    planner = allocate if mode == "optimize" else equal_allocation
    plan = planner(graph, config.budget, frac, stages)
    return replace(config, tasks=list(tasks), graph=graph, plan=plan, cards=frac)


def _freeze_fraction_cards(graph, cards, frozen):
    """Cost cards whose parameter exchange reflects the frozen segments."""
    if not frozen:
        return dict(cards)
    out = {}
    for d, card in cards.items():
        learner = make_learner(graph.tasks[task_key(graph, d)])
        total = learner.size
        kept = sum(b - a for n, (a, b) in learner.layout.items() if n not in set(frozen))
        out[d] = card.scaled(Fraction(kept, total))
    return out


freeze_scaled_cards = _freeze_fraction_cards


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]

