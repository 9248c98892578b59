import copy
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import settings

from vecfl import config as cfgmod
from vecfl.demo import demo_config
from vecfl.learners import Dataset, box_observations
from vecfl.netmodel import UsageLedger
from vecfl.pipeline import box_profile, build_world, occluded_miss_distance, run_stage1, run_stage2

settings.register_profile("ci", deadline=None, max_examples=60)
settings.load_profile("ci")

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)

# training sizes small enough for sub-second pipeline runs
FAST_FL = {"stage1_epochs": 20, "test_samples": 60, "test_occluded": 10, "samples_per_vehicle": 10,
           "poses_per_vehicle": 2, "distill_steps": 3, "distill_learning_rate": 0.05}


def random_config(seed: int) -> dict:
    """A small random run config with literal predictors and a generated cross road."""
    r = np.random.default_rng(seed)
    group = int(r.integers(1, 4))
    tasks = []
    for i in range(int(r.integers(1, 4))):
        learner = "regression" if r.random() < 0.5 else "classification"
        tasks.append({
            "name": f"t{i}", "modality": ["camera", "lidar"][int(r.integers(2))], "tags": [f"k{i}"],
            "weight": float(r.choice([0.5, 1.0, 2.0])), "learner": learner,
            "sample_size_mb": float(r.choice([0.3, 0.5, 1.0, 1.7])),
            "dnn_size_mb": float(r.choice([0.7, 1.5, 2.0, 3.1])),
            "predictors": {"I": {"a": 90.0, "b": float(r.uniform(20, 60)), "c": float(r.uniform(0.3, 1.0))},
                           "II": {"a": 95.0, "b": float(r.uniform(2, 10)), "c": float(r.uniform(0.3, 1.0))},
                           "III": {"a": 98.0, "b": float(r.uniform(2, 10)), "c": float(r.uniform(0.3, 1.0))}},
            "profile": {"dim": 3, "n_classes": 3} if learner == "classification" else {},
        })
    fl = dict(FAST_FL)
    fl.update({"freeze_segments": ["feature"] if r.random() < 0.3 else [],
               "device_selection": bool(r.random() < 0.3),
               "noisy_sigma": float(r.choice([0.0, 0.0, 0.01])),
               "personalization": bool(r.random() < 0.3),
               "distillation": bool(r.random() < 0.3)})
    return {
        "seed": int(r.integers(2**32)),
        "scenario": {"layout": "cross_road", "zone_limits": [-60, -60, 60, 60],
                     "odd": {"traffic_density": 6.0}},
        "topology": {"edges": int(r.integers(1, 3)), "vehicles_per_edge": group + int(r.integers(0, 3))},
        "budget": {"wireless_mb": float(r.uniform(20, 150)), "wireline_mb": float(r.uniform(20, 150))},
        "group_size": group,
        "tasks": tasks,
        "allocation": {"mode": "optimize" if r.random() < 0.5 else "equal"},
        "fl": fl,
        "sensors": {"cost_budget": 1.0, "route_spacing": 10.0},
    }


def run_config(cfg):
    """(PipelineConfig, Run) for a config dict, with a VRCSP placement when distilling."""
    run = cfgmod.assemble(cfg)
    placement = run.placement("vrcsp") if run.flags.distillation else None
    return run.pipeline_config(run.plan(), None, placement), run


def manual_plan(run, units):
    """A manual plan from ``{(task, stage): units}``."""
    dnn_of = {t: d for t, d, _ in run.graph.layer1}
    rows = [{"dnn": dnn_of[t], "stage": s, "units": u} for (t, s), u in units.items()]
    return run.plan(plan_dict={"rows": rows, "mode": "manual"})


def distillation_effect(run, seed_shift=0, rounds_per_edge=11):
    """Occluded miss distance per edge: (pretrained, edge FL, edge FL + distillation).

    Measured on fresh views from every logged frame of the edge's FL group.
    With ``rounds_per_edge`` rounds the group distills ``rounds_per_edge - 1``
    times, since offsets from the last round are dropped.
    """
    box = next(t.name for t in run.tasks if t.learner == "regression")
    units = {(box, "I"): 251, (box, "II"): rounds_per_edge * len(run.topology.edges)}
    out = {}
    for distill in (False, True):
        flags = replace(run.flags, distillation=distill)
        pc = run.pipeline_config(manual_plan(run, units), flags, run.placement("vrcsp"))
        pc = replace(pc, seed=pc.seed + seed_shift)
        world = build_world(pc)
        ledger = UsageLedger(pc.plan.allocation)
        _, pre = run_stage1(pc, world, ledger)
        _, models, req = run_stage2(pc, world, ledger, pre)
        d = next(d for t, d, _ in pc.graph.layer1 if t == box)
        task, rows = world.learners[d], []
        for i, e in enumerate(pc.topology.edges):
            rng = np.random.default_rng(77)
            prof = box_profile(world.specs[d], "edge", i)
            views = Dataset.concat([box_observations(pc.scenario, p, prof, rng) for v in req[e.id].group
                                    for p in world.vehicle_poses[v] for _ in range(5)])
            rows.append((occluded_miss_distance(task, pre[d], views),
                         occluded_miss_distance(task, models[d][e.id], views)))
        out[distill] = rows
    return [b for b, _ in out[False]], [a for _, a in out[False]], [a for _, a in out[True]]


@pytest.fixture(scope="session")
def demo_run():
    from pathlib import Path
    from importlib import resources
    base = Path(str(resources.files("vecfl").joinpath("data")))
    return cfgmod.assemble(copy.deepcopy(demo_config()), base)
