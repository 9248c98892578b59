"""Acceptance criteria, one test each, at the stated tolerances and time limits.

Each test prints one ``ACCEPTANCE`` line; the lines are repeated in the
pytest terminal summary.
"""
import math
import time
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from conftest import ACCEPTANCE, distillation_effect, random_config, run_config

from vecfl.cli import main
from vecfl.fedcore import (ClientState, DistillLoss, ModelParams, fedavg, inclusion_probabilities, local_update,
                           match_frames, noisy_aggregate, road_average_output, select_devices)
from vecfl.learners import BoxProfile, BoxRegressionTask, Dataset, box_dataset, box_observations, train_centralized
from vecfl.mlgra import TaskSpec, allocate, build_graph, equal_allocation, exact_allocation
from vecfl.netmodel import CostCard, ResourceBudget, stage2_capacity, stage3_capacity
from vecfl.pipeline import run_pipeline
from vecfl.predictor import CalibrationPoint, PowerLawPredictor, fit
from vecfl.report import LADDER, SCHEMES, run_schemes
from vecfl.vrcsp import SensorTier, exact_placement, place_sensors
from vecfl.world import CandidateSite, DetectorQuality, ErrorItem, ErrorRegistry, SensorPose, lane_route, \
    simulate_detections


@contextmanager
def criterion(number, title, limit_s):
    """Time the body, then print and record one pass/fail line."""
    state = {"ok": False, "detail": ""}
    t0 = time.perf_counter()
    try:
        yield state
    finally:
        took = time.perf_counter() - t0
        within = took < limit_s
        ok = bool(state["ok"]) and within
        line = (f"ACCEPTANCE {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {state['detail']} "
                f"[{took:.3f} s, limit {limit_s:g} s]")
        print(line)
        ACCEPTANCE.append(line)
        state["within"] = within


def test_1_throughput_arithmetic():
    with criterion(1, "stage capacities for a 4096 MB budget and a 60 MB DNN", 1e-3) as c:
        k2, k3 = stage2_capacity(4096, 4, 60), stage3_capacity(4096, 2, 60)
        c["ok"] = (k2, k3) == (17, 34)
        c["detail"] = f"stage II {k2} rounds, stage III {k3} rounds"
    assert c["ok"] and c["within"]


def test_2_ledger_conservation():
    with criterion(2, "metered MB equal the plan on 50 random configs", 30) as c:
        bad = []
        for seed in range(50):
            pc, _ = run_config(random_config(1000 + seed))
            res = run_pipeline(pc)
            for (d, s), (w, l) in pc.plan.allocation.rows.items():
                if res.ledger.total("wireless", s, d) != w or res.ledger.total("wireline", s, d) != l:
                    bad.append((seed, d, s))
        c["ok"] = not bad
        c["detail"] = f"{50 - len({b[0] for b in bad})}/50 configs conserve exactly"
    assert c["ok"] and c["within"]


def random_registry(rng):
    n_sites = int(rng.integers(4, 13))
    centers = rng.uniform(-40, 40, (int(rng.integers(2, 6)), 2))
    pts = np.concatenate([c + rng.normal(0, 6, (int(rng.integers(3, 20)), 2)) for c in centers])
    sites = [CandidateSite(i, tuple(p)) for i, p in enumerate(rng.uniform(-45, 45, (n_sites, 2)))]
    return ErrorRegistry([ErrorItem((x, y, 0.0), "miss") for x, y in pts]), sites


def test_3_vrcsp_optimality_gap():
    with criterion(3, "greedy vs exhaustive coverage on 200 registries", 60) as c:
        tier = [SensorTier("std", 1.0, 15.0)]
        ratios = []
        for seed in range(200):
            reg, sites = random_registry(np.random.default_rng(seed))
            opt = exact_placement(reg, sites, tier, 3).covered
            got = place_sensors(reg, sites, tier, 3).covered
            ratios.append(got / opt if opt else 1.0)
        ratios = np.array(ratios)
        floor_ok = bool(np.all(ratios >= 1 - 1 / math.e))
        near = float(np.mean(ratios >= 0.98))
        c["ok"] = floor_ok and near >= 0.90
        c["detail"] = f"min ratio {ratios.min():.3f}, {near:.1%} within 0.98 of optimum"
    assert c["ok"] and c["within"]


def test_4_demo_placement(demo_run):
    with criterion(4, "density baseline picks site 8, error coverage picks site 3", 5) as c:
        picks = [(demo_run.placement("density").site_ids, demo_run.placement("vrcsp").site_ids) for _ in range(2)]
        c["ok"] = picks[0] == picks[1] == ([8], [3])
        c["detail"] = f"baseline {picks[0][0]}, coverage {picks[0][1]}, repeat identical {picks[0] == picks[1]}"
    assert c["ok"] and c["within"]


def test_5_predictor_recovery():
    with criterion(5, "power-law fit recovery", 10) as c:
        ns = (1, 2, 4, 8, 16, 32, 64)
        p, err = fit([CalibrationPoint(n, 80 - 40 * n ** -1.0) for n in ns])
        clean = max(abs(p.a - 80), abs(p.b - 40), abs(p.c - 1)) < 1e-3 and err < 1e-6
        hits = 0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            q, _ = fit([CalibrationPoint(n, 80 - 40 * n ** -1.0 + 0.5 * rng.standard_normal()) for n in ns])
            hits += abs(q.a - 80) <= 1.0
        c["ok"] = clean and hits >= 95
        c["detail"] = f"noiseless rmse {err:.1e}, noisy a within 1.0 in {hits}/100"
    assert c["ok"] and c["within"]


def mlgra_instance(rng, uniform):
    n = int(rng.integers(1, 4))
    stages = [("I",), ("I", "II"), ("I", "III"), ("I", "II", "III"), ("II", "III")][int(rng.integers(5))]
    tasks = [TaskSpec(f"t{i}", "cam", frozenset({str(i)}), float(rng.choice([0.5, 1.0, 2.0])),
                      {"I": PowerLawPredictor(90, rng.uniform(10, 60), rng.uniform(0.2, 1.5)),
                       "II": PowerLawPredictor(95, rng.uniform(1, 20), rng.uniform(0.2, 1.5), "rounds"),
                       "III": PowerLawPredictor(98, rng.uniform(1, 20), rng.uniform(0.2, 1.5), "rounds")})
             for i in range(n)]
    g = build_graph(tasks)
    if uniform:
        cards = {d: CostCard(1.0, 1.0, 1, 1) for d in g.dnns}
        units = int(rng.integers(0, 31))
        budget = ResourceBudget(units, units)
    else:
        sizes = [0.5, 1.0, 1.5, 2.0]
        cards = {d: CostCard(float(rng.choice(sizes)), float(rng.choice(sizes)), int(rng.integers(1, 3)), 1)
                 for d in g.dnns}
        budget = ResourceBudget(int(rng.integers(0, 31)), int(rng.integers(0, 31)))
    return g, cards, budget, stages


def test_6_mlgra_optimality():
    with criterion(6, "allocate vs exhaustive optimum and vs equal split", 120) as c:
        exact_miss, mixed_worst, below_equal = 0, 1.0, 0
        for seed in range(150):
            g, cards, budget, stages = mlgra_instance(np.random.default_rng(seed), True)
            opt = exact_allocation(g, budget, cards, stages).objective
            exact_miss += not math.isclose(allocate(g, budget, cards, stages).objective, opt,
                                           rel_tol=1e-12, abs_tol=1e-9)
        for seed in range(150):
            g, cards, budget, stages = mlgra_instance(np.random.default_rng(10_000 + seed), False)
            opt = exact_allocation(g, budget, cards, stages).objective
            got = allocate(g, budget, cards, stages).objective
            mixed_worst = min(mixed_worst, got / opt if opt > 0 else 1.0)
        for seed in range(500):
            g, cards, budget, stages = mlgra_instance(np.random.default_rng(50_000 + seed), seed % 2 == 0)
            below_equal += (allocate(g, budget, cards, stages).objective
                            < equal_allocation(g, budget, cards, stages).objective - 1e-9)
        c["ok"] = exact_miss == 0 and mixed_worst >= 0.95 and below_equal == 0
        c["detail"] = (f"uniform-cost mismatches {exact_miss}/150, worst mixed-cost ratio {mixed_worst:.4f}, "
                       f"below equal {below_equal}/500")
    assert c["ok"] and c["within"]


def test_7_training_ladder(demo_run):
    with criterion(7, "demo ladder centralized < edge FL < cloud FL < VRCSP < MLGRA", 60) as c:
        res = run_schemes(demo_run, [s for s in SCHEMES if s[0] in LADDER])
        vals = [res[s].weighted_metric for s in LADDER]
        c["ok"] = all(b > a for a, b in zip(vals, vals[1:]))
        c["detail"] = " < ".join(f"{v:.2f}" for v in vals)
    assert c["ok"] and c["within"]


def test_8_fl_correctness():
    from vecfl.demo import demo_scenario
    with criterion(8, "FedAvg convergence, noiseless aggregation, selection frequencies", 120) as c:
        sc = demo_scenario()
        rng = np.random.default_rng(3)
        data = box_dataset(sc, lane_route(sc, 0, spacing=5.0) + lane_route(sc, 1, spacing=5.0),
                           BoxProfile(0.06, 2.0), rng)
        task = BoxRegressionTask()
        best = task.loss(train_centralized(task, task.init_values(), data, 20000, 0.5), data)
        perm = rng.permutation(len(data))
        shards = [data.subset(perm[i::4]) for i in range(4)]
        model, rounds = ModelParams.zeros_for(task), 0
        while rounds < 200 and task.loss(model.values, data) - best >= 1e-3:
            deltas = [local_update(ClientState(i, task, s, model), 5, 0.5)[0] for i, s in enumerate(shards)]
            model = model + fedavg(deltas, [len(s) for s in shards])
            rounds += 1
        gap = task.loss(model.values, data) - best
        deltas = [ModelParams(np.random.default_rng(i).standard_normal(12), dict(task.layout)) for i in range(4)]
        identical = np.array_equal(noisy_aggregate(deltas, [1, 2, 3, 4], 0.0, 9).values,
                                   fedavg(deltas, [1, 2, 3, 4]).values)
        norms = [1.0, 2.0, 3.0, 4.0]
        clients = [ClientState(i, task, None, model) for i in range(4)]
        for cl, n in zip(clients, norms):
            cl.grad_norm = n
        counts, trials = np.zeros(4), 100_000
        for s in range(trials):
            counts[select_devices(clients, 1, s).selected] += 1
        dev = float(np.max(np.abs(counts / trials - inclusion_probabilities(norms, 1))))
        c["ok"] = gap < 1e-3 and identical and dev <= 0.01
        c["detail"] = (f"loss gap {gap:.2e} after {rounds} rounds, sigma=0 identical {identical}, "
                       f"max selection deviation {dev:.4f}")
    assert c["ok"] and c["within"]


def test_9_distillation(demo_run):
    from vecfl.demo import SITES, demo_scenario
    with criterion(9, "distillation lowers occluded miss distance; gradient matches finite differences", 30) as c:
        pretrained, plain, distilled = distillation_effect(demo_run)
        lower = all(d < p and d < b for b, p, d in zip(pretrained, plain, distilled))
        sc = demo_scenario()
        worst = 0.0
        for seed in range(3):
            rng = np.random.default_rng(seed)
            poses = [p for p in lane_route(sc, 0, spacing=5.0) if -75 <= p.position[0] <= -55]
            obs = Dataset.concat([box_observations(sc, p, BoxProfile(0.06, 2.0), rng) for p in poses])
            reps = [simulate_detections(p, sc, DetectorQuality(0, 0, 0.3), seed + j, agent_id=j)
                    for j, p in enumerate(poses)]
            reps.append(simulate_detections(SensorPose(SITES[3], 0.0, 2 * math.pi, 20.0), sc,
                                            DetectorQuality(0, 0, 0.1), seed + 99, agent_id=-1, source="road"))
            fused = road_average_output(reps)
            task = BoxRegressionTask()
            w = rng.standard_normal(task.size) * 0.1
            loss = DistillLoss(task, obs, fused, match_frames(obs.origin + task.predict(w, obs), obs, fused))
            g = loss.grad(w)
            fd = np.array([(loss(w + h) - loss(w - h)) / 2e-6 for h in np.eye(task.size) * 1e-6])
            worst = max(worst, float(np.linalg.norm(g - fd) / np.linalg.norm(fd)))
        c["ok"] = lower and worst < 1e-6
        pairs = ", ".join(f"{p:.3f}->{d:.3f}" for p, d in zip(plain, distilled))
        c["detail"] = (f"per-edge miss distance without->with distillation {pairs} "
                       f"(pretrained {', '.join(f'{b:.3f}' for b in pretrained)}), gradient rel err {worst:.1e}")
    assert c["ok"] and c["within"]


CHAIN = ["gen-scenario", "collect-errors", "place-sensors", "fit-predictor", "allocate", "run-pipeline", "report"]


def test_10_cli_determinism(tmp_path):
    with criterion(10, "every CLI command reproduces byte-identical outputs", math.inf) as c:
        outs = [tmp_path / "a", tmp_path / "b"]
        codes = [[main([cmd, "--config", "demo", "--out", str(o)]) for cmd in CHAIN] for o in outs]
        files = sorted(f.name for f in outs[0].iterdir())
        same = [f for f in files if (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()]
        c["ok"] = codes == [[0] * len(CHAIN)] * 2 and len(same) == len(files) and len(files) >= 10
        c["detail"] = f"{len(same)}/{len(files)} artifacts identical"
    assert c["ok"] and c["within"]
