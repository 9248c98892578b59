import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vecfl.learners import ClassificationTask, ClassProfile, Dataset, class_dataset
from vecfl.mlgra import (OracleLimitError, TaskSpec, VehicleLink, allocate, build_graph, default_cards,
                         equal_allocation, exact_allocation, plan_from_dict, score_vehicles)
from vecfl.netmodel import CostCard, ResourceBudget, stage1_capacity, validate_allocation
from vecfl.predictor import PowerLawPredictor

P = PowerLawPredictor


def task(name, tags=None, modality="lidar", preds=None, sample=1.0, dnn=1.0, weight=1.0):
    return TaskSpec(name, modality, frozenset(tags if tags is not None else {name}), weight,
                    preds or {"I": P(90, 30, 1)}, sample, dnn)


# ------------------------------------------------------------------- graph


def test_shared_signature_tasks_share_one_dnn():
    tasks = [task(n, {"box3d"}) for n in ("car", "pedestrian", "cyclist")]
    g = build_graph(tasks)
    assert list(g.dnns) == ["dnn0"]
    assert [(t, d) for t, d, _ in g.layer1] == [("car", "dnn0"), ("pedestrian", "dnn0"), ("cyclist", "dnn0")]


def test_single_task_chain():
    g = build_graph([task("a")])
    assert len(g.dnns) == 1 and len(g.layer1) == 1 and len(g.layer2) == 1 and len(g.layer3) == 1


@given(st.lists(st.frozensets(st.sampled_from("abcd"), min_size=1), min_size=1, max_size=6))
def test_distinct_signatures_never_share(tagsets):
    tasks = [TaskSpec(f"t{i}", "cam", ts, 1.0, {"I": P(90, 30, 1)}) for i, ts in enumerate(tagsets)]
    g = build_graph(tasks)
    for node in g.dnns.values():
        assert len({g.tasks[t].tags for t in node.tasks}) == 1


def test_same_tags_other_modality_stay_apart():
    g = build_graph([task("a", {"x"}, "cam"), task("b", {"x"}, "lidar")])
    assert len(g.dnns) == 2


def test_graph_errors():
    with pytest.raises(ValueError, match="modality"):
        build_graph([task("a", modality="")])
    with pytest.raises(ValueError, match="duplicate"):
        build_graph([task("a"), task("a")])
    with pytest.raises(ValueError):
        build_graph([TaskSpec("a", "cam", frozenset(), 1.0, {"II": P(90, 30, 1)})])


# -------------------------------------------------------------- allocation


def two_task_graph():
    return build_graph([task("a", preds={"I": P(90, 30, 1)}), task("b", preds={"I": P(90, 60, 1)})])


def test_worked_example():
    g = two_task_graph()
    plan = allocate(g, ResourceBudget(10, 10))
    assert (plan.units[("dnn0", "I")], plan.units[("dnn1", "I")]) == (4, 6)
    assert plan.objective == pytest.approx(162.5, abs=1e-12)
    assert exact_allocation(g, ResourceBudget(10, 10)).objective == pytest.approx(162.5, abs=1e-12)


def test_zero_budget():
    plan = allocate(two_task_graph(), ResourceBudget(0, 0))
    assert all(u == 0 for u in plan.units.values())


def test_single_task_takes_capacity():
    g = build_graph([task("a", sample=0.7)])
    plan = allocate(g, ResourceBudget(50, 30))
    assert plan.units[("dnn0", "I")] == stage1_capacity(50, 30, 0.7)
    eq = equal_allocation(g, ResourceBudget(50, 30))
    assert eq.units == plan.units


def test_equal_split_per_task():
    g = build_graph([task(n) for n in "abcd"])
    plan = equal_allocation(g, ResourceBudget(40, 40))
    assert all(plan.units[(d, "I")] == 10 for d in g.dnns)


def test_plan_round_trip():
    g = two_task_graph()
    plan = allocate(g, ResourceBudget(10, 10))
    again = plan_from_dict(plan.to_dict(g), g, default_cards(g))
    assert again.units == plan.units and again.objective == plan.objective


def test_stage1_respects_vehicle_throughput():
    links = {"lidar": [VehicleLink(0, 2.0), VehicleLink(1, 3.0)]}
    g = build_graph([task("a")], vehicles=links)
    plan = allocate(g, ResourceBudget(100, 100))
    assert plan.units[("dnn0", "I")] == 5
    assert sum(plan.vehicle_shares["dnn0"].values()) == pytest.approx(5.0)


def test_vehicle_shares_follow_quality():
    links = {"lidar": [VehicleLink(0, 100.0, 3.0), VehicleLink(1, 100.0, 1.0)]}
    g = build_graph([task("a")], vehicles=links)
    plan = allocate(g, ResourceBudget(8, 8))
    assert plan.vehicle_shares["dnn0"] == {0: 6.0, 1: 2.0}


STAGE_SETS = [("I",), ("I", "II"), ("I", "III"), ("II", "III")]


@st.composite
def instances(draw, uniform=True, max_dnns=3, max_units=30):
    n = draw(st.integers(1, max_dnns))
    stages = draw(st.sampled_from(STAGE_SETS))
    tasks = []
    for i in range(n):
        preds = {"I": P(90, draw(st.floats(10, 60)), draw(st.floats(0.2, 1.5)))}
        preds["II"] = P(95, draw(st.floats(1, 20)), draw(st.floats(0.2, 1.5)))
        preds["III"] = P(98, draw(st.floats(1, 20)), draw(st.floats(0.2, 1.5)))
        tasks.append(TaskSpec(f"t{i}", "cam", frozenset({str(i)}), draw(st.sampled_from([0.5, 1.0, 2.0])), preds))
    g = build_graph(tasks)
    if uniform:
        cards = {d: CostCard(1.0, 1.0, 1, 1) for d in g.dnns}
        units = draw(st.integers(0, max_units))
        budget = ResourceBudget(units, units)
    else:
        size = st.sampled_from([0.5, 1.0, 1.5, 2.0])
        cards = {d: CostCard(draw(size), draw(size), draw(st.integers(1, 2)), 1) for d in g.dnns}
        budget = ResourceBudget(draw(st.integers(0, max_units)), draw(st.integers(0, max_units)))
    return g, cards, budget, stages


@given(instances(uniform=True))
def test_allocate_matches_oracle_uniform_cost(inst):
    g, cards, budget, stages = inst
    opt = exact_allocation(g, budget, cards, stages).objective
    assert allocate(g, budget, cards, stages).objective == pytest.approx(opt, rel=1e-12, abs=1e-9)


@given(instances(uniform=False))
def test_allocate_near_oracle_mixed_cost(inst):
    g, cards, budget, stages = inst
    opt = exact_allocation(g, budget, cards, stages).objective
    assert allocate(g, budget, cards, stages).objective >= 0.95 * opt - 1e-9


@given(instances(uniform=False, max_dnns=4, max_units=60))
def test_allocate_feasible_and_beats_equal(inst):
    g, cards, budget, stages = inst
    plan = allocate(g, budget, cards, stages)
    assert validate_allocation(plan.allocation, budget).ok
    assert plan.objective >= equal_allocation(g, budget, cards, stages).objective - 1e-9


@given(instances(uniform=True), st.integers(0, 10), st.integers(0, 10))
def test_larger_budget_never_hurts(inst, dw, dl):
    g, cards, budget, stages = inst
    bigger = ResourceBudget(budget.wireless_total + dw, budget.wireline_total + dl)
    assert allocate(g, bigger, cards, stages).objective >= allocate(g, budget, cards, stages).objective - 1e-9


@given(instances(uniform=False))
def test_allocate_is_deterministic(inst):
    g, cards, budget, stages = inst
    assert allocate(g, budget, cards, stages).units == allocate(g, budget, cards, stages).units


def test_oracle_guard():
    g = build_graph([task(n) for n in "abcd"])
    with pytest.raises(OracleLimitError, match="oracle limit"):
        exact_allocation(g, ResourceBudget(4, 4))


# --------------------------------------------------------- vehicle scoring


def _class_setup(seed):
    rng = np.random.default_rng(seed)
    prof = ClassProfile(4, 3, 1.2)
    return rng, prof, ClassificationTask(4, 3)


def test_iid_shards_score_equally():
    rng, prof, t = _class_setup(0)
    shards = {v: class_dataset(200, prof, rng) for v in range(4)}
    res = score_vehicles("cam", shards, t, class_dataset(10, prof, rng), class_dataset(2000, prof, rng))
    assert res.warning == ""
    assert max(res.scores.values()) - min(res.scores.values()) <= 0.05 * 4 * 0.25 + 0.05


def test_duplicated_single_class_shard_scores_low():
    worse = 0
    for seed in range(20):
        rng, prof, t = _class_setup(seed)
        shards = {v: class_dataset(60, prof, rng) for v in range(3)}
        one = class_dataset(200, prof, rng)
        row = one.subset(np.flatnonzero(one.target == 0)[:1])
        shards[3] = Dataset.concat([row] * 60)
        res = score_vehicles("cam", shards, t, class_dataset(6, prof, rng), class_dataset(600, prof, rng))
        worse += res.scores[3] < np.mean(list(res.scores.values()))
    assert worse == 20


def test_empty_shard_and_missing_validation():
    rng, prof, t = _class_setup(1)
    shards = {0: class_dataset(50, prof, rng), 1: Dataset(np.zeros((0, 4)), np.zeros(0))}
    res = score_vehicles("cam", shards, t, None, class_dataset(300, prof, rng))
    assert res.scores[1] == 0.0
    res = score_vehicles("cam", shards, t, None, None)
    assert res.warning and res.scores == {0: 0.5, 1: 0.5}
