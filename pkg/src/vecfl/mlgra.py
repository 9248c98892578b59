"""Multi-layer graph resource allocation.

Layer 1 links tasks to the DNN that serves them (edge weight = training
weight), layer 2 links each DNN to its data modality with the training
costs and accuracy predictors, layer 3 links a modality to the vehicles that
can upload it. ``allocate`` spends the wireless and wireline budgets one
resource unit at a time (a sample for stage I, an FL round for stages II
and III) on the cell with the best predicted accuracy gain per MB.
"""
from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .learners import Dataset, LearningTask, train_centralized
from .netmodel import STAGES, Allocation, CostCard, ResourceBudget, exact, stage_usage
from .predictor import PowerLawPredictor, predict, stage_gain


class OracleLimitError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    name: str
    modality: str
    tags: frozenset = frozenset()
    weight: float = 1.0
    predictors: dict = field(default_factory=dict)  # stage -> PowerLawPredictor
    sample_size_mb: float = 1.0
    dnn_size_mb: float = 1.0
    learner: str = "regression"
    ceiling: float = 100.0
    profile: dict = field(default_factory=dict)  # surrogate data settings, see pipeline

    def cap(self):
        p3 = self.predictors.get("III")
        return min(self.ceiling, p3.a) if p3 is not None else self.ceiling

    def final_accuracy(self, n, r2=0, r3=0):
        """Predicted accuracy after ``n`` samples, ``r2`` edge and ``r3`` cloud rounds."""
        p1 = self.predictors["I"]
        acc = predict(p1, n) if n >= 1 else p1.floor
        if r2 and "II" in self.predictors:
            acc += stage_gain(self.predictors["II"], r2)
        if r3 and "III" in self.predictors:
            acc += stage_gain(self.predictors["III"], r3)
        return min(self.cap(), acc)


@dataclass
class DnnNode:
    id: str
    modality: str
    tasks: list
    sample_size_mb: float
    dnn_size_mb: float


@dataclass(frozen=True)
class VehicleLink:
    vehicle_id: int
    throughput_mb: float = math.inf
    data_quality: float = 1.0


@dataclass
class MultiLayerGraph:
    tasks: dict  # name -> TaskSpec
    dnns: dict  # id -> DnnNode
    layer1: list  # (task, dnn, weight)
    layer2: list  # (dnn, modality)
    layer3: list  # (modality, VehicleLink)

    def dnn_of(self, task_name):
        for t, d, _ in self.layer1:
            if t == task_name:
                return d
        raise KeyError(task_name)

    def vehicles_for(self, modality):
        return [v for m, v in self.layer3 if m == modality]

    def stages_of(self, dnn_id):
        stages = {s for t in self.dnns[dnn_id].tasks for s in self.tasks[t].predictors}
        return [s for s in STAGES if s in stages]


def _jaccard(a, b):
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def build_graph(tasks, similarity_threshold=1.0, vehicles=None) -> MultiLayerGraph:
    """Cluster tasks into DNNs and wire the three layers.

    Tasks share a DNN when they use the same modality and the Jaccard
    similarity of their tags reaches ``similarity_threshold`` (1.0 means
    identical signatures). ``vehicles`` maps modality to ``VehicleLink``s; a
    modality without vehicles gets one unconstrained fleet link.
    """
    if not tasks:
        raise ValueError("need at least one task")
    task_map, dnns, layer1 = {}, {}, []
    for t in tasks:
        if not t.modality:
            raise ValueError(f"task {t.name!r} has no modality")
        if t.name in task_map:
            raise ValueError(f"duplicate task {t.name!r}")
        if "I" not in t.predictors:
            raise ValueError(f"task {t.name!r} needs a stage-I predictor")
        task_map[t.name] = t
        home = None
        for d in dnns.values():
            rep = task_map[d.tasks[0]]
            if d.modality == t.modality and _jaccard(rep.tags, t.tags) >= similarity_threshold:
                home = d
                break
        if home is None:
            home = DnnNode(f"dnn{len(dnns)}", t.modality, [], t.sample_size_mb, t.dnn_size_mb)
            dnns[home.id] = home
        home.tasks.append(t.name)
        layer1.append((t.name, home.id, t.weight))
    layer2 = [(d.id, d.modality) for d in dnns.values()]
    vehicles = vehicles or {}
    layer3 = []
    for modality in dict.fromkeys(d.modality for d in dnns.values()):
        links = list(vehicles.get(modality, ())) or [VehicleLink(-1)]
        layer3.extend((modality, v) for v in links)
    return MultiLayerGraph(task_map, dnns, layer1, layer2, layer3)


# ----------------------------------------------------------------- planning


@dataclass
class AllocationPlan:
    units: dict  # (dnn, stage) -> int
    allocation: Allocation
    objective: float
    task_accuracy: dict
    mode: str = "optimize"
    vehicle_shares: dict = field(default_factory=dict)

    def rows(self, graph: MultiLayerGraph):
        out = []
        for d in graph.dnns:
            names = graph.dnns[d].tasks
            wsum = sum(graph.tasks[t].weight for t in names) or 1.0
            done = {"I": 0, "II": 0, "III": 0}
            for s in STAGES:
                if (d, s) not in self.units:
                    continue
                done[s] = self.units[(d, s)]
                acc = sum(graph.tasks[t].weight * graph.tasks[t].final_accuracy(
                    done["I"], done["II"], done["III"]) for t in names) / wsum
                w, l = self.allocation.get(d, s)
                out.append({"dnn": d, "stage": s, "units": done[s], "wireless_mb": float(w),
                            "wireline_mb": float(l), "predicted_accuracy": acc})
        return out

    def to_dict(self, graph):
        return {"mode": self.mode, "objective": self.objective, "rows": self.rows(graph),
                "task_accuracy": dict(sorted(self.task_accuracy.items())),
                "vehicle_shares": {d: {str(k): v for k, v in s.items()}
                                   for d, s in sorted(self.vehicle_shares.items())}}

    def task_csv(self, graph) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task", "dnn", "weight", "predicted_accuracy"])
        for t, d, weight in graph.layer1:
            w.writerow([t, d, repr(float(weight)), repr(self.task_accuracy[t])])
        return buf.getvalue()


def plan_from_dict(d: dict, graph: MultiLayerGraph, cards) -> AllocationPlan:
    units = {(r["dnn"], r["stage"]): int(r["units"]) for r in d["rows"]}
    return _make_plan(graph, units, cards, d.get("mode", "optimize"))


class _Problem:
    """Unit-level view of an allocation instance."""

    def __init__(self, graph, budget, cards, stages):
        self.graph = graph
        self.cards = cards
        self.budget = {"wireless": budget.total("wireless"), "wireline": budget.total("wireline")}
        self.cells = [(d, s) for d in graph.dnns for s in graph.stages_of(d) if s in stages]
        self.cost = {}
        self.cap = {}
        for d, s in self.cells:
            card = cards[d]
            self.cost[(d, s)] = stage_usage(s, 1, card)
            if s == "I":
                links = graph.vehicles_for(graph.dnns[d].modality)
                thr = sum(v.throughput_mb for v in links)
                self.cap[(d, s)] = math.inf if math.isinf(thr) else int(exact(thr) // exact(card.sample_size_mb))
            else:
                self.cap[(d, s)] = math.inf

    def dnn_value(self, d, units):
        g = self.graph
        n, r2, r3 = units.get((d, "I"), 0), units.get((d, "II"), 0), units.get((d, "III"), 0)
        return sum(g.tasks[t].weight * g.tasks[t].final_accuracy(n, r2, r3) for t in g.dnns[d].tasks)

    def dnn_values(self, d, cells, vecs):
        """``dnn_value`` for each row of the integer array ``vecs`` (columns follow ``cells``)."""
        col = {s: vecs[:, i].astype(np.float64) for i, (_, s) in enumerate(cells)}
        zero = np.zeros(len(vecs))
        n, r2, r3 = col.get("I", zero), col.get("II", zero), col.get("III", zero)
        total = np.zeros(len(vecs))
        for name in self.graph.dnns[d].tasks:
            t = self.graph.tasks[name]
            p1 = t.predictors["I"]
            with np.errstate(divide="ignore"):
                acc = np.where(n >= 1, p1.a - p1.b * np.maximum(n, 1.0) ** (-p1.c), p1.floor)
            for s, r in (("II", r2), ("III", r3)):
                if s in t.predictors:
                    p = t.predictors[s]
                    acc = acc + np.where(r > 0, p.b * (1.0 - (r + 1.0) ** (-p.c)), 0.0)
            total += t.weight * np.minimum(t.cap(), acc)
        return total

    def objective(self, units):
        return sum(self.dnn_value(d, units) for d in self.graph.dnns)

    def used(self, units):
        w = l = Fraction(0)
        for c, k in units.items():
            cw, cl = self.cost[c]
            w += cw * k
            l += cl * k
        return w, l

    def fits(self, units, cell, used=None):
        w, l = used if used is not None else self.used(units)
        cw, cl = self.cost[cell]
        if units.get(cell, 0) + 1 > self.cap[cell]:
            return False
        return w + cw <= self.budget["wireless"] and l + cl <= self.budget["wireline"]

    def unit_cost(self, cell):
        cw, cl = self.cost[cell]
        return float(max(cw, cl))

    def fill(self, units, by_ratio=True):
        """Greedily add units until nothing fits. Mutates and returns ``units``."""
        w, l = self.used(units)
        while True:
            best, best_score = None, None
            for cell in self.cells:
                if not self.fits(units, cell, (w, l)):
                    continue
                d = cell[0]
                before = self.dnn_value(d, units)
                units[cell] = units.get(cell, 0) + 1
                gain = self.dnn_value(d, units) - before
                units[cell] -= 1
                score = gain / self.unit_cost(cell) if by_ratio else gain
                if best is None or score > best_score + 1e-15:
                    best, best_score = cell, score
            if best is None:
                return units
            units[best] = units.get(best, 0) + 1
            cw, cl = self.cost[best]
            w, l = w + cw, l + cl

    def polish(self, units, by_ratio=True):
        """Remove one unit from a cell, refill greedily; keep strict improvements."""
        current = self.objective(units)
        improved = True
        while improved:
            improved = False
            for cell in self.cells:
                if units.get(cell, 0) == 0:
                    continue
                trial = dict(units)
                trial[cell] -= 1
                for other in self.cells:
                    cand = dict(trial)
                    if other != cell and self.fits(cand, other):
                        cand[other] = cand.get(other, 0) + 1
                    cand = self.fill(cand, by_ratio)
                    val = self.objective(cand)
                    if val > current + 1e-9:
                        units, current, improved = cand, val, True
                        break
                if improved:
                    break
        return units

    def block_polish(self, units, max_vectors=200_000):
        """Re-solve pairs of DNNs jointly on the budget the others leave; repeat.

        The stage cap couples a DNN's stages, so the best plan can need a
        coordinated change that no single-unit move finds. DNNs whose unit
        vectors are too many to enumerate are left to the greedy result.
        """
        dnns = list(self.graph.dnns)
        blocks = [tuple(b) for b in itertools.combinations(dnns, min(2, len(dnns)))]
        current = self.objective(units)
        improved = True
        while improved:
            improved = False
            for block in blocks:
                cand = self._solve_block(units, block, max_vectors)
                if cand is None:
                    continue
                val = self.objective(cand)
                if val > current + 1e-9:
                    units, improved = self.polish(cand), True
                    current = self.objective(units)
        return units

    def _solve_block(self, units, block, max_vectors):
        rest = {c: k for c, k in units.items() if c[0] not in block}
        w0, l0 = self.used(rest)
        bw, bl = self.budget["wireless"] - w0, self.budget["wireline"] - l0
        # integer usage grid: scale costs and budgets by the common denominator
        scale = math.lcm(*(q.denominator for c in self.cells for q in self.cost[c]),
                         bw.denominator, bl.denominator)
        iw, il = int(bw * scale), int(bl * scale)
        if (iw + 1) * (il + 1) > max_vectors:
            return None
        tables = []  # per DNN: best value and unit vector for each exact usage
        for d in block:
            cells = [c for c in self.cells if c[0] == d]
            icost = np.array([[int(self.cost[c][0] * scale), int(self.cost[c][1] * scale)] for c in cells])
            lims = [int(min(self.cap[c], iw // cw if cw else math.inf, il // cl if cl else math.inf))
                    for c, (cw, cl) in zip(cells, icost)]
            if math.prod(l + 1 for l in lims) > max_vectors:
                return None
            vecs = np.array(list(iter_unit_vectors(lims)), dtype=np.int64).reshape(-1, len(cells))
            use = vecs @ icost
            vecs, use = vecs[(use[:, 0] <= iw) & (use[:, 1] <= il)], use[(use[:, 0] <= iw) & (use[:, 1] <= il)]
            vals = self.dnn_values(d, cells, vecs)
            # best vector per exact usage; the stable sort keeps the first of equal values
            order = np.lexsort((-vals, use[:, 1], use[:, 0]))
            first = np.ones(len(order), dtype=bool)
            first[1:] = np.any(np.diff(use[order], axis=0) != 0, axis=1)
            keep = order[first]
            value = np.full((iw + 1, il + 1), -np.inf)
            pick = np.full((iw + 1, il + 1), -1)
            value[use[keep, 0], use[keep, 1]] = vals[keep]
            pick[use[keep, 0], use[keep, 1]] = keep
            tables.append((cells, vecs, value, pick))
        (ca, va, vala, picka), *more = tables
        if not more:
            w, l = np.unravel_index(np.argmax(vala), vala.shape)
            return {**rest, **dict(zip(ca, va[picka[w, l]].tolist()))}
        (cb, vb, valb, pickb), = more
        merged = np.full_like(vala, -np.inf)
        from_b = np.zeros(vala.shape + (2,), dtype=np.int64)
        for wb, lb in zip(*np.nonzero(pickb >= 0)):
            cand = vala[: iw + 1 - wb, : il + 1 - lb] + valb[wb, lb]
            view = merged[wb:, lb:]
            better = cand > view + 1e-12
            view[better] = cand[better]
            from_b[wb:, lb:][better] = (wb, lb)
        w, l = np.unravel_index(np.argmax(merged), merged.shape)
        wb, lb = from_b[w, l]
        return {**rest, **dict(zip(ca, va[picka[w - wb, l - lb]].tolist())),
                **dict(zip(cb, vb[pickb[wb, lb]].tolist()))}


def _make_plan(graph, units, cards, mode) -> AllocationPlan:
    units = {c: int(k) for c, k in units.items()}
    alloc = Allocation()
    for (d, s), k in sorted(units.items(), key=lambda kv: (kv[0][0], STAGES.index(kv[0][1]))):
        w, l = stage_usage(s, k, cards[d])
        alloc.set(d, s, w, l)
    acc = {}
    for t, d, _ in graph.layer1:
        acc[t] = graph.tasks[t].final_accuracy(units.get((d, "I"), 0), units.get((d, "II"), 0),
                                               units.get((d, "III"), 0))
    objective = sum(graph.tasks[t].weight * a for t, a in acc.items())
    shares = {d: _vehicle_shares(graph, d, units.get((d, "I"), 0) * exact(cards[d].sample_size_mb))
              for d in graph.dnns}
    return AllocationPlan(units, alloc, objective, acc, mode, shares)


def _vehicle_shares(graph, dnn, total_mb):
    """Split stage-I upload across vehicles by data quality, capped by throughput."""
    links = graph.vehicles_for(graph.dnns[dnn].modality)
    remaining = float(total_mb)
    shares = {v.vehicle_id: 0.0 for v in links}
    active = [v for v in links if v.throughput_mb > 0]
    while remaining > 1e-12 and active:
        q = sum(v.data_quality for v in active)
        weights = {v.vehicle_id: (v.data_quality / q if q > 0 else 1.0 / len(active)) for v in active}
        spill = 0.0
        nxt = []
        for v in active:
            want = shares[v.vehicle_id] + remaining * weights[v.vehicle_id]
            if want >= v.throughput_mb:
                spill += want - v.throughput_mb
                shares[v.vehicle_id] = float(v.throughput_mb)
            else:
                shares[v.vehicle_id] = want
                nxt.append(v)
        remaining, active = spill, nxt
    return shares


def default_cards(graph, group_size=4, num_edges=1):
    return {d: CostCard(n.sample_size_mb, n.dnn_size_mb, group_size, num_edges)
            for d, n in graph.dnns.items()}


def _equal_units(problem: _Problem, graph, budget, cards, stages):
    cells_w = [c for c in problem.cells if c[1] in ("I", "II")]
    cells_l = [c for c in problem.cells if c[1] in ("I", "III")]
    task_count = {d: len(n.tasks) for d, n in graph.dnns.items()}
    n_tasks = sum(task_count.values())

    def share(total, cells, cell):
        per_dnn = {}
        for d, s in cells:
            per_dnn.setdefault(d, []).append(s)
        if cell[0] not in per_dnn or cell[1] not in per_dnn[cell[0]]:
            return Fraction(0)
        return total * Fraction(task_count[cell[0]], n_tasks) / len(per_dnn[cell[0]])

    units = {}
    for cell in problem.cells:
        d, s = cell
        w = share(budget.total("wireless"), cells_w, cell)
        l = share(budget.total("wireline"), cells_l, cell)
        card = cards[d]
        if s == "I":
            k = min(int(min(w, l) // exact(card.sample_size_mb)), problem.cap[cell])
        elif s == "II":
            k = int(w // card.unit_cost("II"))
        else:
            k = int(l // card.unit_cost("III"))
        units[cell] = k
    return units


def equal_allocation(graph, budget: ResourceBudget, cost_cards=None, stages=STAGES) -> AllocationPlan:
    """Split each medium evenly over tasks, then over the stages that use it."""
    cards = cost_cards or default_cards(graph)
    problem = _Problem(graph, budget, cards, stages)
    units = _equal_units(problem, graph, budget, cards, stages)
    for c in problem.cells:
        units.setdefault(c, 0)
    return _make_plan(graph, units, cards, "equal")


def allocate(graph, budget: ResourceBudget, cost_cards=None, stages=STAGES, polish=True) -> AllocationPlan:
    """Greedy marginal-gain allocation with a swap-and-refill polish.

    Three starts are polished: gain-per-MB greedy, raw-gain greedy and the
    equal split topped up greedily. Where enumeration is cheap the polish
    also re-solves pairs of DNNs jointly. The best objective wins; earlier starts win ties.
    """
    cards = cost_cards or default_cards(graph)
    problem = _Problem(graph, budget, cards, stages)
    starts = [problem.fill({}, by_ratio=True), problem.fill({}, by_ratio=False),
              problem.fill(_equal_units(problem, graph, budget, cards, stages), by_ratio=True)]
    best, best_val = None, None
    for units in starts:
        if polish:
            units = problem.block_polish(problem.polish(units))
        val = problem.objective(units)
        if best is None or val > best_val + 1e-9:
            best, best_val = units, val
    for c in problem.cells:
        best.setdefault(c, 0)
    return _make_plan(graph, best, cards, "optimize")


def exact_allocation(graph, budget: ResourceBudget, cost_cards=None, stages=STAGES,
                     max_units=30) -> AllocationPlan:
    """Exhaustive optimum over integer unit vectors (test oracle).

    Every DNN's feasible unit vectors (at most ``max_units`` per cell) are
    enumerated, then merged DNN by DNN over exact (wireless, wireline) usage
    states, keeping the best value per state. This visits every combination
    implicitly, since the objective is a sum over DNNs.
    """
    cards = cost_cards or default_cards(graph)
    problem = _Problem(graph, budget, cards, stages)
    if len(graph.dnns) > 3:
        raise OracleLimitError("oracle limit")
    bw, bl = problem.budget["wireless"], problem.budget["wireline"]
    limits = {}
    for cell in problem.cells:
        cw, cl = problem.cost[cell]
        lim = max_units
        if cw > 0:
            lim = min(lim, int(bw // cw))
        if cl > 0:
            lim = min(lim, int(bl // cl))
        if problem.cap[cell] != math.inf:
            lim = min(lim, problem.cap[cell])
        limits[cell] = lim

    # integer usage: scale every cost and budget by the common denominator
    scale = math.lcm(*(q.denominator for c in problem.cells for q in problem.cost[c]),
                     bw.denominator, bl.denominator)
    iw, il = int(bw * scale), int(bl * scale)
    icost = {c: (int(problem.cost[c][0] * scale), int(problem.cost[c][1] * scale)) for c in problem.cells}

    states = {(0, 0): 0.0}
    layers = []  # per DNN: (options, {state: (previous state, option index)})
    for d in graph.dnns:
        cells = [c for c in problem.cells if c[0] == d]
        by_usage = {}  # only the best vector per exact usage can be part of an optimum
        for vec in iter_unit_vectors([limits[c] for c in cells]):
            w = sum(icost[c][0] * k for c, k in zip(cells, vec))
            l = sum(icost[c][1] * k for c, k in zip(cells, vec))
            if w <= iw and l <= il:
                v = problem.dnn_value(d, dict(zip(cells, vec)))
                if (w, l) not in by_usage or v > by_usage[(w, l)][0] + 1e-12:
                    by_usage[(w, l)] = (v, dict(zip(cells, vec)))
        options = [(w, l, v, u) for (w, l), (v, u) in by_usage.items()]
        if len(options) * len(states) > 5_000_000:
            raise OracleLimitError("oracle limit")
        merged, back = {}, {}
        for (w0, l0), v0 in states.items():
            for k, (w, l, v, _u) in enumerate(options):
                key = (w0 + w, l0 + l)
                if key[0] > iw or key[1] > il:
                    continue
                if key not in merged or v0 + v > merged[key] + 1e-12:
                    merged[key] = v0 + v
                    back[key] = ((w0, l0), k)
        layers.append((options, back))
        states = merged
    key, best_val = None, None
    for k, val in states.items():
        if key is None or val > best_val + 1e-12:
            key, best_val = k, val
    best = {}
    for options, back in reversed(layers):
        key, k = back[key]
        best.update(options[k][3])
    for c in problem.cells:
        best.setdefault(c, 0)
    return _make_plan(graph, best, cards, "exact")


# ------------------------------------------------------------ vehicle quality


@dataclass
class VehicleScores:
    scores: dict
    warning: str = ""


def score_vehicles(modality, shards: dict, task: LearningTask, probe: Dataset | None,
                   validation: Dataset | None, epochs=150, learning_rate=0.5) -> VehicleScores:
    """Score each vehicle's shard by the validation gain it adds to a probe training set.

    Gains are clipped at 0 and normalized to sum to 1. Without a validation
    set every vehicle gets the same score and a warning is returned.
    """
    ids = list(shards)
    if validation is None or len(validation) == 0:
        return VehicleScores({v: 1.0 / len(ids) for v in ids}, f"no validation set for {modality}")
    w0 = task.init_values()

    def trained_metric(data):
        w = train_centralized(task, w0, data, epochs, learning_rate)
        return task.metric(w, validation)

    base = trained_metric(probe) if probe is not None and len(probe) else task.metric(w0, validation)
    gains = {}
    for v in ids:
        shard = shards[v]
        if shard is None or len(shard) == 0:
            gains[v] = 0.0
            continue
        data = Dataset.concat([probe, shard]) if probe is not None and len(probe) else shard
        gains[v] = max(0.0, trained_metric(data) - base)
    total = sum(gains.values())
    if total <= 0:
        return VehicleScores({v: 0.0 for v in ids}, "no vehicle improves the probe")
    return VehicleScores({v: g / total for v, g in gains.items()})


def plan_csv(rows) -> str:
    buf = io.StringIO()
    cols = ["dnn", "stage", "units", "wireless_mb", "wireline_mb", "predicted_accuracy"]
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def iter_unit_vectors(limits):
    return itertools.product(*[range(l + 1) for l in limits])
