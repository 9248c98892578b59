"""Vehicle-edge-cloud topology, stage capacities and exact usage accounting.

Megabyte quantities are floats at the API boundary but all arithmetic runs on
``fractions.Fraction`` built from the float's shortest decimal repr, so
``0.3 / 0.1`` is exactly 3 and totals reconcile to the last byte.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable

STAGES = ("I", "II", "III")
MEDIA = ("wireless", "wireline")


def exact(x) -> Fraction:
    """Exact rational value of a MB quantity."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"non-finite quantity {x!r}")
    return Fraction(repr(x))


def _floor_div(num, den) -> int:
    return int(math.floor(exact(num) / exact(den)))


# ---------------------------------------------------------------- topology


@dataclass(frozen=True)
class VehicleNode:
    id: int
    home_edge_id: int
    data_quality: float = 1.0
    throughput_mb: float = math.inf

    def __post_init__(self):
        if not self.data_quality >= 0:
            raise ValueError("data_quality must be >= 0")


@dataclass(frozen=True)
class EdgeNode:
    id: int


@dataclass(frozen=True)
class CloudNode:
    id: int = 0


@dataclass
class NetworkTopology:
    vehicles: list[VehicleNode]
    edges: list[EdgeNode]
    cloud: CloudNode = field(default_factory=CloudNode)

    def __post_init__(self):
        if not self.edges:
            raise ValueError("topology needs at least one edge")
        edge_ids = {e.id for e in self.edges}
        for v in self.vehicles:
            if v.home_edge_id not in edge_ids:
                raise ValueError(f"vehicle {v.id} has unknown home edge {v.home_edge_id}")

    def vehicles_at(self, edge_id):
        return [v for v in self.vehicles if v.home_edge_id == edge_id]


@dataclass(frozen=True)
class ResourceBudget:
    wireless_total: float
    wireline_total: float

    def __post_init__(self):
        if self.wireless_total < 0 or self.wireline_total < 0:
            raise ValueError("budgets must be non-negative")

    def total(self, medium):
        return exact(self.wireless_total if medium == "wireless" else self.wireline_total)


@dataclass(frozen=True)
class CostCard:
    sample_size_mb: float
    dnn_size_mb: float
    group_size: int = 4
    num_edges: int = 1

    def __post_init__(self):
        if not (self.sample_size_mb > 0 and self.dnn_size_mb > 0):
            raise ValueError("sizes must be > 0")
        if self.group_size < 1 or self.num_edges < 1:
            raise ValueError("group_size and num_edges must be >= 1")

    def unit_cost(self, stage) -> Fraction:
        """MB of one resource unit: a sample (I) or an FL round (II, III)."""
        if stage == "I":
            return exact(self.sample_size_mb)
        if stage == "II":
            return self.group_size * exact(self.dnn_size_mb)
        if stage == "III":
            return self.num_edges * exact(self.dnn_size_mb)
        raise ValueError(f"unknown stage {stage!r}")

    def scaled(self, fraction) -> "CostCard":
        """Card whose parameter exchange is ``fraction`` of the full DNN."""
        size = exact(self.dnn_size_mb) * Fraction(fraction)
        return CostCard(self.sample_size_mb, size, self.group_size, self.num_edges)


# -------------------------------------------------------------- capacities


def stage1_capacity(alloc_wireless, alloc_wireline, sample_size_mb) -> int:
    """Samples that fit through both the wireless and the wireline share."""
    if not exact(sample_size_mb) > 0:
        raise ValueError("sample_size_mb must be > 0")
    return _floor_div(min(exact(alloc_wireless), exact(alloc_wireline)), sample_size_mb)


def stage2_capacity(alloc_wireless, group_size, dnn_size_mb) -> int:
    """Edge FL rounds: each round uploads one model per group vehicle."""
    if group_size < 1 or not exact(dnn_size_mb) > 0:
        raise ValueError("group_size >= 1 and dnn_size_mb > 0 required")
    return _floor_div(alloc_wireless, group_size * exact(dnn_size_mb))


def stage3_capacity(alloc_wireline, num_edges, dnn_size_mb) -> int:
    """Cloud FL rounds: each round uploads one model per edge server."""
    if num_edges < 1 or not exact(dnn_size_mb) > 0:
        raise ValueError("num_edges >= 1 and dnn_size_mb > 0 required")
    return _floor_div(alloc_wireline, num_edges * exact(dnn_size_mb))


def stage_capacity(stage, wireless, wireline, card: CostCard) -> int:
    if stage == "I":
        return stage1_capacity(wireless, wireline, card.sample_size_mb)
    if stage == "II":
        return stage2_capacity(wireless, card.group_size, card.dnn_size_mb)
    return stage3_capacity(wireline, card.num_edges, card.dnn_size_mb)


def stage_usage(stage, units, card: CostCard) -> tuple[Fraction, Fraction]:
    """(wireless, wireline) MB consumed by ``units`` of a stage.

    Stage I samples relay vehicle -> edge -> cloud, so they load both media.
    """
    cost = card.unit_cost(stage) * int(units)
    if stage == "I":
        return cost, cost
    if stage == "II":
        return cost, Fraction(0)
    return Fraction(0), cost


# -------------------------------------------------------------- allocation


@dataclass
class Allocation:
    """MB per (task, stage); values are kept exact."""

    rows: dict = field(default_factory=dict)

    def set(self, task, stage, wireless_mb=0, wireline_mb=0):
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        w, l = exact(wireless_mb), exact(wireline_mb)
        if w < 0 or l < 0:
            raise ValueError("allocations must be non-negative")
        self.rows[(task, stage)] = (w, l)
        return self

    def get(self, task, stage) -> tuple[Fraction, Fraction]:
        return self.rows.get((task, stage), (Fraction(0), Fraction(0)))

    def total(self, medium) -> Fraction:
        i = MEDIA.index(medium)
        return sum((v[i] for v in self.rows.values()), Fraction(0))

    def tasks(self):
        return sorted({t for t, _ in self.rows}, key=str)

    def to_rows(self):
        return [
            {"task": t, "stage": s, "wireless_mb": float(w), "wireline_mb": float(l)}
            for (t, s), (w, l) in sorted(self.rows.items(), key=lambda kv: (str(kv[0][0]), STAGES.index(kv[0][1])))
        ]

    @classmethod
    def from_rows(cls, rows):
        alloc = cls()
        for r in rows:
            alloc.set(r["task"], r["stage"], r.get("wireless_mb", 0), r.get("wireline_mb", 0))
        return alloc


@dataclass(frozen=True)
class Violation:
    medium: str
    excess: float


@dataclass
class ValidationResult:
    ok: bool
    violations: list[Violation]
    slack: dict

    def __bool__(self):
        return self.ok


def validate_allocation(alloc: Allocation, budget: ResourceBudget) -> ValidationResult:
    """Check both media against the budget; the boundary itself is feasible."""
    violations, slack = [], {}
    for medium in MEDIA:
        used, total = alloc.total(medium), budget.total(medium)
        slack[medium] = float(total - used)
        if used > total:
            violations.append(Violation(medium, float(used - total)))
    return ValidationResult(not violations, violations, slack)


# ------------------------------------------------------------------ ledger


class AllocationExhausted(RuntimeError):
    def __init__(self, task, stage, medium):
        super().__init__(f"allocation exhausted for task={task} stage={stage} medium={medium}")
        self.task, self.stage, self.medium = task, stage, medium


@dataclass(frozen=True)
class UsageEvent:
    task: object
    stage: str
    medium: str
    mb: float
    direction: str = "up"


class UsageLedger:
    """Running per-(task, stage, medium) totals, optionally capped by an allocation.

    Downlink events are recorded with 0 MB: only uplink traffic is metered.
    """

    def __init__(self, allocation: Allocation | None = None):
        self.allocation = allocation
        self.totals: dict = {}
        self.events: list[UsageEvent] = []

    def record(self, task, stage, medium, mb, direction="up"):
        if medium not in MEDIA:
            raise ValueError(f"unknown medium {medium!r}")
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        amount = exact(mb) if direction == "up" else Fraction(0)
        if amount < 0:
            raise ValueError("usage must be non-negative")
        key = (task, stage, medium)
        new = self.totals.get(key, Fraction(0)) + amount
        if self.allocation is not None:
            cap = self.allocation.get(task, stage)[MEDIA.index(medium)]
            if new > cap:
                raise AllocationExhausted(task, stage, medium)
        self.totals[key] = new
        self.events.append(UsageEvent(task, stage, medium, float(amount), direction))
        return new

    def total(self, medium=None, stage=None, task=None) -> Fraction:
        return sum(
            (v for (t, s, m), v in self.totals.items()
             if (medium is None or m == medium) and (stage is None or s == stage)
             and (task is None or t == task)),
            Fraction(0),
        )

    def snapshot(self) -> dict:
        return {f"{t}/{s}/{m}": float(v) for (t, s, m), v in sorted(self.totals.items(), key=str)}

    def to_rows(self):
        rows = {}
        for (t, s, m), v in self.totals.items():
            row = rows.setdefault((t, s), {"task": t, "stage": s, "wireless_mb": 0.0, "wireline_mb": 0.0})
            row[f"{m}_mb"] = float(v)
        return [rows[k] for k in sorted(rows, key=lambda k: (str(k[0]), STAGES.index(k[1])))]


def account_usage(events: Iterable, allocation: Allocation | None = None) -> UsageLedger:
    """Replay ``events`` (UsageEvent or (task, stage, medium, mb[, direction]) tuples)."""
    ledger = UsageLedger(allocation)
    for ev in events:
        if isinstance(ev, UsageEvent):
            ledger.record(ev.task, ev.stage, ev.medium, ev.mb, ev.direction)
        else:
            ledger.record(*ev)
    return ledger


ROW_COLUMNS = ["task", "stage", "wireless_mb", "wireline_mb"]


def rows_to_csv(rows, columns=ROW_COLUMNS) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()
