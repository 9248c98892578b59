"""Accuracy-vs-resource sweeps that feed the inverse-power predictors.

Stage I points are (samples, metric). Stage II and III points are
``(rounds + 1, metric)`` measured on top of a fixed operating point for the
earlier stages, so a fitted ``a - b n^-c`` gives the stage increment
``b (1 - (r+1)^-c)`` directly.
"""
from __future__ import annotations

import csv
import io
from dataclasses import replace

from .mlgra import plan_from_dict
from .netmodel import ResourceBudget, UsageLedger
from .pipeline import PipelineConfig, build_world, run_stage1, run_stage2, run_stage3

DEFAULT_SAMPLES = (25, 50, 100, 200, 400, 800, 1600)
DEFAULT_ROUNDS = (0, 1, 2, 4, 8, 16, 32)

_BIG = ResourceBudget(1e12, 1e12)


def _dnn_metric(report, config, dnn):
    names = config.graph.dnns[dnn].tasks
    return sum(report.metric_after[t] for t in names) / len(names)


def _run(config, world, units):
    plan = plan_from_dict({"rows": [{"dnn": d, "stage": s, "units": u} for (d, s), u in units.items()]},
                          config.graph, config.cards)
    cfg = replace(config, plan=plan, budget=_BIG)
    ledger = UsageLedger(plan.allocation)
    r1, pre = run_stage1(cfg, world, ledger)
    r2, edge, _ = run_stage2(cfg, world, ledger, pre)
    r3, _ = run_stage3(cfg, world, ledger, edge)
    return r1, r2, r3, cfg


def sweep(config: PipelineConfig, dnn, stage, grid, base_units: dict):
    """Metric of ``dnn`` as one stage's units vary over ``grid``, others fixed at ``base_units``."""
    world = build_world(config)
    points = []
    for g in grid:
        units = {(dnn, s): int(base_units.get(s, 0)) for s in ("I", "II", "III")}
        units[(dnn, stage)] = int(g)
        if stage == "I":
            units[(dnn, "II")] = units[(dnn, "III")] = 0
        elif stage == "II":
            units[(dnn, "III")] = 0
        r1, r2, r3, cfg = _run(config, world, units)
        rep = {"I": r1, "II": r2, "III": r3}[stage]
        resource = int(g) if stage == "I" else int(g) + 1
        points.append((resource, _dnn_metric(rep, cfg, dnn)))
    return points


def points_csv(points, comment="") -> str:
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["resource", "accuracy"])
    for n, acc in points:
        w.writerow([n, repr(float(acc))])
    return buf.getvalue()
