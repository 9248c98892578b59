"""Scheme comparison: the training ladder and the per-task radar data."""
from __future__ import annotations

import csv
import io
from dataclasses import replace

from .pipeline import run_pipeline

# (scheme, allocation mode, active stages, distillation, placement, device selection)
SCHEMES = [
    ("centralized", "equal", ("I",), False, "none", False),
    ("edge_fl", "equal", ("I", "II"), False, "none", False),
    ("cloud_fl", "equal", ("I", "II", "III"), False, "none", False),
    ("vrcsp", "equal", ("I", "II", "III"), True, "vrcsp", False),
    ("mlgra", "optimize", ("I", "II", "III"), True, "vrcsp", False),
    ("device_selection", "optimize", ("I", "II", "III"), True, "vrcsp", True),
    ("density_placement", "equal", ("I", "II", "III"), True, "density", False),
]
LADDER = ["centralized", "edge_fl", "cloud_fl", "vrcsp", "mlgra"]
COLUMNS = ["scheme", "task", "metric", "weighted_metric", "in_ladder"]


def run_schemes(run, schemes=SCHEMES):
    """Run every scheme on the same world; returns ``{scheme: PipelineResult}``."""
    registry = run.registry()
    placements = {"none": None, "vrcsp": run.placement("vrcsp", registry),
                  "density": run.placement("density")}
    out = {}
    for name, mode, stages, distill, where, select in schemes:
        plan = run.plan(mode, stages)
        flags = replace(run.flags, distillation=distill, device_selection=select)
        pc = run.pipeline_config(plan, flags, placements[where])
        out[name] = run_pipeline(pc)
    return out


def ladder_holds(results) -> bool:
    vals = [results[s].weighted_metric for s in LADDER]
    return all(b > a for a, b in zip(vals, vals[1:]))


def report_csv(results, task_names) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for name, res in results.items():
        for t in task_names:
            w.writerow([name, t, repr(res.task_metrics[t]), repr(res.weighted_metric), int(name in LADDER)])
    return buf.getvalue()
