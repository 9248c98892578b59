"""Regenerate the bundled calibration CSVs for the demo config.

Each DNN is swept one stage at a time around the equal-split operating
point; the CSVs feed the predictors referenced by ``demo_config.json``.

    python scripts/make_calibration.py [OUT_DIR]
"""
import copy
import sys
from pathlib import Path

from vecfl.calibrate import DEFAULT_ROUNDS, DEFAULT_SAMPLES, points_csv, sweep
from vecfl.config import assemble
from vecfl.demo import demo_config

PLACEHOLDER = {"a": 90.0, "b": 40.0, "c": 0.5}


def main(out):
    cfg = copy.deepcopy(demo_config())
    for t in cfg["tasks"]:  # the equal split does not read predictors
        t["predictors"] = {s: dict(PLACEHOLDER) for s in ("I", "II", "III")}
    run = assemble(cfg)
    plan = run.plan("equal", ("I", "II", "III"))
    pc = run.pipeline_config(plan, None, run.placement())
    for d in run.graph.dnns:
        name = run.graph.dnns[d].tasks[0]
        base = {"I": plan.units[(d, "I")], "II": plan.units[(d, "II")]}
        grids = cfg.get("calibration", {})
        samples, rounds = grids.get("samples", DEFAULT_SAMPLES), grids.get("rounds", DEFAULT_ROUNDS)
        for stage, grid in (("I", samples), ("II", rounds), ("III", rounds)):
            pts = sweep(pc, d, stage, grid, base)
            kind = "samples" if stage == "I" else "rounds + 1"
            (out / f"calib_{name}_{stage}.csv").write_text(points_csv(pts, f"{name} stage {stage}; resource = {kind}"))
            print(name, stage, [round(a, 2) for _, a in pts])


if __name__ == "__main__":
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).resolve().parents[1] / "src/vecfl/data")
