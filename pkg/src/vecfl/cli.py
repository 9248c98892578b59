"""``vecfl`` command line.

Every subcommand reads one JSON config (``--config``; ``demo`` selects the
bundled demo) and writes its artifacts into ``--out``. Outputs carry the
config hash (a JSON key, or a leading ``# config_hash=...`` line in CSVs)
and are byte-identical across re-runs of the same config and seed.

Exit codes: 0 success, 2 config error, 3 missing upstream artifact,
4 infeasible (budget violation).
"""
from __future__ import annotations

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

from . import config as cfgmod
from .mlgra import plan_csv
from .netmodel import validate_allocation
from .pipeline import ConfigError, manifest, run_pipeline, stage_csv
from .predictor import FitError, fit, predict, read_calibration_csv
from .report import ladder_holds, report_csv, run_schemes
from .vrcsp import placement_from_dict, placement_to_dict, pose_dissimilarity
from .world import registry_from_dict, registry_to_dict, scenario_from_dict, scenario_to_dict

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_INFEASIBLE = 0, 2, 3, 4

FILES = {
    "scenario": "scenario.json",
    "registry": "registry.json",
    "placement": "placement.json",
    "baseline": "placement_density.json",
    "predictors": "predictors.json",
    "curves": "predictor_curves.csv",
    "allocation": "allocation.json",
    "allocation_csv": "allocation_tasks.csv",
    "manifest": "manifest.json",
    "stages": "stage_metrics.csv",
    "report": "report.csv",
}


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


# ------------------------------------------------------------------ helpers


def _write_json(path: Path, obj, chash):
    body = dict(obj)
    body["config_hash"] = chash
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, text, chash):
    path.write_text(f"# config_hash={chash}\n" + text)


def _read_json(out: Path, key):
    path = out / FILES[key]
    if not path.exists():
        raise CliError(EXIT_MISSING, f"missing upstream artifact: {path}")
    return json.loads(path.read_text())


def _load_run(args):
    if args.config == "demo":
        base = Path(str(resources.files("vecfl").joinpath("data")))
        path = base / "demo_config.json"
    else:
        path = Path(args.config)
        if not path.exists():
            raise CliError(EXIT_CONFIG, f"config file not found: {path}")
    try:
        cfg, base = cfgmod.load(path)
        if args.seed is not None:
            cfg["seed"] = args.seed
        run = cfgmod.assemble(cfg, base)
    except (cfgmod.ConfigSchemaError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    except FileNotFoundError as exc:
        raise CliError(EXIT_MISSING, f"missing upstream artifact: {exc.filename}") from None
    return run


def _with_scenario(run, out):
    run.scenario = scenario_from_dict(_read_json(out, "scenario"))
    return run


# ----------------------------------------------------------------- commands


def cmd_gen_scenario(run, out):
    _write_json(out / FILES["scenario"], scenario_to_dict(run.scenario), run.hash)


def cmd_collect_errors(run, out):
    _with_scenario(run, out)
    _write_json(out / FILES["registry"], registry_to_dict(run.registry()), run.hash)


def cmd_place_sensors(run, out):
    _with_scenario(run, out)
    registry = registry_from_dict(_read_json(out, "registry"))
    budget = run.cfg.get("sensors", {}).get("cost_budget", 1.0)
    placement = run.placement("vrcsp", registry)
    body = placement_to_dict(placement, registry, budget)
    routes = cfgmod.cav_routes(run.scenario, run.cfg.get("sensors", {}).get("route_spacing", 5.0))
    body["summary"]["pose_dissimilarity"] = pose_dissimilarity(
        placement, registry, [p for r in routes for p in r], cfgmod.tiers_of(run.cfg))
    _write_json(out / FILES["placement"], body, run.hash)
    _write_json(out / FILES["baseline"], placement_to_dict(run.placement("density"), registry, budget), run.hash)


def cmd_fit_predictor(run, out):
    rows, curve = {}, ["task,stage,resource,measured,fitted"]
    for t in run.cfg["tasks"]:
        for stage, src in sorted(t["predictors"].items()):
            if "calibration" not in src:
                continue
            path = cfgmod.resolve(run.base, src["calibration"])
            if not path.exists():
                raise CliError(EXIT_MISSING, f"missing upstream artifact: {path}")
            points = read_calibration_csv(path)
            try:
                pred, err = fit(points, "samples" if stage == "I" else "rounds")
            except FitError as exc:
                raise CliError(EXIT_CONFIG, f"cannot fit {path}: {exc}") from None
            rows[f"{t['name']}/{stage}"] = dict(pred.to_dict(), rmse=err)
            # accuracy-vs-resource curve, ready to plot
            for p in points:
                fitted = float(predict(pred, p.resource))
                curve.append(f"{t['name']},{stage},{p.resource},{p.observed_accuracy!r},{fitted!r}")
    _write_json(out / FILES["predictors"], {"predictors": rows}, run.hash)
    _write_csv(out / FILES["curves"], "\n".join(curve) + "\n", run.hash)


def cmd_allocate(run, out, mode=None):
    try:
        plan = run.plan(mode)
    except cfgmod.ConfigSchemaError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    check = validate_allocation(plan.allocation, run.budget)
    if not check.ok:
        lines = [f"{v.medium}: over budget by {v.excess!r} MB" for v in check.violations]
        raise CliError(EXIT_INFEASIBLE, "allocation violates the budget\n" + "\n".join(lines))
    _write_json(out / FILES["allocation"], plan.to_dict(run.graph), run.hash)
    _write_csv(out / FILES["allocation_csv"], plan.task_csv(run.graph) + "\n" + plan_csv(plan.rows(run.graph)),
               run.hash)


def cmd_run_pipeline(run, out):
    _with_scenario(run, out)
    plan = run.plan(plan_dict=_read_json(out, "allocation"))
    placement = None
    if run.flags.distillation:
        placement = placement_from_dict(_read_json(out, "placement"))
    try:
        pc = run.pipeline_config(plan, None, placement)
        result = run_pipeline(pc)
    except ConfigError as exc:
        code = EXIT_INFEASIBLE if "budget" in str(exc) else EXIT_CONFIG
        raise CliError(code, str(exc)) from None
    _write_json(out / FILES["manifest"], manifest(pc, result, run.hash), run.hash)
    _write_csv(out / FILES["stages"], stage_csv(pc, result), run.hash)


def cmd_report(run, out):
    _read_json(out, "manifest")
    _with_scenario(run, out)
    results = run_schemes(run)
    text = report_csv(results, [t.name for t in run.tasks])
    _write_csv(out / FILES["report"], text, run.hash)
    return ladder_holds(results)


COMMANDS = {
    "gen-scenario": cmd_gen_scenario,
    "collect-errors": cmd_collect_errors,
    "place-sensors": cmd_place_sensors,
    "fit-predictor": cmd_fit_predictor,
    "allocate": cmd_allocate,
    "run-pipeline": cmd_run_pipeline,
    "report": cmd_report,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="run config JSON, or 'demo'")
    common.add_argument("--out", default=".", help="artifact directory")
    common.add_argument("--seed", type=int, default=None, help="override the config's master seed (u64)")
    p = argparse.ArgumentParser(prog="vecfl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "allocate":
            sp.add_argument("--mode", choices=["optimize", "equal", "manual"], default=None)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    try:
        run = _load_run(args)
        out.mkdir(parents=True, exist_ok=True)
        fn = COMMANDS[args.command]
        if args.command == "allocate":
            fn(run, out, args.mode)
        else:
            fn(run, out)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
