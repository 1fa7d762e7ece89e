"""Command-line entry point: ``hmtplan {plan,simulate,pareto,audit,calibrate}``.

Exit codes: 0 success, 1 usage or schema error, 2 planning error, 3 plan
produced but infeasible under the given budgets, 4 a checked property failed
(scenario manifest assertion or front audit).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from importlib import resources
from typing import Any, Mapping, Sequence

import jsonschema

from hmtplan.adapt.context import EVENT_SCHEMA, ContextEvent, load_trace, parse_trace
from hmtplan.adapt.loop import LoopConfig, Timeline, build_front, run_loop, write_timeline
from hmtplan.adapt.pareto import Candidate, DesignSpace, Evaluator, ParetoFront, audit, dominates, nondominated
from hmtplan.cost.calibrate import calibrate, read_measurements
from hmtplan.cost.estimate import DeploymentPlan, estimate_materialized, materialize
from hmtplan.cost.profiles import Fleet, load_fleet
from hmtplan.errors import HmtplanError, SchemaError, StructuralError
from hmtplan.ir.graph import ComputationGraph
from hmtplan.ir.training import make_training_graph
from hmtplan.ir.zoo import build_zoo_model
from hmtplan.variants.accuracy import load_accuracy_table
from hmtplan.variants.ops import VariantConfig

EXIT_OK, EXIT_SCHEMA, EXIT_PLAN, EXIT_INFEASIBLE, EXIT_CHECK = 0, 1, 2, 3, 4
PLAN_VERSION = 1
FRONT_COLUMNS = ("candidate_id", "A", "E", "T", "M")

_LIST = {"type": "array"}
OPTIMIZER_SCHEMA: dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "optimizer_version": {"const": 1},
        "space": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "families": {"type": "object"},
                "exits": _LIST,
                "placements": {"type": "array", "items": {"type": "string",
                                                          "pattern": "^(local|offload|split(:[0-9.]+)?)$"}},
                "quant_bits": {"type": "array", "items": {"enum": [4, 8, 16, 32]}},
                "fusion": {"type": "array", "items": {"type": "string"}},
                "parallel": {"type": "array", "items": {"type": "boolean"}},
            },
        },
        "search": {"enum": ["evolve", "exact"]},
        "population": {"type": "integer", "minimum": 4},
        "generations": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
        "norm": {"enum": ["minmax", "log"]},
        "tie_band": {"type": "number", "minimum": 0},
        "pairwise": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
        "reference": {"type": "object"},
        "accuracy": {"type": "string"},
    },
}
ASSERTION_TYPES = ("memory_non_increasing", "within_budget", "offloaded", "energy_le", "feasible")
MANIFEST_SCHEMA: dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "required": ["scenario_version", "name", "model", "fleet", "trace", "optimizer", "assertions"],
    "properties": {
        "scenario_version": {"const": 1},
        "name": {"type": "string"},
        "description": {"type": "string"},
        "model": {"type": "string"},
        "fleet": {"type": "string"},
        "trace": {"type": "string"},
        "optimizer": {"type": "string"},
        "accuracy": {"type": "string"},
        "assertions": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["type"],
                "properties": {
                    "type": {"enum": list(ASSERTION_TYPES)},
                    "step": {"type": "string"},
                    "than": {"type": "string"},
                    "expect": {"type": "boolean"},
                },
            },
        },
    },
}


class UsageError(HmtplanError):
    pass


# -- helpers -----------------------------------------------------------------------


def resolve_seed(arg: int | None) -> int:
    if arg is not None:
        return arg
    env = os.environ.get("HMTPLAN_SEED")
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"HMTPLAN_SEED must be an integer, got {env!r}") from None


def _read_json(path: str) -> Any:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise SchemaError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not JSON ({exc})") from None


def _validate(doc: Any, schema: Mapping[str, Any], what: str) -> None:
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as exc:
        raise SchemaError(f"{what}: {exc.message}") from None


def load_graph(spec: str, base: str | None = None) -> ComputationGraph:
    """``zoo:<name>`` or a graph JSON file (relative paths resolve against ``base``)."""
    if spec.startswith("zoo:"):
        try:
            return build_zoo_model(spec)
        except StructuralError as exc:
            raise SchemaError(str(exc)) from None
    path = spec if base is None or os.path.isabs(spec) else os.path.join(base, spec)
    if not os.path.isfile(path):
        raise SchemaError(f"graph file not found: {spec}")
    with open(path, encoding="utf-8") as fh:
        return ComputationGraph.from_json(fh.read())


def _fleet(spec: str, base: str | None = None) -> Fleet:
    if base is not None and not os.path.isabs(spec) and os.path.isfile(os.path.join(base, spec)):
        return load_fleet(os.path.join(base, spec))
    return load_fleet(spec)


def _dump(doc: Any) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _clean(x: Any) -> Any:
    """Replace non-finite floats so documents stay strict JSON."""
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    return x


def _write(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


# -- plan ---------------------------------------------------------------------------


def cmd_plan(args: argparse.Namespace) -> int:
    seed = resolve_seed(args.seed)
    graph = load_graph(args.model)
    fleet = load_fleet(args.fleet)
    event = None
    if args.context:
        doc = _read_json(args.context)
        _validate(doc, EVENT_SCHEMA, "context snapshot")
        event = ContextEvent.from_dict(doc)
        if not event.resolved:
            raise SchemaError("context snapshot budgets must be absolute (no percentages)")
    if args.device is not None:
        fleet = fleet.restrict([args.device])
    if event is not None:
        fleet = fleet.with_context(event.freq_scale, event.bandwidth)
    pressure = event.background_pressure if event is not None else 0.0
    variant = VariantConfig(())
    if args.variant:
        variant = VariantConfig.from_dict(_read_json(args.variant))
    if args.exit is not None:
        variant = VariantConfig(variant.ops, args.exit)
    if args.training:
        graph = make_training_graph(graph)
    placement = args.placement
    if args.device is not None:
        placement = "local"
    plan = DeploymentPlan(variant=variant, quant_bits=args.quant_bits, fusion_rules=args.fuse,
                          parallel=args.parallel, placement=placement, device=args.device, split=args.split)
    home = args.device or fleet.home
    mem_budget = args.budget_mem
    if mem_budget is None and event is not None:
        mem_budget = event.mem_budget
    time_budget = args.budget_time
    if time_budget is None and event is not None:
        time_budget = event.time_budget
    mp = materialize(plan, graph, fleet, pressure, int(mem_budget) if mem_budget is not None and args.training else None)
    accuracy = load_accuracy_table(args.accuracy)
    est = estimate_materialized(mp, fleet, pressure, accuracy)
    limit_mem = mem_budget if mem_budget is not None else fleet.devices[home].mem_capacity_bytes
    feasible = est.memory <= limit_mem and (time_budget is None or est.latency <= time_budget)
    if mp.training is not None and not mp.training.feasible:
        feasible = False
    doc = {
        "plan_version": PLAN_VERSION,
        "model": args.model,
        "fleet": fleet.to_dict(),
        "seed": seed,
        "budgets": {"M_bgt": limit_mem, "T_bgt": time_budget},
        "feasible": feasible,
        "estimate": est.to_dict(),
        "deployment": mp.to_dict(),
    }
    _write(args.out, _dump(_clean(doc)))
    return EXIT_OK if feasible else EXIT_INFEASIBLE


# -- scenarios ----------------------------------------------------------------------


def _scenario_dir(name: str) -> str:
    if os.path.isdir(name):
        return name
    if os.path.isfile(name):
        return os.path.dirname(os.path.abspath(name))
    ref = resources.files("hmtplan.data").joinpath("scenarios", name)
    if not ref.is_dir():
        raise SchemaError(f"scenario {name!r} not found (bundled: tableV_budgets, case_study_e1e2e3)")
    return str(ref)


def load_scenario(name: str) -> dict[str, Any]:
    """Validate a scenario bundle and every file it references; nothing is planned here."""
    base = _scenario_dir(name)
    manifest = _read_json(os.path.join(base, "manifest.json"))
    _validate(manifest, MANIFEST_SCHEMA, "scenario manifest")
    graph = load_graph(manifest["model"], base)
    fleet = _fleet(manifest["fleet"], base)
    trace = load_trace(os.path.join(base, manifest["trace"]))
    opt = _read_json(os.path.join(base, manifest["optimizer"]))
    _validate(opt, OPTIMIZER_SCHEMA, "optimizer config")
    labels = {e.label for e in trace}
    for a in manifest["assertions"]:
        for key in ("step", "than"):
            if key in a and a[key] not in labels:
                raise SchemaError(f"assertion refers to unknown step label {a[key]!r}")
    accuracy = load_accuracy_table(manifest.get("accuracy", opt.get("accuracy", "imagenet")))
    return {"base": base, "manifest": manifest, "graph": graph, "fleet": fleet, "trace": trace,
            "optimizer": opt, "accuracy": accuracy}


def check_assertions(timeline: Timeline, assertions: Sequence[Mapping[str, Any]]) -> list[dict[str, Any]]:
    steps = timeline.steps
    by_label = {s.event.label: s for s in steps}
    out = []
    for a in assertions:
        kind = a["type"]
        if kind == "memory_non_increasing":
            ms = [s.estimate.memory for s in steps]
            ok = all(x >= y for x, y in zip(ms, ms[1:]))
            detail = f"M per step: {ms}"
        elif kind == "within_budget":
            bad = [s.event.label or repr(s.event.t) for s in steps
                   if not (s.estimate.memory <= s.event.mem_budget and s.estimate.latency <= s.event.time_budget)]
            ok = not bad
            detail = f"over budget at: {bad}" if bad else "all steps within M_bgt and T_bgt"
        elif kind == "feasible":
            bad = [s.event.label or repr(s.event.t) for s in steps if not s.selection.feasible]
            ok = not bad
            detail = f"infeasible at: {bad}" if bad else "every step feasible"
        elif kind == "offloaded":
            s = by_label[a["step"]]
            want = a.get("expect", True)
            ok = s.estimate.offloaded == want
            detail = f"{a['step']}: offloaded={s.estimate.offloaded} devices={list(s.estimate.devices)}"
        else:  # energy_le
            s, t = by_label[a["step"]], by_label[a["than"]]
            ok = s.estimate.energy <= t.estimate.energy
            detail = f"E({a['step']})={s.estimate.energy!r} vs E({a['than']})={t.estimate.energy!r}"
        out.append({"assertion": dict(a), "pass": bool(ok), "detail": detail})
    return out


def cmd_simulate(args: argparse.Namespace) -> int:
    seed = resolve_seed(args.seed)
    if args.scenario:
        sc = load_scenario(args.scenario)
    else:
        if not (args.model and args.fleet and args.trace and args.config):
            raise UsageError("simulate needs --scenario, or --model, --fleet, --trace and --config")
        opt = _read_json(args.config)
        _validate(opt, OPTIMIZER_SCHEMA, "optimizer config")
        sc = {"graph": load_graph(args.model), "fleet": load_fleet(args.fleet), "trace": load_trace(args.trace),
              "optimizer": opt, "manifest": {"name": "adhoc", "assertions": []},
              "accuracy": load_accuracy_table(opt.get("accuracy", "imagenet"))}
    config = LoopConfig.from_dict(sc["optimizer"], seed)
    timeline = run_loop(sc["graph"], sc["fleet"], sc["trace"], config, sc["accuracy"])
    write_timeline(timeline, sc["graph"], sc["fleet"], args.out)
    verdicts = check_assertions(timeline, sc["manifest"]["assertions"])
    report = {"scenario": sc["manifest"]["name"], "seed": seed, "steps": len(timeline.steps),
              "front_size": len(timeline.front.candidates), "assertions": verdicts,
              "pass": all(v["pass"] for v in verdicts)}
    _write(os.path.join(args.out, "verdicts.json"), _dump(report))
    for v in verdicts:
        sys.stdout.write(f"{'PASS' if v['pass'] else 'FAIL'} {v['assertion']['type']}: {v['detail']}\n")
    return EXIT_OK if report["pass"] else EXIT_CHECK


# -- pareto / audit -------------------------------------------------------------------


def front_csv(front: Sequence[Candidate]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FRONT_COLUMNS)
    for c in front:
        e = c.estimate
        w.writerow([c.id, repr(e.accuracy), repr(e.energy), repr(e.latency), str(e.memory)])
    return buf.getvalue()


def cmd_pareto(args: argparse.Namespace) -> int:
    seed = resolve_seed(args.seed)
    graph = load_graph(args.model)
    fleet = load_fleet(args.fleet)
    opt = _read_json(args.config) if args.config else {}
    _validate(opt, OPTIMIZER_SCHEMA, "optimizer config")
    if args.exact:
        opt = dict(opt, search="exact")
    config = LoopConfig.from_dict(opt, seed)
    accuracy = load_accuracy_table(args.accuracy or opt.get("accuracy", "imagenet"))
    space = DesignSpace.from_config(graph, config.space, fleet)
    evaluator = Evaluator(graph, fleet, accuracy)
    front = build_front(space, evaluator, config)
    doc = front.to_dict()
    doc["search"] = config.search
    doc["seed"] = seed
    code = EXIT_OK
    if args.compare:
        exact = build_front(space, evaluator, LoopConfig.from_dict(dict(opt, search="exact"), seed))
        got, want = set(front.ids()), set(exact.ids())
        doc["oracle"] = {
            "exact_size": len(want),
            "subset": got <= want,
            "coverage": len(got & want) / len(want) if want else 1.0,
        }
        if not got <= want:
            code = EXIT_CHECK
    os.makedirs(args.out, exist_ok=True)
    _write(os.path.join(args.out, "front.json"), _dump(_clean(doc)))
    _write(os.path.join(args.out, "front.csv"), front_csv(front.candidates))
    return code


def cmd_audit(args: argparse.Namespace) -> int:
    doc = _read_json(args.front)
    if not isinstance(doc, dict) or doc.get("front_version") != 1 or not isinstance(doc.get("candidates"), list):
        raise SchemaError("front file must have front_version 1 and a candidates list")
    pts = []
    for c in doc["candidates"]:
        try:
            pts.append((c["id"], float(c["estimate"]["A"]), float(c["estimate"]["E"])))
        except (KeyError, TypeError, ValueError):
            raise SchemaError("every front candidate needs an id and an estimate with A and E") from None
    bad = [(a[0], b[0]) for a in pts for b in pts
           if a is not b and a[1] >= b[1] and a[2] <= b[2] and (a[1] > b[1] or a[2] < b[2])]
    report = {"candidates": len(pts), "violations": [list(p) for p in bad], "pass": not bad}
    _write(args.out, _dump(report))
    return EXIT_OK if not bad else EXIT_CHECK


# -- calibrate -------------------------------------------------------------------------


def cmd_calibrate(args: argparse.Namespace) -> int:
    fleet = load_fleet(args.fleet)
    if args.device not in fleet.devices:
        raise SchemaError(f"device {args.device!r} is not in the fleet")
    try:
        with open(args.measurements, encoding="utf-8") as fh:
            rows = read_measurements(fh.read())
    except FileNotFoundError:
        raise SchemaError(f"file not found: {args.measurements}") from None
    res = calibrate(rows, fleet.devices[args.device], args.sm_ratio)
    doc = {"calibration_version": 1, "device": args.device, "rows": len(rows), **res.to_dict(),
           "profile": res.apply(fleet.devices[args.device]).to_dict()}
    _write(args.out, _dump(_clean(doc)))
    return EXIT_OK


# -- argument parsing --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hmtplan", description="Cross-level deployment planner for DL models.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--seed", type=int, default=None, help="overrides HMTPLAN_SEED (default 0)")

    sp = sub.add_parser("plan", help="plan and estimate one deployment")
    sp.add_argument("--model", required=True, help="zoo:<name> or a graph JSON file")
    sp.add_argument("--fleet", required=True, help="fleet JSON file or bundled fleet name")
    sp.add_argument("--context", help="context snapshot JSON (one trace event, absolute budgets)")
    sp.add_argument("--fuse", default="all", help="fusion rules: all, none, or a comma list")
    sp.add_argument("--quant-bits", type=int, default=32, choices=(4, 8, 16, 32))
    sp.add_argument("--device", help="restrict the plan to one device")
    sp.add_argument("--placement", default="local", choices=("local", "offload", "split"))
    sp.add_argument("--split", type=float, default=0.5, help="weight share kept at home for --placement split")
    sp.add_argument("--parallel", action="store_true", help="enable inter-operator parallelism")
    sp.add_argument("--variant", help="variant config JSON ({ops: [...], exit_index})")
    sp.add_argument("--exit", type=int, default=None, help="early-exit index")
    sp.add_argument("--training", action="store_true", help="plan the training graph")
    sp.add_argument("--budget-mem", type=float, default=None, help="memory budget in bytes")
    sp.add_argument("--budget-time", type=float, default=None, help="latency budget in seconds")
    sp.add_argument("--accuracy", default="imagenet", help="accuracy table (bundled name or JSON file)")
    sp.add_argument("--out", default="-", help="output file (default stdout)")
    common(sp)
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("simulate", help="run the adaptation loop over a trace")
    sp.add_argument("--scenario", help="bundled scenario name or bundle directory")
    sp.add_argument("--model")
    sp.add_argument("--fleet")
    sp.add_argument("--trace")
    sp.add_argument("--config", help="optimizer config JSON")
    sp.add_argument("--out", required=True, help="output directory")
    common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("pareto", help="build the accuracy/energy Pareto front")
    sp.add_argument("--model", required=True)
    sp.add_argument("--fleet", required=True)
    sp.add_argument("--config", help="optimizer config JSON")
    mode = sp.add_mutually_exclusive_group()
    mode.add_argument("--exact", action="store_true", help="exhaustive front")
    mode.add_argument("--evolve", action="store_true", help="evolutionary front (default)")
    sp.add_argument("--compare", action="store_true", help="also build the exhaustive front and report coverage")
    sp.add_argument("--accuracy", default=None)
    sp.add_argument("--out", required=True, help="output directory")
    common(sp)
    sp.set_defaults(func=cmd_pareto)

    sp = sub.add_parser("audit", help="check a front file for dominated members")
    sp.add_argument("--front", required=True)
    sp.add_argument("--out", default="-")
    common(sp)
    sp.set_defaults(func=cmd_audit)

    sp = sub.add_parser("calibrate", help="fit cost coefficients from measurements")
    sp.add_argument("--measurements", required=True, help="CSV with header C,M,eps,T,E")
    sp.add_argument("--fleet", required=True)
    sp.add_argument("--device", required=True)
    sp.add_argument("--sm-ratio", type=float, default=None, help="delta_sm / delta1 (default 2 on GPU, 0 on CPU)")
    sp.add_argument("--out", default="-")
    common(sp)
    sp.set_defaults(func=cmd_calibrate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_SCHEMA
    try:
        return args.func(args)
    except (SchemaError, UsageError) as exc:
        sys.stderr.write(f"hmtplan: error: {exc}\n")
        return EXIT_SCHEMA
    except (HmtplanError, ValueError) as exc:
        sys.stderr.write(f"hmtplan: planning failed: {exc}\n")
        return EXIT_PLAN


if __name__ == "__main__":
    sys.exit(main())
