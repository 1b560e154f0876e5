"""``autoshard`` command line: plan, verify, simulate, evaluate and elastic-sim.

Inputs may be paths or ``fixture:NAME`` references to the bundled data.
Exit codes: 0 ok, 1 input error, 2 infeasible, 3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import fixtures
from .actor_sim import MODES, compare_configs, compare_modes, fuse_tasks, simulate, table_csv
from .cluster import Cluster, load_cluster
from .completion import complete
from .cost_model import PerfDatabase, reduce_graph_cost
from .errors import (
    AutoshardError,
    Infeasible,
    NoFeasibleScheme,
    ShardShapeMismatch,
    TooLarge,
    UndeliveredMessage,
)
from .graph_ir import (
    DistributedGraph,
    annotate,
    attr_from_json,
    graph_from_json,
    graph_to_json,
    load_graph,
    op_attr_from_json,
)
from .numeric_exec import ReplicaDivergence, load_array_dir, max_abs_diff, random_feeds, run_distributed, run_serial
from .planner import PlanConfig, plan
from .reshard import comm_to_json, insert_comm

log = logging.getLogger("autoshard")

EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE, EXIT_VERIFY = 0, 1, 2, 3
VERIFY_TOL = 1e-9
CONFIG_NAMES = ("heter", "cpu_only", "gpu_only")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


class InputError(AutoshardError):
    pass


# --------------------------------------------------------------------------- output


def _round(doc):
    if isinstance(doc, float):
        return float(f"{doc:.9g}")
    if isinstance(doc, dict):
        return {str(k): _round(v) for k, v in doc.items()}
    if isinstance(doc, (list, tuple)):
        return [_round(v) for v in doc]
    if isinstance(doc, np.generic):
        return _round(doc.item())
    return doc


def dumps(doc) -> str:
    return json.dumps(_round(doc), sort_keys=True, indent=1) + "\n"


def _write(out: Path, name: str, text: str):
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text)
    log.info("wrote %s", out / name)


# --------------------------------------------------------------------------- inputs


def _fixture_ref(ref):
    if isinstance(ref, str) and ref.startswith("fixture:"):
        return fixtures.load_fixture(ref.split(":", 1)[1])
    return None


def _load_graph(ref) -> DistributedGraph:
    fx = _fixture_ref(ref)
    if fx is not None:
        if fx.graph is None:
            raise InputError(f"fixture {fx.name!r} has no graph")
        return fx.graph
    path = _existing(ref)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError:
        return load_graph(path)  # reports the parse error
    if isinstance(doc, dict) and "choice" in doc and "graph" in doc:
        return graph_from_json(doc["graph"])  # a plan.json written by ``plan``
    return graph_from_json(doc)


def _load_cluster(ref) -> Cluster:
    fx = _fixture_ref(ref)
    if fx is not None:
        return fx.cluster
    return load_cluster(_existing(ref))


def _load_db(ref) -> PerfDatabase:
    if ref is None:
        return PerfDatabase()
    fx = _fixture_ref(ref)
    if fx is not None:
        if fx.db is None:
            raise InputError(f"fixture {fx.name!r} has no perf database")
        return fx.db
    return PerfDatabase.load(_existing(ref))


def _load_feeds(ref, g):
    fx = _fixture_ref(ref)
    if fx is not None:
        return fx.feeds
    return load_array_dir(_existing(ref))


def _existing(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise InputError(f"no such file: {path}")
    return p


def _apply_annotations(dg: DistributedGraph, path) -> DistributedGraph:
    doc = json.loads(_existing(path).read_text())
    tensors = dict(dg.tensor_attrs)
    ops = dict(dg.op_attrs)
    for n, a in (doc.get("tensors") or {}).items():
        tensors[n] = attr_from_json(a, f"annotations.tensors.{n}")
    for n, a in (doc.get("ops") or {}).items():
        ops[n] = op_attr_from_json(a, f"annotations.ops.{n}")
    return annotate(dg.base, {"tensors": tensors, "ops": ops})


def _completed(dg: DistributedGraph) -> DistributedGraph:
    return dg if dg.is_complete() else complete(dg)


# --------------------------------------------------------------------------- commands


def cmd_plan(args) -> int:
    dg = _load_graph(args.graph)
    cluster = _load_cluster(args.cluster)
    db = _load_db(args.perf_db)
    cfg = PlanConfig(memory_limits=args.memory_limit, search=args.search, beam_width=args.beam_width, seed=args.seed)
    result = plan(dg.base, cluster, db, cfg)
    out = Path(args.out)
    plan_doc = {
        "graph": graph_to_json(DistributedGraph(result.graph.base, result.graph.tensor_attrs, result.graph.op_attrs)),
        "choice": list(result.choice),
        "search": cfg.search,
        "evaluated": result.stats["evaluated"],
        "comm": [comm_to_json(c) for c in result.graph.inserted_comm],
    }
    _write(out, "plan.json", dumps(plan_doc))
    _write(out, "cost.json", dumps(result.estimate.to_json()))
    print(f"plan cost {result.cost:.9g} s after {result.stats['evaluated']} evaluations")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    dg = _completed(_load_graph(args.graph))
    cluster = _load_cluster(args.cluster)
    db = _load_db(args.perf_db)
    est = reduce_graph_cost(dg, cluster, db)
    _write(Path(args.out), "cost.json", dumps(est.to_json()))
    print(f"estimated time {est.total_time:.9g} s")
    return EXIT_OK


def _drop_first_transfer(dg: DistributedGraph) -> DistributedGraph:
    comms = list(dg.inserted_comm)
    for i, c in enumerate(comms):
        if c.payload:
            comms[i] = replace(c, payload=tuple(c.payload[1:]))
            return replace(dg, inserted_comm=tuple(comms))
    raise InputError("nothing to corrupt: the plan moves no data")


def cmd_verify(args) -> int:
    dg = _load_graph(args.graph)
    if args.annotations:
        dg = _apply_annotations(dg, args.annotations)
    dg = insert_comm(_completed(dg))
    feeds = _load_feeds(args.feeds, dg.base) if args.feeds else random_feeds(dg.base, args.seed)
    if args.inject_fault:
        dg = _drop_first_transfer(dg)
    serial = run_serial(dg.base, feeds)
    try:
        dist = run_distributed(dg, feeds)
    except (UndeliveredMessage, ShardShapeMismatch, ReplicaDivergence) as exc:
        print(f"distributed run failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    diff = max_abs_diff(serial, dist)
    report = {"max_abs_diff": diff, "tolerance": VERIFY_TOL, "ok": diff <= VERIFY_TOL,
              "fetches": sorted(serial.fetches)}
    if args.out:
        _write(Path(args.out), "verify.json", dumps(report))
    print(f"max abs diff {diff:.3e}")
    return EXIT_OK if diff <= VERIFY_TOL else EXIT_VERIFY


def cmd_simulate(args) -> int:
    dg = _load_graph(args.graph)
    cluster = _load_cluster(args.cluster)
    db = _load_db(args.perf_db)
    out = Path(args.out)
    if args.compare_modes:
        names = [m.strip() for m in args.compare_modes.split(",") if m.strip()]
        if all(n in CONFIG_NAMES for n in names):
            configs = fixtures.recsys_configs()
            missing = [n for n in names if n not in configs]
            if missing:
                raise InputError(f"unknown configuration(s) {missing}")
            report = compare_configs(dg.base, {n: configs[n] for n in names}, cluster, db,
                                     batch=args.batch, microbatches=args.microbatches)
        elif all(n in MODES for n in names):
            report = compare_modes(_completed(dg), cluster, db, names, batch=args.batch)
        else:
            raise InputError(f"--compare-modes takes executor modes {MODES} or configurations {CONFIG_NAMES}")
        _write(out, "throughput.csv", table_csv(report["table"]))
        _write(out, "compare.json", dumps({
            "table": report["table"],
            "traces": {k: tr.to_json() for k, tr in sorted(report["traces"].items())},
        }))
        for row in report["table"]:
            print(f"{row['config']}: {row['throughput']:.6g} samples/s")
        return EXIT_OK
    dg = _completed(dg)
    tasks = fuse_tasks(dg, args.granularity, cluster, db)
    trace = simulate(tasks, cluster, db, args.mode, seed=args.seed)
    _write(out, "trace.json", dumps(trace.to_json()))
    _write(out, "trace.csv", trace.to_csv())
    print(f"{args.mode}: makespan {trace.makespan:.9g} s over {len(tasks)} tasks")
    return EXIT_OK


def _read_events(path):
    events = []
    for i, line in enumerate(_existing(path).read_text().splitlines()):
        line = line.strip()
        if not line:
            continue
        try:
            doc = json.loads(line)
            events.append((doc["event"], doc["devices"]))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise InputError(f"{path}:{i + 1}: expected {{\"event\": ..., \"devices\": [...]}} ({exc})") from exc
    return events


DEFAULT_EVENTS = [
    ("device_failed", ["D2"]),
    ("resources_revoked", ["D3", "D4"]),
    ("resources_granted", ["D5"]),
    ("resources_granted", ["D6"]),
]


def cmd_elastic_sim(args) -> int:
    from .elastic import (
        DiskStorage, ElasticJob, KVStore, MemoryStorage, elastic_step, init_state, mlp_scheme, run_with_failure,
    )

    out = Path(args.out)
    rng = np.random.default_rng(args.seed)
    init = {"W1": rng.standard_normal((6, 8)), "W2": rng.standard_normal((8, 4))}
    init.update({k + "@m": np.zeros_like(v) for k, v in list(init.items())})
    big = mlp_scheme("dp4", ["D0", "D1", "D2", "D3"], "data_parallel", level=2)
    small = mlp_scheme("mp2", ["D0", "D1"], "model_parallel", level=1)
    table = [small, big]

    events = _read_events(args.events) if args.events else DEFAULT_EVENTS
    job = ElasticJob(big, init_state(big, init), {"D0", "D1", "D2", "D3", "D4"})
    actions = []
    for ev in events:
        before = job.state.global_weights()
        rec = elastic_step(job, ev, table)
        after = job.state.global_weights()
        doc = rec.to_json()
        doc["weights_preserved"] = all(np.array_equal(before[n], after[n]) for n in before)
        doc["resources"] = sorted(job.scheme.resources)
        actions.append(doc)

    if args.level == 3:
        shutil.rmtree(out / "checkpoints", ignore_errors=True)  # a rerun must not see stale saves

    def storage(tag):
        return MemoryStorage() if args.level == 2 else DiskStorage(out / "checkpoints" / tag)

    ref = run_with_failure(big, init, args.steps, None, args.level, storage("reference"), KVStore(), args.seed)
    run = run_with_failure(big, init, args.steps, args.fail_at, args.level, storage("recovered"), KVStore(), args.seed)
    ref_w, run_w = ref.global_weights(), run.global_weights()
    drill = {
        "steps": args.steps, "fail_at": args.fail_at, "level": args.level,
        "bitwise_equal": all(np.array_equal(ref_w[n], run_w[n]) for n in ref_w),
        "weight_sums": {n: float(np.sum(w)) for n, w in run_w.items()},
    }
    _write(out, "elastic.json", dumps({"actions": actions, "failure_drill": drill}))
    for a in actions:
        print(f"{a['event'][0]} {a['event'][1]}: {a['action']} -> {a['to_scheme']}")
    print(f"failure at step {args.fail_at}: recovered run {'matches' if drill['bitwise_equal'] else 'DIFFERS FROM'} reference")
    return EXIT_OK if drill["bitwise_equal"] else EXIT_VERIFY


# --------------------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="autoshard", description="Plan, check and simulate distributed execution of dataflow graphs.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, graph=True, cluster=True):
        if graph:
            sp.add_argument("--graph", required=True, help="graph JSON, plan.json or fixture:NAME")
        if cluster:
            sp.add_argument("--cluster", required=True, help="cluster JSON or fixture:NAME")
            sp.add_argument("--perf-db", dest="perf_db", help="performance database JSON or fixture:NAME")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default="autoshard-out", help="output directory")

    sp = sub.add_parser("plan", help="search a distributed plan")
    common(sp)
    sp.add_argument("--search", choices=("exhaustive", "beam"), default="exhaustive")
    sp.add_argument("--beam-width", dest="beam_width", type=int, default=8)
    sp.add_argument("--memory-limit", dest="memory_limit", type=int, help="bytes per device")
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("verify", help="compare distributed execution with the serial reference")
    common(sp, cluster=False)
    sp.add_argument("--annotations", help="extra annotations JSON {tensors, ops}")
    sp.add_argument("--feeds", help="directory of .arr feeds or fixture:NAME (default: seeded random)")
    sp.add_argument("--inject-fault", dest="inject_fault", action="store_true", help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("simulate", help="event-driven executor simulation")
    common(sp)
    sp.add_argument("--mode", choices=MODES, default="actor_async")
    sp.add_argument("--granularity", choices=("per_op", "per_stage"), default="per_op")
    sp.add_argument("--compare-modes", dest="compare_modes",
                    help="comma list of executor modes, or of heter,cpu_only,gpu_only")
    sp.add_argument("--batch", type=int, default=128)
    sp.add_argument("--microbatches", type=int, default=4)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("evaluate", help="cost estimate of an annotated graph")
    common(sp)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("elastic-sim", help="scripted elasticity events and a failure drill")
    common(sp, graph=False, cluster=False)
    sp.add_argument("--events", help="JSON lines of {event, devices}")
    sp.add_argument("--steps", type=int, default=20)
    sp.add_argument("--fail-at", dest="fail_at", type=int, default=10)
    sp.add_argument("--level", type=int, choices=(2, 3), default=2)
    sp.set_defaults(func=cmd_elastic_sim)
    return p


def _setup_logging():
    level = os.environ.get("AUTOSHARD_LOG", "error").lower()
    logging.basicConfig(
        level={"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(level, logging.ERROR),
        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr,
    )


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (Infeasible, TooLarge, NoFeasibleScheme) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (AutoshardError, ValueError, OSError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
