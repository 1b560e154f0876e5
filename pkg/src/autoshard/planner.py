"""Cost-model-driven search over per-operator distributed attributes.

A plan assigns every operator one candidate OpDistAttr (mesh, placement and
input layouts); outputs follow from the propagation rules and every feed takes
the layout its first consumer asks for. Plans are scored with
``reduce_graph_cost`` and must respect per-device memory limits.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field

from .cluster import Cluster
from .completion import candidate_reqs, forward_output
from .cost_model import CostEstimate, PerfDatabase, reduce_graph_cost
from .errors import Infeasible, TooLarge
from .graph_ir import DistributedGraph, OpDistAttr, ProcessMesh, SerialGraph
from .reshard import insert_comm

BRUTE_FORCE_MAX_OPS = 6
BRUTE_FORCE_MAX_PROCESSES = 4


@dataclass(frozen=True)
class MeshOption:
    mesh: ProcessMesh
    placement: tuple  # sorted (process, device) pairs

    @property
    def placement_map(self) -> dict:
        return dict(self.placement)


@dataclass
class PlanConfig:
    meshes: tuple = ()  # MeshOption; empty = derived from the cluster
    memory_limits: object = None  # bytes for every device, or device -> bytes
    search: str = "exhaustive"
    beam_width: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.beam_width < 1:
            raise ValueError("beam width must be >= 1")
        if self.search not in ("exhaustive", "beam"):
            raise ValueError(f"unknown search {self.search!r}")


@dataclass
class Plan:
    graph: DistributedGraph
    estimate: CostEstimate
    choice: tuple
    stats: dict = field(default_factory=dict)

    @property
    def cost(self) -> float:
        return self.estimate.total_time


def default_meshes(cluster: Cluster) -> tuple:
    """Every compute device alone, plus one 1-d mesh per device kind with two or more devices.

    Process ids are global: the index of the device in the sorted device list.
    """
    devices = cluster.compute_devices()
    pid = {d: i for i, d in enumerate(devices)}
    out = [MeshOption(ProcessMesh((1,), (pid[d],)), ((pid[d], d),)) for d in devices]
    kinds = sorted({cluster.component(d).kind for d in devices})
    for kind in kinds:
        ds = cluster.compute_devices(kind)
        if len(ds) >= 2:
            out.append(MeshOption(ProcessMesh((len(ds),), tuple(pid[d] for d in ds)), tuple((pid[d], d) for d in ds)))
    return tuple(out)


def mesh_option(mesh: ProcessMesh, devices) -> MeshOption:
    return MeshOption(mesh, tuple(sorted(zip(mesh.process_ids, devices))))


def enumerate_candidates(g: SerialGraph, op, meshes) -> list:
    """All legal OpDistAttr for ``op`` over ``meshes`` with even shard sizes, in a fixed order."""
    shapes = [g.tensors[i].shape for i in op.inputs]
    out = []
    for opt in meshes:
        for reqs in candidate_reqs(op, shapes, opt.mesh, opt.placement):
            result = forward_output(op, reqs)
            out.append(OpDistAttr(opt.mesh, dict(zip(op.inputs, reqs)), {op.outputs[0]: result}, opt.placement))
    return out


def _limits(cfg: PlanConfig, cluster: Cluster) -> dict:
    limits = {}
    for d, comp in cluster.components.items():
        lim = comp.memory_bytes
        if isinstance(cfg.memory_limits, dict):
            if d in cfg.memory_limits:
                lim = min(lim, cfg.memory_limits[d])
        elif cfg.memory_limits is not None:
            lim = min(lim, cfg.memory_limits)
        limits[d] = lim
    return limits


class _Evaluator:
    def __init__(self, g: SerialGraph, cluster, db, cfg):
        self.g = g
        self.cluster = cluster
        self.db = db
        self.cfg = cfg
        self.meshes = tuple(cfg.meshes) or default_meshes(cluster)
        self.max_processes = len({p for opt in self.meshes for p in opt.mesh.process_ids})
        self.ops = g.ordered_ops()
        self.cands = [enumerate_candidates(g, op, self.meshes) for op in self.ops]
        self.limits = _limits(cfg, cluster)
        self.evaluated = 0
        self._cache = {}

    def graph(self, choice) -> DistributedGraph:
        k = len(choice)
        ops = self.ops[:k]
        op_attrs = {op.name: self.cands[i][c] for i, (op, c) in enumerate(zip(ops, choice))}
        tensors = {}
        for op in ops:
            oa = op_attrs[op.name]
            for t in op.inputs:
                if t in self.g.feeds and t not in tensors:
                    tensors[t] = oa.input_reqs[t]
            tensors[op.outputs[0]] = oa.output_reqs[op.outputs[0]]
        if k == len(self.ops):
            base = self.g
        else:
            used = set(tensors)
            base = SerialGraph(
                {n: t for n, t in self.g.tensors.items() if n in used},
                tuple(op for op in self.g.ops if op.name in op_attrs),
                frozenset(t for t in self.g.feeds if t in used),
                frozenset(t for t in self.g.fetches if t in used),
                tuple(op.name for op in ops),
            )
        return insert_comm(DistributedGraph(base, tensors, op_attrs))

    def estimate(self, choice) -> CostEstimate:
        choice = tuple(choice)
        if choice not in self._cache:
            self.evaluated += 1
            self._cache[choice] = reduce_graph_cost(self.graph(choice), self.cluster, self.db)
        return self._cache[choice]

    def fits(self, est: CostEstimate) -> bool:
        return all(b <= self.limits.get(d, float("inf")) for d, b in est.per_device_peak_memory.items())

    def plan(self, choice, stats) -> Plan:
        est = self.estimate(choice)
        return Plan(self.graph(choice), est, tuple(choice), stats)


def plan(g: SerialGraph, cluster: Cluster, db: PerfDatabase, cfg: PlanConfig = None) -> Plan:
    """Search for the cheapest feasible plan.

    ``exhaustive`` is a depth-first branch and bound in topological op order:
    a prefix is pruned once its own cost reaches the incumbent, which is safe
    because appending operators never shortens the key path. ``beam`` keeps
    the best ``w`` prefixes per depth, repeated for widths 1..w so that a wider
    beam never returns a worse plan.
    """
    cfg = cfg or PlanConfig()
    t0 = time.perf_counter()
    ev = _Evaluator(g, cluster, db, cfg)
    if any(not c for c in ev.cands):
        bad = next(op.name for op, c in zip(ev.ops, ev.cands) if not c)
        raise Infeasible(f"op {bad!r} has no legal candidate on the configured meshes")
    if cfg.search == "exhaustive":
        best = _branch_and_bound(ev)
    else:
        best = None
        for w in range(1, cfg.beam_width + 1):
            found = _beam(ev, w)
            if found is not None and (best is None or (found[0], found[1]) < (best[0], best[1])):
                best = found
    if best is None:
        raise Infeasible("no assignment satisfies the memory limits")
    stats = {"evaluated": ev.evaluated, "elapsed": time.perf_counter() - t0, "search": cfg.search}
    return ev.plan(best[1], stats)


def _branch_and_bound(ev: _Evaluator):
    n = len(ev.ops)
    best = [None]

    def visit(prefix):
        k = len(prefix)
        if k == n:
            est = ev.estimate(prefix)
            if ev.fits(est) and (best[0] is None or est.total_time < best[0][0]):
                best[0] = (est.total_time, tuple(prefix))
            return
        for c in range(len(ev.cands[k])):
            nxt = prefix + (c,)
            if best[0] is not None and k + 1 < n and ev.estimate(nxt).total_time >= best[0][0]:
                continue
            visit(nxt)

    if n == 0:
        est = ev.estimate(())
        return (est.total_time, ()) if ev.fits(est) else None
    visit(())
    return best[0]


def _beam(ev: _Evaluator, width: int):
    n = len(ev.ops)
    frontier = [()]
    for k in range(n):
        scored = []
        for prefix in frontier:
            for c in range(len(ev.cands[k])):
                nxt = prefix + (c,)
                est = ev.estimate(nxt)
                if k + 1 == n and not ev.fits(est):
                    continue
                scored.append((est.total_time, nxt))
        scored.sort()
        frontier = [s[1] for s in scored[:width]]
        if not frontier:
            return None
    if n == 0:
        est = ev.estimate(())
        return (est.total_time, ()) if ev.fits(est) else None
    best = frontier[0]
    return ev.estimate(best).total_time, best


def brute_force_plan(g: SerialGraph, cluster: Cluster, db: PerfDatabase, cfg: PlanConfig = None) -> Plan:
    """Global optimum by evaluating every full assignment (test oracle)."""
    cfg = cfg or PlanConfig()
    t0 = time.perf_counter()
    ev = _Evaluator(g, cluster, db, cfg)
    if len(ev.ops) > BRUTE_FORCE_MAX_OPS or ev.max_processes > BRUTE_FORCE_MAX_PROCESSES:
        raise TooLarge(
            f"brute force is limited to {BRUTE_FORCE_MAX_OPS} ops and {BRUTE_FORCE_MAX_PROCESSES} processes"
        )
    best = None
    for choice in itertools.product(*[range(len(c)) for c in ev.cands]):
        est = ev.estimate(choice)
        if not ev.fits(est):
            continue
        if best is None or est.total_time < best[0]:
            best = (est.total_time, choice)
    if best is None:
        raise Infeasible("no assignment satisfies the memory limits")
    stats = {"evaluated": ev.evaluated, "elapsed": time.perf_counter() - t0, "search": "brute_force"}
    return ev.plan(best[1], stats)


def plan_from_annotations(dg: DistributedGraph, cluster: Cluster, db: PerfDatabase) -> CostEstimate:
    """Score a hand-written (complete) distributed graph with the same model."""
    return reduce_graph_cost(insert_comm(dg), cluster, db)
