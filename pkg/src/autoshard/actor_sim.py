"""Discrete-event simulation of the actor, synchronous-collective and push-pull executors.

Every device (and every link) is an actor with a fixed static run order:
tasks are ranked by (graph level, task id) and an actor starts its next task
as soon as that task's inputs have arrived and the actor is free. Push-pull
server devices instead serve ready tasks first-come first-served. The
synchronous executor adds a barrier between graph levels.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

from .cluster import Cluster, link_profile
from .cost_model import PerfDatabase, compute_op_cost, merge_comm_ops, node_costs, p2p_time
from .errors import Deadlock, InvalidFusion
from .graph_ir import DistributedGraph, SerialGraph
from .reshard import insert_comm

MODES = ("actor_async", "sync_collective", "async_push_pull")


@dataclass(frozen=True)
class Task:
    id: int
    ops: tuple
    device: str = None  # None for communication tasks, which only hold links
    cost: float = 0.0
    preds: tuple = ()
    links: tuple = ()  # undirected link edges held while running
    out_bytes: int = 0  # payload shipped to successors on other devices
    role: str = "worker"  # "server" marks parameter-server work for push-pull
    stage: int = None
    edge_costs: tuple = ()  # (pred id, seconds, links) overriding the implicit message model


@dataclass(frozen=True)
class Stage:
    ops: tuple
    devices: tuple
    mode: str = "actor_async"


@dataclass(frozen=True)
class PipelineSpec:
    stages: tuple
    microbatches: int = 1

    def __post_init__(self):
        if self.microbatches < 1:
            raise ValueError("microbatches must be >= 1")
        seen = set()
        for st in self.stages:
            if seen & set(st.ops):
                raise ValueError("pipeline stages must not share ops")
            seen |= set(st.ops)


@dataclass
class SimTrace:
    mode: str
    start: dict  # task id -> seconds
    end: dict
    device: dict  # task id -> device (None for comm)
    link_busy: dict = field(default_factory=dict)  # edge -> [(start, end, item label)]
    makespan: float = 0.0
    link_wait: float = 0.0
    messages: list = field(default_factory=list)  # (src task, dst task, start, end)

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "makespan": self.makespan,
            "link_wait": self.link_wait,
            "tasks": [
                {"id": t, "device": self.device[t], "start": self.start[t], "end": self.end[t]}
                for t in sorted(self.start)
            ],
            "links": {
                f"{a}|{b}": [[s, e, str(lbl)] for s, e, lbl in spans]
                for (a, b), spans in sorted(self.link_busy.items())
            },
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task", "start", "end", "device"])
        for t in sorted(self.start):
            w.writerow([t, repr(self.start[t]), repr(self.end[t]), self.device[t] or ""])
        return buf.getvalue()


# --------------------------------------------------------------------------- task construction


def task_levels(tasks) -> dict:
    by_id = {t.id: t for t in tasks}
    level = {}

    def lv(i):
        if i not in level:
            level[i] = 1 + max((lv(p) for p in by_id[i].preds), default=-1)
        return level[i]

    for t in sorted(by_id):
        lv(t)
    return level


def _comm_links(cluster, comm):
    devs = sorted({x.src_device for x in comm.payload} | {x.dst_device for x in comm.payload} | {d for _, d in comm.devices})
    devs = [d for d in devs if d is not None]
    edges = set()
    if comm.kind in ("p2p_send_recv", "broadcast", "all_gather"):
        pairs = {(x.src_device, x.dst_device) for x in comm.payload}
    else:
        pairs = {(a, b) for i, a in enumerate(devs) for b in devs[i + 1:]}
    for a, b in pairs:
        if a is None or b is None or a == b:
            continue
        edges.update(link_profile(cluster, a, b).edges)
    return tuple(sorted(edges))


def fuse_tasks(dg: DistributedGraph, granularity="per_op", cluster: Cluster = None, db: PerfDatabase = None) -> list:
    """Build the task DAG.

    ``granularity`` is ``"per_op"``, ``"per_stage"`` (group compute by device)
    or a mapping op name -> group label. Fused groups must live on one device
    and be convex in the op DAG, otherwise InvalidFusion. Communication that
    connects two fused groups becomes a message on the edge between them.
    """
    if not dg.inserted_comm:
        dg = insert_comm(dg)
    dag = merge_comm_ops(dg)
    costs = node_costs(dag, dg, cluster, db) if cluster is not None else {n: 0.0 for n in dag.nodes}
    order = [n for n in dag.order() if dag.nodes[n].kind != "feed"]

    if granularity == "per_op":
        ids = {n: i for i, n in enumerate(order)}
        tasks = []
        for n in order:
            node = dag.nodes[n]
            links = _comm_links(cluster, node.ref) if node.kind == "comm" and cluster is not None else ()
            tasks.append(Task(
                ids[n], (n,), node.device, costs[n],
                tuple(sorted({ids[p] for p in node.preds if p in ids})), links,
            ))
        return tasks

    if granularity == "per_stage":
        label = {n: dag.nodes[n].device for n in order if dag.nodes[n].kind == "compute"}
    elif isinstance(granularity, dict):
        label = {}
        for n in order:
            node = dag.nodes[n]
            if node.kind == "compute":
                if node.ref.name not in granularity:
                    raise InvalidFusion(f"op {node.ref.name!r} has no group in the custom map")
                label[n] = ("g", granularity[node.ref.name])
    else:
        raise ValueError(f"unknown granularity {granularity!r}")

    group_dev = {}
    for n, lab in label.items():
        dev = dag.nodes[n].device
        if group_dev.setdefault(lab, dev) != dev:
            raise InvalidFusion(f"group {lab!r} mixes devices {group_dev[lab]!r} and {dev!r}")

    # Comm nodes between two groups become edge messages; the rest stay tasks.
    preds_of = {n: list(dag.nodes[n].preds) for n in order}
    succs = {n: [] for n in order}
    for n in order:
        for p in preds_of[n]:
            if p in succs:
                succs[p].append(n)

    def endpoints(n, direction):
        out = set()
        for m in (preds_of[n] if direction == "up" else succs[n]):
            if m in label:
                out.add(label[m])
            elif m in preds_of:
                out.add(("node", m))
        return out

    units = {}
    for n in order:
        units[n] = label[n] if n in label else ("node", n)
    messages = {}  # (from unit, to unit) -> (seconds, links)
    for n in order:
        if n in label:
            continue
        ups, downs = endpoints(n, "up"), endpoints(n, "down")
        if ups and downs and all(u in group_dev for u in ups) and all(d in group_dev for d in downs):
            if ups == downs and len(ups) == 1:
                units[n] = next(iter(ups))  # same-group comm is absorbed into the group
                continue
            links = _comm_links(cluster, dag.nodes[n].ref) if cluster is not None else ()
            for u in ups:
                for d in downs:
                    if u != d:
                        old = messages.get((u, d), (0.0, ()))
                        messages[(u, d)] = (max(old[0], costs[n]), tuple(sorted(set(old[1]) | set(links))))
            units[n] = None

    unit_order = []
    for n in order:
        u = units[n]
        if u is not None and u not in unit_order:
            unit_order.append(u)
    unit_edges = {u: set() for u in unit_order}
    for n in order:
        for p in preds_of[n]:
            if p not in units:
                continue
            src_units = [units[p]] if units[p] is not None else [
                label.get(q, ("node", q)) for q in preds_of[p] if q in units
            ]
            dst = units[n]
            if dst is None:
                continue
            for su in src_units:
                if su is not None and su != dst:
                    unit_edges[dst].add(su)
    for (u, d) in messages:
        unit_edges[d].add(u)
    _check_acyclic(unit_order, unit_edges)
    ids = {u: i for i, u in enumerate(_topo(unit_order, unit_edges))}
    tasks = []
    for u in sorted(ids, key=ids.get):
        members = [n for n in order if units[n] == u]
        dev = group_dev.get(u)
        links = ()
        if dev is None and len(members) == 1 and dag.nodes[members[0]].kind == "comm" and cluster is not None:
            links = _comm_links(cluster, dag.nodes[members[0]].ref)
        edge_costs = tuple(
            (ids[src], secs, lk) for (src, dst), (secs, lk) in sorted(messages.items(), key=lambda kv: ids[kv[0][0]])
            if dst == u
        )
        tasks.append(Task(
            ids[u], tuple(members), dev, sum(costs[m] for m in members),
            tuple(sorted(ids[p] for p in unit_edges[u])), links, edge_costs=edge_costs,
        ))
    return tasks


def _topo(nodes, edges):
    pos = {u: i for i, u in enumerate(nodes)}
    indeg = {u: len(edges[u]) for u in nodes}
    users = {u: [] for u in nodes}
    for u in nodes:
        for p in edges[u]:
            users[p].append(u)
    ready = sorted((u for u in nodes if indeg[u] == 0), key=pos.get)
    out = []
    while ready:
        u = ready.pop(0)
        out.append(u)
        for v in users[u]:
            indeg[v] -= 1
            if indeg[v] == 0:
                ready.append(v)
                ready.sort(key=pos.get)
    return out


def _check_acyclic(nodes, edges):
    if len(_topo(nodes, edges)) != len(nodes):
        raise InvalidFusion("fused groups are not contiguous: the group graph has a cycle")


def expand_microbatches(tasks, m: int) -> list:
    """m copies of the task DAG; copy k of task i gets id k*n + i."""
    n = len(tasks)
    ids = sorted(t.id for t in tasks)
    if ids != list(range(n)):
        raise ValueError("microbatch expansion needs task ids 0..n-1")
    out = []
    for k in range(m):
        off = k * n
        for t in sorted(tasks, key=lambda t: t.id):
            out.append(replace(
                t, id=off + t.id, preds=tuple(off + p for p in t.preds),
                edge_costs=tuple((off + p, s, l) for p, s, l in t.edge_costs),
            ))
    return out


# --------------------------------------------------------------------------- engine


@dataclass
class _Item:
    key: tuple
    label: object  # task id, or ("msg", src, dst)
    cost: float
    device: str
    links: tuple
    preds: list
    group: object = None  # barrier group, None = no barrier
    level: int = 0
    fifo: bool = False


def simulate(tasks, cluster: Cluster = None, db: PerfDatabase = None, mode="actor_async",
             pipeline: PipelineSpec = None, seed=0) -> SimTrace:
    """Event-driven schedule of ``tasks``; see the module docstring for the policy.

    Cross-device edges between device-bound tasks pay a point-to-point message
    of the producer's ``out_bytes`` (priced from the cluster) unless an
    explicit ``edge_costs`` entry overrides it. ``seed`` is accepted for
    interface symmetry; the schedule is fully deterministic.
    """
    if mode not in MODES:
        raise ValueError(f"unknown executor mode {mode!r}")
    tasks = list(tasks)
    stage_mode = {}
    if pipeline is not None:
        for i, st in enumerate(pipeline.stages):
            stage_mode[i] = st.mode
        tasks = expand_microbatches(tasks, pipeline.microbatches)
    by_id = {t.id: t for t in tasks}
    if len(by_id) != len(tasks):
        raise ValueError("duplicate task ids")
    for t in tasks:
        for p in t.preds:
            if p not in by_id:
                raise ValueError(f"task {t.id} depends on unknown task {p}")
    level = task_levels(tasks)

    def task_mode(t):
        if t.stage is not None and t.stage in stage_mode:
            return stage_mode[t.stage]
        return mode

    fifo_devices = {
        t.device for t in tasks
        if t.device is not None and t.role == "server" and task_mode(t) == "async_push_pull"
    }
    items = {}
    for t in sorted(tasks, key=lambda t: (level[t.id], t.id)):
        m = task_mode(t)
        group = None
        if m == "sync_collective":
            group = ("stage", t.stage) if pipeline is not None and t.stage is not None else "all"
        items[t.id] = _Item((level[t.id], t.id, 0, 0), t.id, t.cost, t.device, tuple(t.links), [],
                            group, level[t.id], t.device in fifo_devices)
    for t in tasks:
        explicit = {p: (s, l) for p, s, l in t.edge_costs}
        for p in t.preds:
            src = by_id[p]
            if p in explicit:
                secs, links = explicit[p]
            elif src.device is not None and t.device is not None and src.device != t.device and cluster is not None:
                prof = link_profile(cluster, src.device, t.device)
                secs, links = p2p_time(src.out_bytes, prof.bandwidth, prof.latency), prof.edges
            else:
                items[t.id].preds.append(p)
                continue
            label = ("msg", p, t.id)
            items[label] = _Item((level[p], p, 1, t.id), label, secs, None, tuple(links), [p])
            items[t.id].preds.append(label)
    return _run(items, mode, by_id)


def _run(items, mode, by_id) -> SimTrace:
    order = sorted(items, key=lambda k: items[k].key)
    # static run queues per resource
    queues = {}
    for k in order:
        it = items[k]
        for res in _resources(it):
            queues.setdefault(res, []).append(k)
    head = {res: 0 for res in queues}
    busy_until = {res: 0.0 for res in queues}
    # barrier bookkeeping: unfinished count per (group, level)
    remaining = {}
    for k in order:
        it = items[k]
        if it.group is not None:
            remaining[(it.group, it.level)] = remaining.get((it.group, it.level), 0) + 1
    group_levels = {}
    for (g, lv) in remaining:
        group_levels.setdefault(g, []).append(lv)
    release = {}  # (group, level) -> time all lower levels finished

    start, end = {}, {}
    ready_at = {}
    link_busy = {}
    link_wait = 0.0
    done = set()
    waiting = set(order)
    now = 0.0
    events = []  # completion times

    def barrier_time(it):
        if it.group is None:
            return 0.0
        t = 0.0
        for lv in group_levels[it.group]:
            if lv < it.level:
                if remaining[(it.group, lv)] > 0:
                    return None
                t = max(t, release.get((it.group, lv), 0.0))
        return t

    def inputs_time(it):
        t = 0.0
        for p in it.preds:
            if p not in done:
                return None
            t = max(t, end[p])
        return t

    while waiting:
        progressed = False
        for k in [k for k in order if k in waiting]:
            it = items[k]
            t_in = inputs_time(it)
            if t_in is None:
                continue
            t_bar = barrier_time(it)
            if t_bar is None:
                continue
            ready = max(t_in, t_bar)
            ready_at.setdefault(k, ready)
            if ready > now:
                continue
            ok = True
            for res in _resources(it):
                if busy_until[res] > now:
                    ok = False
                    break
                if it.fifo and res[0] == "dev":
                    cands = [
                        c for c in queues[res]
                        if c in waiting and c in ready_at and ready_at[c] <= now
                    ]
                    if min(cands, key=lambda c: (ready_at[c], items[c].key)) != k:
                        ok = False
                        break
                elif queues[res][head[res]] != k:
                    ok = False
                    break
            if not ok:
                continue
            s = max(ready, max((busy_until[r] for r in _resources(it)), default=0.0))
            s = max(s, now) if _resources(it) else ready
            start[k] = s
            end[k] = s + it.cost
            if it.links:
                link_wait += s - ready
            for res in _resources(it):
                busy_until[res] = end[k]
                if not it.fifo or res[0] != "dev":
                    head[res] += 1
                else:
                    queues[res].remove(k)
                if res[0] == "link":
                    link_busy.setdefault(res[1], []).append((s, end[k], it.label))
            waiting.discard(k)
            events.append(end[k])
            progressed = True
        # completions at or before now
        for k in list(start):
            if k not in done and end[k] <= now:
                done.add(k)
                it = items[k]
                if it.group is not None:
                    key = (it.group, it.level)
                    remaining[key] -= 1
                    release[key] = max(release.get(key, 0.0), end[k])
                progressed = True
        if not waiting:
            break
        if progressed:
            continue
        future = [e for e in events if e > now]
        future += [ready_at[k] for k in waiting if k in ready_at and ready_at[k] > now]
        if not future:
            raise Deadlock(f"{len(waiting)} items can never start", cycle=_wait_cycle(items, waiting, done))
        now = min(future)

    makespan = max(end.values(), default=0.0)
    task_ids = [k for k in order if not isinstance(k, tuple)]
    msgs = [(k[1], k[2], start[k], end[k]) for k in order if isinstance(k, tuple)]
    return SimTrace(
        mode,
        {k: start[k] for k in task_ids},
        {k: end[k] for k in task_ids},
        {k: by_id[k].device for k in task_ids},
        {e: sorted(v, key=lambda x: (x[0], x[1], str(x[2]))) for e, v in sorted(link_busy.items())},
        makespan,
        link_wait,
        msgs,
    )


def _resources(it) -> tuple:
    res = []
    if it.device is not None:
        res.append(("dev", it.device))
    res.extend(("link", e) for e in it.links)
    return tuple(res)


def _wait_cycle(items, waiting, done):
    waits = {}
    for k in waiting:
        blockers = [p for p in items[k].preds if p not in done]
        waits[k] = blockers[0] if blockers else None
    for k0 in sorted(waiting, key=lambda k: items[k].key):
        seen, k = [], k0
        while k is not None and k not in seen:
            seen.append(k)
            k = waits.get(k)
        if k is not None:
            return tuple(seen[seen.index(k):])
    return tuple(sorted(waiting, key=lambda k: items[k].key))


# --------------------------------------------------------------------------- comparisons


def critical_path_bound(tasks) -> float:
    by_id = {t.id: t for t in tasks}
    level = task_levels(tasks)
    fin = {}
    for i in sorted(by_id, key=level.get):
        t = by_id[i]
        fin[i] = t.cost + max((fin[p] for p in t.preds), default=0.0)
    return max(fin.values(), default=0.0)


def compare_modes(dg: DistributedGraph, cluster: Cluster, db: PerfDatabase, modes=MODES, batch=1) -> dict:
    """Simulate the per-op task DAG under each executor mode."""
    modes = list(modes)
    if len(modes) < 2:
        raise ValueError("compare_modes needs at least two modes")
    tasks = fuse_tasks(dg, "per_op", cluster, db)
    rows = []
    traces = {}
    for m in modes:
        tr = simulate(tasks, cluster, db, m)
        traces[m] = tr
        rows.append({"config": m, "makespan": tr.makespan,
                     "throughput": batch / tr.makespan if tr.makespan > 0 else math.inf})
    return {"traces": traces, "table": rows}


def pipeline_tasks(g: SerialGraph, pipeline: PipelineSpec, cluster: Cluster, db: PerfDatabase, rows: int) -> list:
    """One task per stage for a microbatch of ``rows`` samples.

    Op costs are priced on the stage's device at microbatch shapes (the
    leading dim of every batch-carrying tensor scaled to ``rows``); the stage
    ships its boundary tensors to the next stage.
    """
    tasks = []
    owner = {}
    batch = _batch_dim(g)
    for si, st in enumerate(pipeline.stages):
        if len(st.devices) != 1:
            raise ValueError("pipeline_tasks expects one device per stage")
        dev = cluster.component(st.devices[0])
        cost = 0.0
        for name in st.ops:
            op = g.op(name)
            shapes = [_scaled(g.tensors[i].shape, batch, rows) for i in op.inputs]
            cost += compute_op_cost(op, shapes, dev, db, g.tensors[op.outputs[0]].dtype)
            owner[op.outputs[0]] = si
        preds = set()
        out_bytes = 0
        for name in st.ops:
            op = g.op(name)
            for i in op.inputs:
                if i in owner and owner[i] != si:
                    preds.add(owner[i])
        for name in st.ops:
            out = g.op(name).outputs[0]
            if any(owner.get(out) == si and c.name not in st.ops for c in g.consumers(out)):
                t = g.tensors[out]
                out_bytes += int(_prod(_scaled(t.shape, batch, rows))) * t.itemsize
        tasks.append(Task(si, tuple(st.ops), st.devices[0], cost, tuple(sorted(preds)),
                          out_bytes=out_bytes, stage=si,
                          role="server" if st.mode == "async_push_pull" else "worker"))
    return tasks


def _prod(xs):
    out = 1
    for x in xs:
        out *= x
    return out


def _batch_dim(g: SerialGraph) -> int:
    return max((t.shape[0] for t in g.tensors.values() if t.shape), default=1)


def _scaled(shape, batch, rows):
    if shape and shape[0] == batch:
        return (rows, *shape[1:])
    return tuple(shape)


def compare_configs(g: SerialGraph, configs: dict, cluster: Cluster, db: PerfDatabase,
                    batch: int, microbatches: int = 4) -> dict:
    """Throughput (samples/s) of several pipeline configurations of one graph.

    ``configs`` maps a name to a list of Stage. Each microbatch carries
    ``batch / microbatches`` samples.
    """
    rows_per_mb = max(batch // microbatches, 1)
    table, traces = [], {}
    for name in configs:
        spec = PipelineSpec(tuple(configs[name]), microbatches)
        tasks = pipeline_tasks(g, spec, cluster, db, rows_per_mb)
        tr = simulate(tasks, cluster, db, "actor_async", pipeline=spec)
        traces[name] = tr
        samples = rows_per_mb * microbatches
        table.append({"config": name, "batch": batch, "microbatches": microbatches,
                      "makespan": tr.makespan, "throughput": samples / tr.makespan})
    return {"traces": traces, "table": table}


def table_csv(rows) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    keys = list(rows[0])
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(keys)
    for r in rows:
        w.writerow([f"{r[k]:.9g}" if isinstance(r[k], float) else r[k] for k in keys])
    return buf.getvalue()
