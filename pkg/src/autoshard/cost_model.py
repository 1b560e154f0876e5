"""Global cost model: time along the key path of the merged task DAG plus per-device peak memory.

Compute costs come from a benchmark database (exact hit, fitted model, or a
FLOP-count fallback); communication costs come from an alpha-beta model over
the cluster's link profiles.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .completion import reduction_axis
from .errors import NoCostAvailable, SchemaError, UnknownDevice
from .graph_ir import DistributedGraph, box_intersect, box_volume, infer_output_shape
from .cluster import Cluster, Component, link_profile
from .reshard import CommOp, insert_comm


# --------------------------------------------------------------------------- perf database


def _shape_key(shapes) -> tuple:
    return tuple(tuple(int(x) for x in s) for s in shapes)


def op_flops(kind: str, in_shapes, out_shapes) -> int:
    """FLOP count used for fitting and for the fallback estimate."""
    if kind == "matmul":
        (m, ka), (kb, n) = in_shapes[0], in_shapes[1]
        return 2 * m * min(ka, kb) * n
    if kind == "reduce_sum":
        return int(np.prod(in_shapes[0]))
    return int(np.prod(out_shapes[0])) if out_shapes else 0


@dataclass
class PerfDatabase:
    records: dict = field(default_factory=dict)  # (kind, in_shapes, out_shapes, dtype, device_kind) -> seconds
    min_fit_records: int = 3

    def __post_init__(self):
        self._fits = {}
        for key, t in self.records.items():
            if not t > 0:
                raise SchemaError(f"perf record {key} has non-positive time {t}")

    def add(self, kind, in_shapes, out_shapes, dtype, device_kind, seconds):
        if not seconds > 0:
            raise SchemaError("perf record times must be > 0")
        self.records[(kind, _shape_key(in_shapes), _shape_key(out_shapes), dtype, device_kind)] = float(seconds)
        self._fits.clear()

    def lookup(self, kind, in_shapes, out_shapes, dtype, device_kind):
        return self.records.get((kind, _shape_key(in_shapes), _shape_key(out_shapes), dtype, device_kind))

    def fit(self, kind, device_kind):
        """(slope, intercept) of seconds vs FLOPs by least squares, or None with too few records."""
        key = (kind, device_kind)
        if key not in self._fits:
            pts = [
                (op_flops(k, ins, outs), t)
                for (k, ins, outs, _, dk), t in sorted(self.records.items())
                if k == kind and dk == device_kind
            ]
            coef = None
            if len(pts) >= self.min_fit_records:
                x = np.array([p[0] for p in pts], dtype=float)
                y = np.array([p[1] for p in pts], dtype=float)
                if np.ptp(x) > 0:
                    A = np.stack([x, np.ones_like(x)], axis=1)
                    slope, intercept = np.linalg.lstsq(A, y, rcond=None)[0]
                    if slope > 0:
                        coef = (float(slope), float(intercept))
            self._fits[key] = coef
        return self._fits[key]

    def to_json(self) -> list:
        return [
            {"kind": k, "in_shapes": [list(s) for s in ins], "out_shapes": [list(s) for s in outs],
             "dtype": dt, "device_kind": dk, "seconds": t}
            for (k, ins, outs, dt, dk), t in sorted(self.records.items())
        ]

    @classmethod
    def from_json(cls, doc) -> "PerfDatabase":
        if not isinstance(doc, list):
            raise SchemaError("perf database: expected a list of records")
        db = cls()
        for i, r in enumerate(doc):
            if not isinstance(r, dict):
                raise SchemaError(f"perf database[{i}]: expected an object")
            missing = {"kind", "in_shapes", "out_shapes", "dtype", "device_kind", "seconds"} - set(r)
            if missing:
                raise SchemaError(f"perf database[{i}]: missing field(s) {sorted(missing)}")
            try:
                db.add(r["kind"], r["in_shapes"], r["out_shapes"], r["dtype"], r["device_kind"], float(r["seconds"]))
            except (TypeError, ValueError) as exc:
                raise SchemaError(f"perf database[{i}]: {exc}") from exc
        return db

    @classmethod
    def load(cls, path) -> "PerfDatabase":
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_json(doc)


def _local_out_shapes(op, in_shapes):
    if op.kind == "matmul":
        return [(in_shapes[0][0], in_shapes[1][1])]
    try:
        return [infer_output_shape(op, in_shapes)]
    except Exception:
        return []


def compute_op_cost(op, local_shapes, device: Component, db: PerfDatabase, dtype="f64") -> float:
    """Seconds for one local operator: DB hit, then fitted model, then FLOPs / device flops.

    An op standing for a loop body carries a ``trip_count`` attribute and is
    charged once per trip.
    """
    return op.attr("trip_count", 1) * _single_cost(op, local_shapes, device, db, dtype)


def _single_cost(op, local_shapes, device, db, dtype):
    out_shapes = _local_out_shapes(op, local_shapes)
    hit = db.lookup(op.kind, local_shapes, out_shapes, dtype, device.kind) if db is not None else None
    if hit is not None:
        return hit
    flops = op_flops(op.kind, local_shapes, out_shapes)
    coef = db.fit(op.kind, device.kind) if db is not None else None
    if coef is not None:
        t = coef[0] * flops + coef[1]
        if t > 0:
            return t
    if device.flops <= 0 or flops <= 0:
        raise NoCostAvailable(f"no cost for {op.kind} on {device.id} ({device.kind})")
    return flops / device.flops


# --------------------------------------------------------------------------- comm cost


def _endpoint(dev, p, placements):
    if dev is not None:
        return dev
    if placements is not None and p in placements:
        return placements[p]
    raise UnknownDevice(f"process {p} is not placed")


def _worst(cluster, devices):
    devs = sorted(set(devices))
    bw, lat = math.inf, 0.0
    for i, a in enumerate(devs):
        for b in devs[i + 1:]:
            prof = link_profile(cluster, a, b)
            bw = min(bw, prof.bandwidth)
            lat = max(lat, prof.latency)
    return bw, lat


def p2p_time(bytes_, bandwidth, latency) -> float:
    return latency + (bytes_ / bandwidth if bandwidth != math.inf else 0.0)


def comm_op_cost(c: CommOp, cluster: Cluster, placements=None) -> float:
    """Alpha-beta estimate for one CommOp.

    ``placements`` (process -> device) fills in endpoints the CommOp does not
    carry itself.
    """
    if c.kind == "slice_local":
        return 0.0
    if c.kind == "p2p_send_recv":
        groups = {}
        for x in c.payload:
            key = (_endpoint(x.src_device, x.src, placements), _endpoint(x.dst_device, x.dst, placements))
            groups[key] = groups.get(key, 0) + x.volume
        itemsize = c.bytes // max(sum(x.volume for x in c.payload), 1) if c.payload else 8
        worst = 0.0
        for (a, b), vol in sorted(groups.items()):
            if a == b:
                continue
            prof = link_profile(cluster, a, b)
            worst = max(worst, p2p_time(vol * itemsize, prof.bandwidth, prof.latency))
        if not c.payload:
            return 0.0
        return worst
    if c.kind == "all_reduce":
        procs = c.src_processes
        p = len(procs)
        if p <= 1:
            return 0.0
        dev = dict(c.devices)
        devices = [_endpoint(dev.get(q), q, placements) for q in procs]
        bw, alpha = _worst(cluster, devices)
        if bw == math.inf:
            return 0.0
        n = c.bytes
        return 2 * (p - 1) * alpha + 2 * n * (p - 1) / (p * bw)
    if c.kind == "all_gather":
        procs = sorted(set(c.src_processes) | set(c.dst_processes))
        p = len(procs)
        if p <= 1:
            return 0.0
        placed = {}
        for x in c.payload:
            placed[x.src] = _endpoint(x.src_device, x.src, placements)
            placed[x.dst] = _endpoint(x.dst_device, x.dst, placements)
        bw, alpha = _worst(cluster, placed.values())
        if bw == math.inf:
            return 0.0
        itemsize = c.bytes // max(sum(x.volume for x in c.payload), 1)
        received = {}
        for x in c.payload:
            received[x.dst] = received.get(x.dst, 0) + x.volume * itemsize
        n = max(received.values()) * p / (p - 1)
        return (p - 1) * alpha + n * (p - 1) / (p * bw)
    if c.kind == "broadcast":
        src = c.payload[0].src
        dsts = {x.dst for x in c.payload} - {src}
        p = len(dsts) + 1
        placed = [_endpoint(c.payload[0].src_device, src, placements)]
        placed += [_endpoint(x.dst_device, x.dst, placements) for x in c.payload]
        bw, alpha = _worst(cluster, placed)
        if bw == math.inf:
            return 0.0
        itemsize = c.bytes // max(sum(x.volume for x in c.payload), 1)
        n = max(x.volume for x in c.payload) * itemsize
        return math.ceil(math.log2(p)) * (alpha + n / bw)
    raise ValueError(f"unknown comm kind {c.kind!r}")


# --------------------------------------------------------------------------- merged DAG


@dataclass
class DagNode:
    name: str
    kind: str  # feed | compute | comm
    device: str = None
    process: int = None
    ref: object = None  # OpSpec for compute, CommOp for comm, tensor name for feed
    preds: list = field(default_factory=list)
    allocs: list = field(default_factory=list)  # (buffer key, device, bytes)
    reads: list = field(default_factory=list)  # buffer keys
    local_shapes: tuple = ()


@dataclass
class MergedDag:
    nodes: dict  # name -> DagNode, insertion order is the tie-break sequence
    fetch_buffers: set = field(default_factory=set)

    def succs(self) -> dict:
        out = {n: [] for n in self.nodes}
        for n, node in self.nodes.items():
            for p in node.preds:
                out[p].append(n)
        return out

    def levels(self) -> dict:
        lv = {}
        for n, node in self.nodes.items():  # insertion order is topological
            lv[n] = 1 + max((lv[p] for p in node.preds), default=-1)
        return lv

    def order(self) -> list:
        """Static execution order: by graph level, then insertion sequence."""
        lv = self.levels()
        seq = {n: i for i, n in enumerate(self.nodes)}
        return sorted(self.nodes, key=lambda n: (lv[n], seq[n]))

    def edge_count(self) -> int:
        return sum(len(n.preds) for n in self.nodes.values())


def _local_bytes(attr, p, itemsize):
    return box_volume(attr.box(p)) * itemsize


def merge_comm_ops(dg: DistributedGraph) -> MergedDag:
    """Per-rank compute nodes plus one node per logical communication.

    Feed shards appear as zero-cost source nodes so that reshards of feeds
    keep their producer edges.
    """
    if not dg.inserted_comm:
        dg = insert_comm(dg)
    g = dg.base
    by_site = {}
    for c in dg.inserted_comm:
        by_site.setdefault(tuple(c.site), []).append(c)
    nodes = {}
    producer = {}  # (tensor, process) -> node name

    def add(node):
        node.preds = list(dict.fromkeys(node.preds))
        nodes[node.name] = node

    for t in sorted(g.feeds):
        attr = dg.tensor_attrs[t]
        item = g.tensors[t].itemsize
        for p in attr.process_mesh.process_ids:
            dev = attr.placement.get(p)
            name = f"feed:{t}@{p}"
            add(DagNode(name, "feed", dev, p, t, [], [(("t", t, p), dev, _local_bytes(attr, p, item))]))
            producer[(t, p)] = name

    comm_seq = 0
    for op in g.ordered_ops():
        oa = dg.op_attrs[op.name]
        placement = oa.placement()
        input_src = {}  # (tensor, process) -> (node name, buffer key)
        for t in op.inputs:
            req = oa.input_reqs[t]
            actual = dg.tensor_attrs[t]
            item = g.tensors[t].itemsize
            comms = by_site.get(("reshard", t, op.name), [])
            if not comms:
                for q in req.process_mesh.process_ids:
                    input_src[(t, q)] = (producer[(t, q)], ("t", t, q))
                continue
            for c in comms:
                srcs = {x.src for x in c.payload}
                name = f"comm{comm_seq}:{c.name}"
                comm_seq += 1
                reads = [("t", t, s) for s in sorted(srcs)]
                allocs = [(("in", t, op.name, q), req.placement.get(q), _local_bytes(req, q, item))
                          for q in req.process_mesh.process_ids]
                add(DagNode(name, "comm", None, None, c, [producer[(t, s)] for s in sorted(srcs)], allocs, reads))
                for q in req.process_mesh.process_ids:
                    input_src[(t, q)] = (name, ("in", t, op.name, q))
            # destinations that copy part of their shard from their own source replica
            for q in req.process_mesh.process_ids:
                if (
                    q in actual.process_mesh.process_ids
                    and actual.placement.get(q) == req.placement.get(q)
                    and box_intersect(actual.box(q), req.box(q)) is not None
                ):
                    node = nodes[input_src[(t, q)][0]]
                    node.preds.append(producer[(t, q)])
                    node.reads.append(("t", t, q))
        out = op.outputs[0]
        out_attr = oa.output_reqs[out]
        item = g.tensors[out].itemsize
        for p in oa.process_mesh.process_ids:
            preds, reads = [], []
            for t in op.inputs:
                src, buf = input_src[(t, p)]
                preds.append(src)
                reads.append(buf)
            shapes = tuple(
                tuple(hi - lo for lo, hi in oa.input_reqs[t].box(p)) for t in op.inputs
            )
            name = f"op:{op.name}@{p}"
            add(DagNode(name, "compute", placement.get(p), p, op, preds,
                        [(("t", out, p), out_attr.placement.get(p), _local_bytes(out_attr, p, item))],
                        reads, shapes))
            producer[(out, p)] = name
        if reduction_axis(op, [oa.input_reqs[i] for i in op.inputs]) >= 0:
            for c in by_site.get(("op", op.name), []):
                name = f"comm{comm_seq}:{c.name}"
                comm_seq += 1
                members = [x.src for x in c.payload]
                add(DagNode(name, "comm", None, None, c, [producer[(out, p)] for p in members]))
                for p in members:
                    producer[(out, p)] = name
    # local-copy reads may have extended comm-node preds; dedupe again
    for node in nodes.values():
        node.preds = list(dict.fromkeys(node.preds))
    fetch_buffers = set()
    for t in g.fetches:
        for p in dg.tensor_attrs[t].process_mesh.process_ids:
            fetch_buffers.add(("t", t, p))
    return MergedDag(nodes, fetch_buffers)


# --------------------------------------------------------------------------- reduction


@dataclass
class CostEstimate:
    total_time: float
    per_device_peak_memory: dict
    per_op_costs: dict
    schedule: dict = field(default_factory=dict)  # node -> (start, end)
    critical_path: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "total_time": self.total_time,
            "per_device_peak_memory": dict(sorted(self.per_device_peak_memory.items())),
            "per_op_costs": dict(sorted(self.per_op_costs.items())),
            "critical_path": list(self.critical_path),
        }


def node_costs(dag: MergedDag, dg: DistributedGraph, cluster: Cluster, db: PerfDatabase) -> dict:
    costs = {}
    for name, node in dag.nodes.items():
        if node.kind == "feed":
            costs[name] = 0.0
        elif node.kind == "compute":
            if node.device is None:
                raise UnknownDevice(f"{name}: process {node.process} is not placed")
            dtype = dg.base.tensors[node.ref.outputs[0]].dtype
            costs[name] = compute_op_cost(node.ref, node.local_shapes, cluster.component(node.device), db, dtype)
        else:
            costs[name] = comm_op_cost(node.ref, cluster)
    return costs


def longest_path(dag: MergedDag, costs: dict):
    """ASAP schedule under dependencies plus per-device serialization in static order.

    Returns (makespan, schedule, critical path).
    """
    order = dag.order()
    last_on_device = {}
    start, end, why = {}, {}, {}
    for n in order:
        node = dag.nodes[n]
        s, cause = 0.0, None
        for p in node.preds:
            if cause is None or end[p] > s:
                s, cause = end[p], p
        if node.device is not None and node.device in last_on_device:
            prev = last_on_device[node.device]
            if end[prev] > s:
                s, cause = end[prev], prev
        start[n] = s
        end[n] = s + costs[n]
        why[n] = cause
        if node.device is not None:
            last_on_device[node.device] = n
    if not order:
        return 0.0, {}, []
    total = max(end.values())
    tail = max(order, key=lambda n: (end[n], -order.index(n)))
    path = []
    while tail is not None:
        path.append(tail)
        tail = why[tail]
    return total, {n: (start[n], end[n]) for n in order}, path[::-1]


def reduce_graph_cost(dg: DistributedGraph, cluster: Cluster, db: PerfDatabase) -> CostEstimate:
    if not dg.inserted_comm:
        dg = insert_comm(dg)
    dag = merge_comm_ops(dg)
    costs = node_costs(dag, dg, cluster, db)
    total, schedule, path = longest_path(dag, costs)
    order = sorted(schedule, key=lambda n: (schedule[n][0], schedule[n][1], n))
    mem = simulate_memory(dg, cluster, order, dag=dag)
    per_op = {n: c for n, c in costs.items() if dag.nodes[n].kind != "feed"}
    return CostEstimate(total, mem, per_op, schedule, path)


def simulate_memory(dg: DistributedGraph, cluster: Cluster = None, order=None, dag: MergedDag = None) -> dict:
    """Peak resident bytes per device under liveness accounting.

    Each buffer is allocated when its node runs and released after the last
    node that reads it; fetched tensors stay resident to the end.
    """
    if dag is None:
        dag = merge_comm_ops(dg if dg.inserted_comm else insert_comm(dg))
    if order is None:
        order = dag.order()
    last_read = {}
    for i, n in enumerate(order):
        for buf in dag.nodes[n].reads:
            last_read[buf] = i
    where = {}
    resident = {}
    peak = {}
    for i, n in enumerate(order):
        node = dag.nodes[n]
        for buf, dev, nbytes in node.allocs:
            if dev is None:
                continue
            where[buf] = (dev, nbytes)
            resident[dev] = resident.get(dev, 0) + nbytes
            peak[dev] = max(peak.get(dev, 0), resident[dev])
        dead = [b for b in node.reads if last_read.get(b) == i]
        dead += [b for b, _, _ in node.allocs if b not in last_read]
        for buf in dict.fromkeys(dead):
            if buf in dag.fetch_buffers or buf not in where:
                continue
            dev, nbytes = where.pop(buf)
            resident[dev] -= nbytes
    if cluster is not None:
        for dev in peak:
            cluster.component(dev)
    return dict(sorted(peak.items()))
