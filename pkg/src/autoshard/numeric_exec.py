"""Reference numeric runtime.

``run_serial`` evaluates the serial graph with numpy. ``run_distributed``
simulates every logical process: it shards the feeds, delivers reshard
payloads through an in-memory mailbox, runs each local operator on local
shards, performs intra-operator all-reduces in a fixed rank order and finally
gathers the fetches. Any mismatch with the serial result points at a bug in
completion or reshard planning.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .completion import reduction_axis
from .errors import (
    AutoshardError,
    MissingFeed,
    SchemaError,
    ShapeMismatch,
    ShardShapeMismatch,
    UndeliveredMessage,
)
from .graph_ir import (
    DistAttr,
    DistributedGraph,
    SerialGraph,
    box_intersect,
    reduce_axis,
)
from .reshard import insert_comm


class ReplicaDivergence(AutoshardError):
    """Replicas of one shard disagree after distributed execution."""


@dataclass
class ExecResult:
    fetches: dict
    trace: dict = field(default_factory=dict)


def _as_ids(x) -> np.ndarray:
    ids = np.asarray(x)
    as_int = ids.astype(np.int64)
    if not np.array_equal(as_int, ids):
        raise ShapeMismatch("embedding ids must be integral")
    return as_int


def apply_op(op, args):
    """Serial semantics of one operator."""
    kind = op.kind
    if kind == "matmul":
        return args[0] @ args[1]
    if kind == "relu":
        return np.maximum(args[0], 0.0)
    if kind == "add":
        return args[0] + args[1]
    if kind == "elementwise_mul":
        return args[0] * args[1]
    if kind == "identity":
        return args[0].copy()
    if kind == "reduce_sum":
        axis = reduce_axis(op, args[0].ndim)
        return np.sum(args[0], axis=axis, keepdims=bool(op.attr("keepdims", False)))
    if kind == "embedding_lookup":
        ids, table = args
        return table[_as_ids(ids)]
    raise ValueError(kind)


def _check_feeds(g: SerialGraph, feeds):
    arrays = {}
    for name in sorted(g.feeds):
        if name not in feeds:
            raise MissingFeed(f"no value supplied for feed {name!r}")
        arr = np.asarray(feeds[name], dtype=np.float64)
        if arr.shape != g.tensors[name].shape:
            raise ShapeMismatch(f"feed {name!r} has shape {arr.shape}, expected {g.tensors[name].shape}")
        arrays[name] = arr
    return arrays


def run_serial(g: SerialGraph, feeds) -> ExecResult:
    values = _check_feeds(g, feeds)
    trace = []
    for op in g.ordered_ops():
        values[op.outputs[0]] = apply_op(op, [values[i] for i in op.inputs])
        trace.append(op.name)
    return ExecResult({name: values[name] for name in sorted(g.fetches)}, {0: trace})


# --------------------------------------------------------------------------- shards


def _slices(box, origin=None):
    if origin is None:
        return tuple(slice(lo, hi) for lo, hi in box)
    return tuple(slice(lo - o[0], hi - o[0]) for (lo, hi), o in zip(box, origin))


def shard_tensor(value: np.ndarray, attr: DistAttr) -> dict:
    """Process -> local shard (a copy) of a global array."""
    return {p: np.array(value[_slices(attr.box(p))], copy=True) for p in attr.process_mesh.process_ids}


def gather_tensor(shards: dict, attr: DistAttr, shape, check_replicas=True) -> np.ndarray:
    """Reassemble the global array; replicas must agree bitwise when ``check_replicas``."""
    out = np.empty(shape, dtype=np.float64)
    seen = {}
    for p in attr.process_mesh.process_ids:
        box = attr.box(p)
        local = shards[p]
        if local.shape != tuple(hi - lo for lo, hi in box):
            raise ShardShapeMismatch(f"process {p} holds shape {local.shape} for box {box}")
        if box in seen:
            if check_replicas and not np.array_equal(seen[box], local):
                raise ReplicaDivergence(f"replicas of box {box} disagree (process {p})")
            continue
        seen[box] = local
        out[_slices(box)] = local
    return out


def execute_reshard(name, comms, actual: DistAttr, required: DistAttr, src: dict, hook=None, trace=None) -> dict:
    """Run the transfers in ``comms`` and assemble every destination shard of ``required``.

    Cells not delivered by a message are copied from the destination's own
    shard, but only when it already lives on the same device.
    """
    mailbox = {}
    for comm in comms:
        for x in comm.payload:
            if x.src not in src:
                raise UndeliveredMessage(f"{name}: process {x.src} asked to send but holds no shard")
            sbox = actual.box(x.src)
            if box_intersect(sbox, x.box) != x.box:
                raise ShardShapeMismatch(f"{name}: process {x.src} does not own {x.box}")
            data = np.array(src[x.src][_slices(x.box, sbox)], copy=True)
            if hook is not None:
                data = hook(comm, x, data)
            mailbox.setdefault(x.dst, []).append((x, data))
            if trace is not None:
                trace.setdefault(x.src, []).append(f"send {name} {x.box} -> {x.dst}")
    out = {}
    src_dev, dst_dev = actual.placement, required.placement
    for q in required.process_mesh.process_ids:
        box = required.box(q)
        buf = np.zeros(tuple(hi - lo for lo, hi in box))
        filled = np.zeros(buf.shape, dtype=bool)
        for x, data in mailbox.pop(q, []):
            region = _slices(x.box, box)
            if filled[region].any():
                raise UndeliveredMessage(f"{name}: process {q} received overlapping payloads")
            buf[region] = data
            filled[region] = True
            if trace is not None:
                trace.setdefault(q, []).append(f"recv {name} {x.box} <- {x.src}")
        if not filled.all() and q in src and src_dev.get(q) == dst_dev.get(q):
            own = actual.box(q)
            piece = box_intersect(own, box)
            if piece is not None:
                region = _slices(piece, box)
                take = ~filled[region]
                buf[region] = np.where(take, src[q][_slices(piece, own)], buf[region])
                filled[region] = True
        if not filled.all():
            raise UndeliveredMessage(f"{name}: process {q} is still waiting for part of its shard {box}")
        out[q] = buf
    if mailbox:
        raise UndeliveredMessage(f"{name}: payload sent to non-participants {sorted(mailbox)}")
    return out


def _local_compute(op, reqs, local_args, full_shapes):
    kind = op.kind
    if kind == "matmul":
        a, b = local_args
        ka = reqs[0].box_cache[1]
        kb = reqs[1].box_cache[0]
        k = full_shapes[0][1]
        if ka != kb:
            if ka == (0, k):
                a = a[:, kb[0]:kb[1]]
            elif kb == (0, k):
                b = b[ka[0] - kb[0]:ka[1] - kb[0], :]
            else:
                raise ShardShapeMismatch(f"op {op.name!r}: contracted ranges {ka} and {kb} differ")
        return a @ b
    if kind == "embedding_lookup":
        ids, table = local_args
        ids = _as_ids(ids)
        v0, v1 = reqs[1].box_cache[0]
        out = np.zeros((ids.shape[0], table.shape[1]))
        mask = (ids >= v0) & (ids < v1)
        out[mask] = table[ids[mask] - v0]
        return out
    return apply_op(op, local_args)


class _BoxView:
    """A requirement plus the box of the process currently computing."""

    def __init__(self, attr, p):
        self.attr = attr
        self.box_cache = attr.box(p)

    def __getattr__(self, item):
        return getattr(self.attr, item)


def run_distributed(dg: DistributedGraph, feeds, message_hook=None) -> ExecResult:
    """Execute ``dg`` process by process and gather its fetches.

    ``message_hook(comm, transfer, array) -> array`` may rewrite every
    delivered payload; it exists to inject faults in tests.
    """
    g = dg.base
    arrays = _check_feeds(g, feeds)
    if not dg.inserted_comm:
        dg = insert_comm(dg)
    pending = {}
    for comm in dg.inserted_comm:
        pending.setdefault(tuple(comm.site), []).append(comm)
    trace = {}
    store = {}  # tensor -> {process: array}
    for name in sorted(g.feeds):
        store[name] = shard_tensor(arrays[name], dg.tensor_attrs[name])

    for op in g.ordered_ops():
        oa = dg.op_attrs[op.name]
        reqs = [oa.input_reqs[i] for i in op.inputs]
        inputs = []
        for name, req in zip(op.inputs, reqs):
            comms = pending.pop(("reshard", name, op.name), [])
            inputs.append(
                execute_reshard(name, comms, dg.tensor_attrs[name], req, store[name], message_hook, trace)
            )
        shapes = [g.tensors[i].shape for i in op.inputs]
        partial = {}
        for p in oa.process_mesh.process_ids:
            views = [_BoxView(r, p) for r in reqs]
            partial[p] = _local_compute(op, views, [inp[p] for inp in inputs], shapes)
            trace.setdefault(p, []).append(f"compute {op.name}")
        out_name = op.outputs[0]
        out_attr = oa.output_reqs[out_name]
        if reduction_axis(op, reqs) >= 0:
            groups = pending.pop(("op", op.name), [])
            covered = {p for c in groups for p in c.src_processes}
            if covered != set(oa.process_mesh.process_ids):
                raise UndeliveredMessage(f"op {op.name!r}: partial sums never reduced on {sorted(set(oa.process_mesh.process_ids) - covered)}")
            reduced = {}
            for comm in groups:
                members = [x.src for x in comm.payload]
                acc = partial[members[0]].copy()
                for p in members[1:]:
                    acc = acc + partial[p]
                for p in members:
                    data = acc.copy()
                    if message_hook is not None:
                        data = message_hook(comm, comm.payload[members.index(p)], data)
                    reduced[p] = data
                    trace.setdefault(p, []).append(f"all_reduce {out_name} over {members}")
            partial = reduced
        for p, arr in partial.items():
            want = tuple(hi - lo for lo, hi in out_attr.box(p))
            if arr.shape != want:
                raise ShardShapeMismatch(f"op {op.name!r} on process {p}: produced {arr.shape}, expected {want}")
        store[out_name] = partial
    if pending:
        raise UndeliveredMessage(f"communication never consumed: {sorted(pending)}")
    fetched = {
        name: gather_tensor(store[name], dg.tensor_attrs[name], g.tensors[name].shape)
        for name in sorted(g.fetches)
    }
    return ExecResult(fetched, trace)


def max_abs_diff(a: ExecResult, b: ExecResult) -> float:
    worst = 0.0
    for name in a.fetches:
        x, y = a.fetches[name], b.fetches[name]
        if x.shape != y.shape:
            return float("inf")
        if x.size:
            worst = max(worst, float(np.max(np.abs(x - y))))
    return worst


def random_feeds(g: SerialGraph, seed=0) -> dict:
    """Deterministic feeds; embedding ids are valid row indices."""
    rng = np.random.default_rng(seed)
    ids_rows = {}
    for op in g.ops:
        if op.kind == "embedding_lookup":
            ids_rows[op.inputs[0]] = g.tensors[op.inputs[1]].shape[0]
    feeds = {}
    for name in sorted(g.feeds):
        shape = g.tensors[name].shape
        if name in ids_rows:
            feeds[name] = rng.integers(0, ids_rows[name], size=shape).astype(np.float64)
        else:
            feeds[name] = rng.standard_normal(shape)
    return feeds


# --------------------------------------------------------------------------- array files


def write_array(path, name, value):
    """Write one array: a JSON header line, then little-endian f64 data in column-major order."""
    value = np.asarray(value, dtype="<f8")
    header = json.dumps({"name": name, "shape": list(value.shape), "dtype": "f64"}, sort_keys=True)
    with open(path, "wb") as fh:
        fh.write(header.encode() + b"\n")
        fh.write(value.tobytes(order="F"))


def read_array(path):
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: bad array header") from exc
        if set(header) != {"name", "shape", "dtype"} or header["dtype"] != "f64":
            raise SchemaError(f"{path}: header must be {{name, shape, dtype: f64}}")
        data = np.frombuffer(fh.read(), dtype="<f8")
    shape = tuple(header["shape"])
    if data.size != int(np.prod(shape)):
        raise SchemaError(f"{path}: {data.size} values for shape {shape}")
    return header["name"], data.reshape(shape, order="F").astype(np.float64)


def load_array_dir(directory) -> dict:
    out = {}
    for entry in sorted(os.listdir(directory)):
        if entry.endswith(".arr"):
            name, value = read_array(Path(directory) / entry)
            out[name] = value
    return out


def save_array_dir(directory, arrays: dict):
    Path(directory).mkdir(parents=True, exist_ok=True)
    for name, value in sorted(arrays.items()):
        write_array(Path(directory) / f"{name}.arr", name, value)
