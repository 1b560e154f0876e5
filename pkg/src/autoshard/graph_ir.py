"""Serial computational graphs and their distributed enhancement.

A :class:`SerialGraph` is the semantics baseline. A :class:`DistributedGraph`
decorates it with one :class:`DistAttr` per tensor (how the produced tensor
is actually laid out) and one :class:`OpDistAttr` per operator (what layout
the operator requires for each of its inputs and outputs).
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

from .errors import (
    ArityMismatch,
    CycleDetected,
    DuplicateProducer,
    InvalidAttr,
    SchemaError,
    ShapeMismatch,
    UnknownName,
    UnknownProcess,
    UnknownTensor,
)

DTYPE_SIZES = {"f64": 8, "f32": 4, "i64": 8}

# kind -> (number of inputs, number of outputs)
OP_ARITY = {
    "matmul": (2, 1),
    "relu": (1, 1),
    "add": (2, 1),
    "elementwise_mul": (2, 1),
    "reduce_sum": (1, 1),
    "embedding_lookup": (2, 1),
    "identity": (1, 1),
}

Box = tuple  # tuple of (lo, hi) half-open intervals, one per dim


@dataclass(frozen=True)
class TensorSpec:
    name: str
    shape: tuple
    dtype: str = "f64"

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if any(s < 1 for s in self.shape):
            raise ShapeMismatch(f"tensor {self.name!r}: extents must be >= 1, got {self.shape}")
        if self.dtype not in DTYPE_SIZES:
            raise SchemaError(f"tensor {self.name!r}: unknown dtype {self.dtype!r}")

    @property
    def rank(self) -> int:
        return len(self.shape)

    @property
    def itemsize(self) -> int:
        return DTYPE_SIZES[self.dtype]

    @property
    def nbytes(self) -> int:
        return math.prod(self.shape) * self.itemsize


@dataclass(frozen=True)
class OpSpec:
    name: str
    kind: str
    inputs: tuple
    outputs: tuple
    attrs: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "outputs", tuple(self.outputs))
        attrs = self.attrs.items() if isinstance(self.attrs, Mapping) else self.attrs
        object.__setattr__(self, "attrs", tuple(sorted(attrs)))
        if self.kind not in OP_ARITY:
            raise SchemaError(f"op {self.name!r}: unknown kind {self.kind!r}")
        n_in, n_out = OP_ARITY[self.kind]
        if len(self.inputs) != n_in or len(self.outputs) != n_out:
            raise ArityMismatch(
                f"op {self.name!r} ({self.kind}) takes {n_in} inputs / {n_out} outputs, "
                f"got {len(self.inputs)} / {len(self.outputs)}"
            )
        trips = self.attr("trip_count", 1)
        if isinstance(trips, bool) or not isinstance(trips, int) or trips < 1:
            raise SchemaError(f"op {self.name!r}: trip_count must be a positive integer, got {trips!r}")

    def attr(self, key, default=None):
        return dict(self.attrs).get(key, default)


def infer_output_shape(op: OpSpec, in_shapes: Sequence[tuple]) -> tuple:
    """Shape of ``op``'s single output given its input shapes."""
    kind = op.kind
    if kind in ("relu", "identity"):
        return tuple(in_shapes[0])
    if kind in ("add", "elementwise_mul"):
        a, b = in_shapes
        if tuple(a) != tuple(b):
            raise ShapeMismatch(f"op {op.name!r}: operand shapes differ {a} vs {b}")
        return tuple(a)
    if kind == "matmul":
        a, b = in_shapes
        if len(a) != 2 or len(b) != 2 or a[1] != b[0]:
            raise ShapeMismatch(f"op {op.name!r}: cannot multiply {a} by {b}")
        return (a[0], b[1])
    if kind == "reduce_sum":
        (a,) = in_shapes
        axis = reduce_axis(op, len(a))
        if op.attr("keepdims", False):
            return tuple(1 if d == axis else s for d, s in enumerate(a))
        return tuple(s for d, s in enumerate(a) if d != axis)
    if kind == "embedding_lookup":
        ids, table = in_shapes
        if len(ids) != 1 or len(table) != 2:
            raise ShapeMismatch(f"op {op.name!r}: expects ids [N] and table [V, D], got {ids}, {table}")
        return (ids[0], table[1])
    raise SchemaError(f"unknown kind {kind!r}")


def reduce_axis(op: OpSpec, rank: int) -> int:
    axis = int(op.attr("axis", 0))
    if axis < 0:
        axis += rank
    if not 0 <= axis < rank:
        raise ShapeMismatch(f"op {op.name!r}: axis {op.attr('axis')} out of range for rank {rank}")
    return axis


@dataclass(frozen=True)
class SerialGraph:
    tensors: Mapping
    ops: tuple
    feeds: frozenset
    fetches: frozenset
    topo_order: tuple = ()

    def op(self, name: str) -> OpSpec:
        for op in self.ops:
            if op.name == name:
                return op
        raise UnknownName(name)

    @property
    def op_names(self) -> tuple:
        return tuple(op.name for op in self.ops)

    def ordered_ops(self) -> list:
        by_name = {op.name: op for op in self.ops}
        return [by_name[n] for n in self.topo_order]

    def producer(self, tensor: str):
        for op in self.ops:
            if tensor in op.outputs:
                return op
        return None

    def consumers(self, tensor: str) -> list:
        """Ops reading ``tensor``, in topological order."""
        return [op for op in self.ordered_ops() if tensor in op.inputs]


def build_graph(ops: Iterable[OpSpec], tensors: Iterable[TensorSpec], feeds, fetches) -> SerialGraph:
    ops = tuple(ops)
    tensor_map = {}
    for t in tensors:
        if t.name in tensor_map:
            raise DuplicateProducer(f"tensor {t.name!r} declared twice")
        tensor_map[t.name] = t
    feeds = frozenset(feeds)
    fetches = frozenset(fetches)

    seen_ops = set()
    producer = {}
    for op in ops:
        if op.name in seen_ops:
            raise DuplicateProducer(f"op name {op.name!r} used twice")
        seen_ops.add(op.name)
        for name in (*op.inputs, *op.outputs):
            if name not in tensor_map:
                raise UnknownTensor(f"op {op.name!r} references undeclared tensor {name!r}")
        for out in op.outputs:
            if out in producer or out in feeds:
                raise DuplicateProducer(f"tensor {out!r} has more than one producer")
            producer[out] = op.name
    for name in feeds | fetches:
        if name not in tensor_map:
            raise UnknownTensor(f"feed/fetch {name!r} is not a declared tensor")
    for op in ops:
        for name in op.inputs:
            if name not in producer and name not in feeds:
                raise UnknownTensor(f"op {op.name!r} input {name!r} is neither fed nor produced")
    for name in fetches:
        if name not in producer and name not in feeds:
            raise UnknownTensor(f"fetch {name!r} is neither fed nor produced")

    # Kahn's algorithm; ties broken by declaration order.
    index = {op.name: i for i, op in enumerate(ops)}
    deps = {op.name: {producer[i] for i in op.inputs if i in producer} for op in ops}
    users = {op.name: [] for op in ops}
    for name, ds in deps.items():
        for d in ds:
            users[d].append(name)
    pending = {name: len(ds) for name, ds in deps.items()}
    ready = [index[n] for n, c in pending.items() if c == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        name = ops[heapq.heappop(ready)].name
        order.append(name)
        for u in users[name]:
            pending[u] -= 1
            if pending[u] == 0:
                heapq.heappush(ready, index[u])
    if len(order) != len(ops):
        stuck = sorted(n for n, c in pending.items() if c > 0)
        raise CycleDetected(f"graph has a cycle through {stuck}")

    for op in ops:
        out_shape = infer_output_shape(op, [tensor_map[i].shape for i in op.inputs])
        declared = tensor_map[op.outputs[0]].shape
        if tuple(out_shape) != tuple(declared):
            raise ShapeMismatch(
                f"op {op.name!r} produces shape {out_shape} but {op.outputs[0]!r} is declared {declared}"
            )
    return SerialGraph(tensor_map, ops, feeds, fetches, tuple(order))


@dataclass(frozen=True)
class ProcessMesh:
    shape: tuple
    process_ids: tuple

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "process_ids", tuple(int(p) for p in self.process_ids))
        if not self.shape or any(s < 1 for s in self.shape):
            raise InvalidAttr(f"mesh shape must be non-empty positive, got {self.shape}")
        if len(self.process_ids) != math.prod(self.shape):
            raise InvalidAttr(f"mesh {self.shape} needs {math.prod(self.shape)} ids, got {len(self.process_ids)}")
        if len(set(self.process_ids)) != len(self.process_ids) or min(self.process_ids) < 0:
            raise InvalidAttr(f"mesh process ids must be distinct and non-negative: {self.process_ids}")

    @classmethod
    def from_nested(cls, nested) -> "ProcessMesh":
        """Build from a nested list such as ``[[2, 3], [4, 5]]``."""
        shape = []
        level = nested
        while isinstance(level, (list, tuple)):
            shape.append(len(level))
            level = level[0] if level else None
        flat = []

        def walk(x, depth):
            if depth == len(shape):
                flat.append(x)
                return
            if not isinstance(x, (list, tuple)) or len(x) != shape[depth]:
                raise InvalidAttr(f"ragged process mesh {nested}")
            for y in x:
                walk(y, depth + 1)

        walk(nested, 0)
        return cls(tuple(shape), tuple(flat))

    def to_nested(self):
        def build(offset, dims):
            if not dims:
                return self.process_ids[offset]
            step = math.prod(dims[1:])
            return [build(offset + i * step, dims[1:]) for i in range(dims[0])]

        return build(0, list(self.shape))

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return len(self.process_ids)

    def coords(self, p: int) -> tuple:
        try:
            flat = self.process_ids.index(p)
        except ValueError:
            raise UnknownProcess(f"process {p} is not in mesh {self.process_ids}") from None
        out = []
        for extent in reversed(self.shape):
            out.append(flat % extent)
            flat //= extent
        return tuple(reversed(out))

    def process_at(self, coords) -> int:
        flat = 0
        for c, extent in zip(coords, self.shape):
            flat = flat * extent + c
        return self.process_ids[flat]

    def groups_along(self, axis: int) -> list:
        """Process groups that vary only along ``axis``, each ordered by its coordinate."""
        groups = {}
        for p in self.process_ids:
            c = self.coords(p)
            key = c[:axis] + c[axis + 1:]
            groups.setdefault(key, []).append((c[axis], p))
        return [tuple(p for _, p in sorted(g)) for _, g in sorted(groups.items())]


@dataclass(frozen=True)
class DistAttr:
    process_mesh: ProcessMesh
    dims_mapping: tuple
    shard_sizes: tuple
    device_placement: tuple = ()  # sorted (process_id, device_id) pairs; empty = unplaced

    def __post_init__(self):
        object.__setattr__(self, "dims_mapping", tuple(int(d) for d in self.dims_mapping))
        object.__setattr__(self, "shard_sizes", tuple(tuple(int(s) for s in ss) for ss in self.shard_sizes))
        placement = self.device_placement
        if isinstance(placement, Mapping):
            placement = placement.items()
        object.__setattr__(self, "device_placement", tuple(sorted((int(p), str(d)) for p, d in placement)))

    @property
    def placement(self) -> dict:
        return dict(self.device_placement)

    @property
    def rank(self) -> int:
        return len(self.dims_mapping)

    def global_shape(self) -> tuple:
        return tuple(
            sum(ss) if a >= 0 else ss[0] for a, ss in zip(self.dims_mapping, self.shard_sizes)
        )

    def canonical(self) -> "DistAttr":
        sizes = tuple(ss if a >= 0 else ss[:1] for a, ss in zip(self.dims_mapping, self.shard_sizes))
        return replace(self, shard_sizes=sizes)

    def expanded_sizes(self) -> list:
        """Shard sizes in table form: replicated dims repeated once per first-axis process."""
        n = self.process_mesh.shape[0]
        return [list(ss) if a >= 0 else [ss[0]] * n for a, ss in zip(self.dims_mapping, self.shard_sizes)]

    def with_placement(self, placement) -> "DistAttr":
        return replace(self, device_placement=tuple(placement.items()) if isinstance(placement, Mapping) else placement)

    def device_of(self, p: int):
        return self.placement.get(p)

    def box(self, p: int) -> Box:
        coords = self.process_mesh.coords(p)
        out = []
        for a, ss in zip(self.dims_mapping, self.shard_sizes):
            if a < 0:
                out.append((0, ss[0]))
            else:
                k = coords[a]
                lo = sum(ss[:k])
                out.append((lo, lo + ss[k]))
        return tuple(out)

    def is_replicated(self) -> bool:
        return all(a < 0 for a in self.dims_mapping)


def even_sizes(extent: int, parts: int) -> tuple:
    """Split ``extent`` into ``parts`` near-equal sizes (larger shards first)."""
    q, r = divmod(extent, parts)
    return tuple(q + (1 if i < r else 0) for i in range(parts))


def make_attr(shape, mesh: ProcessMesh, dims_mapping, placement=(), sizes=None) -> DistAttr:
    """Canonical attr with near-even shard sizes unless ``sizes`` overrides a dim."""
    shard_sizes = []
    for d, (extent, a) in enumerate(zip(shape, dims_mapping)):
        if sizes is not None and sizes[d] is not None:
            shard_sizes.append(tuple(sizes[d]))
        elif a < 0:
            shard_sizes.append((extent,))
        else:
            shard_sizes.append(even_sizes(extent, mesh.shape[a]))
    return DistAttr(mesh, tuple(dims_mapping), tuple(shard_sizes), placement)


def replicated(shape, mesh: ProcessMesh, placement=()) -> DistAttr:
    return make_attr(shape, mesh, (-1,) * len(shape), placement)


def validate_dist_attr(t: TensorSpec, a: DistAttr, devices=None) -> list:
    """Return a list of human-readable invariant violations (empty when valid)."""
    report = []
    mesh = a.process_mesh
    if len(a.dims_mapping) != t.rank:
        report.append(f"dims_mapping has {len(a.dims_mapping)} entries, tensor rank is {t.rank}")
    if len(a.shard_sizes) != t.rank:
        report.append(f"shard_sizes has {len(a.shard_sizes)} entries, tensor rank is {t.rank}")
    used = [x for x in a.dims_mapping if x >= 0]
    if len(used) != len(set(used)):
        report.append(f"mesh axis reused in dims_mapping {list(a.dims_mapping)}")
    for d, (axis, ss) in enumerate(zip(a.dims_mapping, a.shard_sizes)):
        if d >= t.rank:
            break
        extent = t.shape[d]
        if axis < -1 or axis >= mesh.ndim:
            report.append(f"dim {d}: mesh axis {axis} invalid for {mesh.ndim}-d mesh")
            continue
        if any(s < 0 for s in ss):
            report.append(f"dim {d}: negative shard size in {list(ss)}")
        if axis >= 0:
            if len(ss) != mesh.shape[axis]:
                report.append(f"dim {d}: {len(ss)} shard sizes for mesh axis of extent {mesh.shape[axis]}")
            if sum(ss) != extent:
                report.append(f"dim {d}: shard sizes sum to {sum(ss)} != extent {extent}")
        else:
            if len(ss) < 1 or any(s != extent for s in ss):
                report.append(f"dim {d}: replicated dim needs every shard size == {extent}, got {list(ss)}")
    if a.device_placement:
        placed = {p for p, _ in a.device_placement}
        if placed != set(mesh.process_ids):
            report.append(f"device_placement covers {sorted(placed)}, mesh has {sorted(mesh.process_ids)}")
        if devices is not None:
            for p, dev in a.device_placement:
                if dev not in devices:
                    report.append(f"process {p} placed on unknown device {dev!r}")
    return report


def local_shard_shape(t: TensorSpec, a: DistAttr, p: int) -> tuple:
    return tuple(hi - lo for lo, hi in shard_index_range(t, a, p))


def shard_index_range(t: TensorSpec, a: DistAttr, p: int) -> Box:
    if p not in a.process_mesh.process_ids:
        raise UnknownProcess(f"process {p} not in mesh {a.process_mesh.process_ids}")
    return a.box(p)


def box_volume(box: Box) -> int:
    return math.prod(hi - lo for lo, hi in box)


def box_intersect(a: Box, b: Box):
    out = tuple((max(al, bl), min(ah, bh)) for (al, ah), (bl, bh) in zip(a, b))
    if any(lo >= hi for lo, hi in out):
        return None
    return out


def full_box(shape) -> Box:
    return tuple((0, s) for s in shape)


@dataclass(frozen=True)
class OpDistAttr:
    process_mesh: ProcessMesh
    input_reqs: Mapping = field(default_factory=dict)
    output_reqs: Mapping = field(default_factory=dict)
    device_placement: tuple = ()

    def __post_init__(self):
        placement = self.device_placement
        if isinstance(placement, Mapping):
            placement = placement.items()
        object.__setattr__(self, "device_placement", tuple(sorted((int(p), str(d)) for p, d in placement)))

    def placement(self) -> dict:
        """Process -> device map, taken from the first placed requirement if not set directly."""
        if self.device_placement:
            return dict(self.device_placement)
        for req in (*self.input_reqs.values(), *self.output_reqs.values()):
            if req.device_placement:
                return req.placement
        return {}


@dataclass(frozen=True)
class DistributedGraph:
    base: SerialGraph
    tensor_attrs: Mapping = field(default_factory=dict)
    op_attrs: Mapping = field(default_factory=dict)
    inserted_comm: tuple = ()

    def unfilled_tensors(self) -> list:
        return sorted(n for n in self.base.tensors if n not in self.tensor_attrs)

    def unfilled_ops(self) -> list:
        return [n for n in self.base.op_names if n not in self.op_attrs]

    def is_complete(self) -> bool:
        if self.unfilled_tensors() or self.unfilled_ops():
            return False
        for op in self.base.ops:
            oa = self.op_attrs[op.name]
            if set(oa.input_reqs) != set(op.inputs) or set(oa.output_reqs) != set(op.outputs):
                return False
        return True

    def processes(self) -> list:
        procs = set()
        for a in self.tensor_attrs.values():
            procs.update(a.process_mesh.process_ids)
        for oa in self.op_attrs.values():
            procs.update(oa.process_mesh.process_ids)
        return sorted(procs)

    def devices(self) -> set:
        devs = set()
        for a in self.tensor_attrs.values():
            devs.update(d for _, d in a.device_placement)
        for oa in self.op_attrs.values():
            devs.update(oa.placement().values())
        return devs


def _check_op_attr(g: SerialGraph, op: OpSpec, oa: OpDistAttr):
    for side, names, reqs in (("input", op.inputs, oa.input_reqs), ("output", op.outputs, oa.output_reqs)):
        for name, req in reqs.items():
            if name not in names:
                raise UnknownName(f"op {op.name!r} has no {side} {name!r}")
            if req.process_mesh != oa.process_mesh:
                raise InvalidAttr(f"op {op.name!r}: {side} {name!r} requirement is not on the op's process mesh")
            problems = validate_dist_attr(g.tensors[name], req)
            if problems:
                raise InvalidAttr(f"op {op.name!r} {side} {name!r}: " + "; ".join(problems))


def annotate(g: SerialGraph, partial: Mapping) -> DistributedGraph:
    """Attach user annotations verbatim (canonicalized); everything else stays unfilled.

    ``partial`` has optional keys ``"tensors"`` (name -> DistAttr) and
    ``"ops"`` (name -> OpDistAttr).
    """
    tensors = {}
    for name, attr in (partial.get("tensors") or {}).items():
        if name not in g.tensors:
            raise UnknownName(f"annotation for unknown tensor {name!r}")
        problems = validate_dist_attr(g.tensors[name], attr)
        if problems:
            raise InvalidAttr(f"tensor {name!r}: " + "; ".join(problems))
        tensors[name] = attr.canonical()
    ops = {}
    op_names = set(g.op_names)
    for name, oa in (partial.get("ops") or {}).items():
        if name not in op_names:
            raise UnknownName(f"annotation for unknown op {name!r}")
        _check_op_attr(g, g.op(name), oa)
        ops[name] = replace(
            oa,
            input_reqs={k: v.canonical() for k, v in oa.input_reqs.items()},
            output_reqs={k: v.canonical() for k, v in oa.output_reqs.items()},
        )
    return DistributedGraph(g, tensors, ops)


def partition_signature(dg: DistributedGraph) -> str:
    """Stable hash of the partition (meshes, mappings, sizes), ignoring device placement."""
    import hashlib

    def strip(a: DistAttr):
        return [a.process_mesh.to_nested(), list(a.dims_mapping), [list(s) for s in a.shard_sizes]]

    doc = {
        "tensors": {n: strip(a) for n, a in sorted(dg.tensor_attrs.items())},
        "ops": {
            n: {
                "in": {k: strip(v) for k, v in sorted(oa.input_reqs.items())},
                "out": {k: strip(v) for k, v in sorted(oa.output_reqs.items())},
            }
            for n, oa in sorted(dg.op_attrs.items())
        },
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


# --------------------------------------------------------------------------- JSON

_GRAPH_KEYS = {"tensors", "ops", "feeds", "fetches", "annotations"}
_ATTR_KEYS = {"process_mesh", "dims_mapping", "shard_sizes", "device_placement"}
_OPATTR_KEYS = {"process_mesh", "device_placement", "inputs", "outputs"}


def _reject_unknown(doc, allowed, where):
    if not isinstance(doc, Mapping):
        raise SchemaError(f"{where}: expected an object")
    extra = set(doc) - set(allowed)
    if extra:
        raise SchemaError(f"{where}: unknown field(s) {sorted(extra)}")


def attr_to_json(a: DistAttr) -> dict:
    return {
        "process_mesh": a.process_mesh.to_nested(),
        "dims_mapping": list(a.dims_mapping),
        "shard_sizes": a.expanded_sizes(),
        "device_placement": {str(p): d for p, d in a.device_placement},
    }


def attr_from_json(doc, where="attr") -> DistAttr:
    _reject_unknown(doc, _ATTR_KEYS, where)
    for key in ("process_mesh", "dims_mapping", "shard_sizes"):
        if key not in doc:
            raise SchemaError(f"{where}: missing field {key!r}")
    try:
        mesh = ProcessMesh.from_nested(doc["process_mesh"])
        placement = {int(p): d for p, d in (doc.get("device_placement") or {}).items()}
        return DistAttr(mesh, doc["dims_mapping"], doc["shard_sizes"], placement)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{where}: {exc}") from exc


def op_attr_to_json(oa: OpDistAttr) -> dict:
    out = {
        "process_mesh": oa.process_mesh.to_nested(),
        "inputs": {k: attr_to_json(v) for k, v in sorted(oa.input_reqs.items())},
        "outputs": {k: attr_to_json(v) for k, v in sorted(oa.output_reqs.items())},
    }
    if oa.device_placement:
        out["device_placement"] = {str(p): d for p, d in oa.device_placement}
    return out


def op_attr_from_json(doc, where="op attr") -> OpDistAttr:
    _reject_unknown(doc, _OPATTR_KEYS, where)
    if "process_mesh" not in doc:
        raise SchemaError(f"{where}: missing field 'process_mesh'")
    mesh = ProcessMesh.from_nested(doc["process_mesh"])
    ins = {k: attr_from_json(v, f"{where}.inputs.{k}") for k, v in (doc.get("inputs") or {}).items()}
    outs = {k: attr_from_json(v, f"{where}.outputs.{k}") for k, v in (doc.get("outputs") or {}).items()}
    placement = {int(p): d for p, d in (doc.get("device_placement") or {}).items()}
    return OpDistAttr(mesh, ins, outs, placement)


def graph_to_json(g) -> dict:
    """Serialize a SerialGraph or DistributedGraph to the graph schema."""
    dg = g if isinstance(g, DistributedGraph) else DistributedGraph(g)
    base = dg.base
    return {
        "tensors": [
            {"name": t.name, "shape": list(t.shape), "dtype": t.dtype}
            for t in sorted(base.tensors.values(), key=lambda t: t.name)
        ],
        "ops": [
            {"name": op.name, "kind": op.kind, "inputs": list(op.inputs), "outputs": list(op.outputs),
             "attrs": dict(op.attrs)}
            for op in base.ops
        ],
        "feeds": sorted(base.feeds),
        "fetches": sorted(base.fetches),
        "annotations": {
            "tensors": {n: attr_to_json(a) for n, a in sorted(dg.tensor_attrs.items())},
            "ops": {n: op_attr_to_json(a) for n, a in sorted(dg.op_attrs.items())},
        },
    }


def graph_from_json(doc) -> DistributedGraph:
    """Parse the graph schema into an annotated (possibly partial) DistributedGraph."""
    _reject_unknown(doc, _GRAPH_KEYS, "graph")
    for key in ("tensors", "ops", "feeds", "fetches"):
        if key not in doc:
            raise SchemaError(f"graph: missing field {key!r}")
    tensors = []
    for i, t in enumerate(doc["tensors"]):
        _reject_unknown(t, {"name", "shape", "dtype"}, f"graph.tensors[{i}]")
        tensors.append(TensorSpec(t["name"], tuple(t["shape"]), t.get("dtype", "f64")))
    ops = []
    for i, o in enumerate(doc["ops"]):
        _reject_unknown(o, {"name", "kind", "inputs", "outputs", "attrs"}, f"graph.ops[{i}]")
        ops.append(OpSpec(o["name"], o["kind"], tuple(o["inputs"]), tuple(o["outputs"]), o.get("attrs") or {}))
    g = build_graph(ops, tensors, doc["feeds"], doc["fetches"])
    ann = doc.get("annotations") or {}
    _reject_unknown(ann, {"tensors", "ops"}, "graph.annotations")
    partial = {
        "tensors": {n: attr_from_json(a, f"annotations.tensors.{n}") for n, a in (ann.get("tensors") or {}).items()},
        "ops": {n: op_attr_from_json(a, f"annotations.ops.{n}") for n, a in (ann.get("ops") or {}).items()},
    }
    return annotate(g, partial)


def load_graph(path) -> DistributedGraph:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON ({exc})") from exc
    return graph_from_json(doc)
