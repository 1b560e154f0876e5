"""Completion of partially annotated distributed graphs.

Per-kind propagation rules live here too; the numeric runtime and the planner
reuse :func:`check_reqs`, :func:`forward_output` and :func:`reduction_axis`
so that "legal", "inferred" and "executed" always agree.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from typing import Callable, Optional

from .errors import CompletionError, ConflictingAnnotations
from .graph_ir import (
    DistAttr,
    DistributedGraph,
    OpDistAttr,
    OpSpec,
    ProcessMesh,
    make_attr,
    reduce_axis,
    replicated,
    validate_dist_attr,
)

# --------------------------------------------------------------------------- rules


def _placed(req: DistAttr, placement: dict) -> DistAttr:
    return replace(req, device_placement=tuple(sorted(placement.items())))


def check_reqs(op: OpSpec, shapes, reqs) -> Optional[str]:
    """Why the input requirements ``reqs`` cannot be computed locally, or None if legal.

    ``shapes`` are the global input shapes, in op input order.
    """
    mesh = reqs[0].process_mesh
    placements = {r.device_placement for r in reqs if r.device_placement}
    if any(r.process_mesh != mesh for r in reqs):
        return "requirements use different process meshes"
    if len(placements) > 1:
        return "requirements use different device placements"
    for r, s in zip(reqs, shapes):
        if r.global_shape() != tuple(s):
            return f"requirement shape {r.global_shape()} != tensor shape {tuple(s)}"
    kind = op.kind
    if kind in ("add", "elementwise_mul"):
        a, b = (r.canonical() for r in reqs)
        if a.dims_mapping != b.dims_mapping or a.shard_sizes != b.shard_sizes:
            return "elementwise operands must share one layout"
        return None
    if kind == "matmul":
        a, b = reqs
        a0, a1 = a.dims_mapping
        b0, b1 = b.dims_mapping
        if a0 >= 0 and a0 == b1:
            return "rows of A and columns of B sharded on the same mesh axis"
        if a1 >= 0 and b0 >= 0 and (a1 != b0 or a.shard_sizes[1] != b.shard_sizes[0]):
            return "contracted dim sharded inconsistently"
        c = a1 if a1 >= 0 else b0
        if c >= 0 and c in (a0, b1):
            return "contracted mesh axis also shards an output dim"
        return None
    if kind == "embedding_lookup":
        ids, table = reqs
        i0 = ids.dims_mapping[0]
        if i0 >= 0 and i0 in table.dims_mapping:
            return "ids and table sharded on the same mesh axis"
        return None
    return None


def reduction_axis(op: OpSpec, reqs) -> int:
    """Mesh axis along which local results are partial sums (-1 if none)."""
    if op.kind == "matmul":
        a1 = reqs[0].dims_mapping[1]
        return a1 if a1 >= 0 else reqs[1].dims_mapping[0]
    if op.kind == "embedding_lookup":
        return reqs[1].dims_mapping[0]
    if op.kind == "reduce_sum":
        return reqs[0].dims_mapping[reduce_axis(op, reqs[0].rank)]
    return -1


def forward_output(op: OpSpec, reqs) -> DistAttr:
    """Layout the operator produces for its output given legal input requirements."""
    a = reqs[0]
    mesh, placement = a.process_mesh, a.device_placement
    if op.kind in ("relu", "identity", "add", "elementwise_mul"):
        return a.canonical()
    if op.kind == "matmul":
        b = reqs[1]
        dm = (a.dims_mapping[0], b.dims_mapping[1])
        sizes = (a.shard_sizes[0], b.shard_sizes[1])
        return DistAttr(mesh, dm, sizes, placement).canonical()
    if op.kind == "embedding_lookup":
        table = reqs[1]
        dm = (a.dims_mapping[0], table.dims_mapping[1])
        sizes = (a.shard_sizes[0], table.shard_sizes[1])
        return DistAttr(mesh, dm, sizes, placement).canonical()
    if op.kind == "reduce_sum":
        r = reduce_axis(op, a.rank)
        if op.attr("keepdims", False):
            dm = tuple(-1 if d == r else x for d, x in enumerate(a.dims_mapping))
            sizes = tuple((1,) if d == r else s for d, s in enumerate(a.shard_sizes))
        else:
            dm = tuple(x for d, x in enumerate(a.dims_mapping) if d != r)
            sizes = tuple(s for d, s in enumerate(a.shard_sizes) if d != r)
        return DistAttr(mesh, dm, sizes, placement).canonical()
    raise ValueError(op.kind)


def backward_inputs(op: OpSpec, shapes, out: DistAttr) -> list:
    """Input layouts that would make ``op`` produce ``out`` without an all-reduce."""
    mesh, placement = out.process_mesh, out.device_placement
    dm, ss = out.dims_mapping, out.shard_sizes
    if op.kind in ("relu", "identity"):
        return [out]
    if op.kind in ("add", "elementwise_mul"):
        return [out, out]
    if op.kind == "matmul":
        (m, k), (_, n) = shapes
        a = DistAttr(mesh, (dm[0], -1), (ss[0], (k,)), placement)
        b = DistAttr(mesh, (-1, dm[1]), ((k,), ss[1]), placement)
        return [a, b]
    if op.kind == "embedding_lookup":
        (nids,), (v, d) = shapes
        ids = DistAttr(mesh, (dm[0],), (ss[0],), placement)
        table = DistAttr(mesh, (-1, dm[1]), ((v,), ss[1]), placement)
        return [ids, table]
    if op.kind == "reduce_sum":
        shape = shapes[0]
        r = reduce_axis(op, len(shape))
        dims, sizes = list(dm), list(ss)
        if op.attr("keepdims", False):
            dims[r], sizes[r] = -1, (shape[r],)
        else:
            dims.insert(r, -1)
            sizes.insert(r, (shape[r],))
        return [DistAttr(mesh, dims, sizes, placement)]
    raise ValueError(op.kind)


@dataclass(frozen=True)
class PropagationRule:
    kind: str
    forward: Callable
    backward: Callable


RULES = {
    kind: PropagationRule(kind, forward_output, backward_inputs)
    for kind in ("matmul", "relu", "add", "elementwise_mul", "reduce_sum", "embedding_lookup", "identity")
}


# --------------------------------------------------------------------------- helpers


def transplant(attr: DistAttr, shape, mesh: ProcessMesh, placement: dict) -> DistAttr:
    """Carry ``attr``'s partition over to ``mesh`` where the axes line up; replicate the rest."""
    if attr.process_mesh == mesh:
        return _placed(attr.canonical(), placement)
    dm, sizes = [], []
    for a, ss, extent in zip(attr.dims_mapping, attr.shard_sizes, shape):
        if a >= 0 and a < mesh.ndim and attr.process_mesh.shape[a] == mesh.shape[a]:
            dm.append(a)
            sizes.append(ss)
        else:
            dm.append(-1)
            sizes.append((extent,))
    return _placed(DistAttr(mesh, dm, sizes).canonical(), placement)


def _relaxations(attr: DistAttr, shape):
    """``attr`` followed by variants with progressively more dims replicated."""
    mapped = [d for d, a in enumerate(attr.dims_mapping) if a >= 0]
    for k in range(len(mapped) + 1):
        for drop in itertools.combinations(mapped, k):
            dm = list(attr.dims_mapping)
            sizes = list(attr.shard_sizes)
            for d in drop:
                dm[d] = -1
                sizes[d] = (shape[d],)
            yield DistAttr(attr.process_mesh, dm, sizes, attr.device_placement)


def resolve_inputs(op: OpSpec, shapes, mesh, placement, fixed, candidates) -> list:
    """Pick one requirement per input.

    ``fixed[i]`` is a user requirement (kept verbatim) or None; ``candidates[i]``
    is an ordered list of preferred layouts for unfixed slots. Raises
    ConflictingAnnotations if the fixed requirements cannot work together.
    """
    n = len(shapes)
    defaults = [replicated(s, mesh, placement) for s in shapes]
    reqs = list(fixed)
    if op.kind in ("add", "elementwise_mul"):
        ref = next((r for r in fixed if r is not None), None)
        if ref is None:
            ref = next((c[0] for c in candidates if c), defaults[0])
        reqs = [r if r is not None else ref for r in reqs]
    else:
        for i in range(n):
            if reqs[i] is not None:
                continue
            chosen = None
            for cand in candidates[i]:
                for variant in _relaxations(cand, shapes[i]):
                    trial = [r if r is not None else defaults[j] for j, r in enumerate(reqs)]
                    trial[i] = variant
                    if check_reqs(op, shapes, trial) is None:
                        chosen = variant
                        break
                if chosen is not None:
                    break
            reqs[i] = chosen if chosen is not None else defaults[i]
    problem = check_reqs(op, shapes, reqs)
    if problem:
        raise ConflictingAnnotations(f"op {op.name!r}: {problem}")
    return [r.canonical() for r in reqs]


# --------------------------------------------------------------------------- completion


class _Completer:
    def __init__(self, dg: DistributedGraph, default_mesh, default_placement):
        self.dg = dg
        self.g = dg.base
        self.default_mesh = default_mesh
        self.default_placement = dict(default_placement or {})
        self.tensors = dict(dg.tensor_attrs)
        self.user_tensors = set(dg.tensor_attrs)
        self.decided = {}  # op name -> (in_reqs list, out_req)
        self.order = self.g.ordered_ops()

    def shapes(self, op):
        return [self.g.tensors[i].shape for i in op.inputs]

    def decide(self, op: OpSpec, mesh, placement, out_hint=None):
        user = self.dg.op_attrs.get(op.name)
        shapes = self.shapes(op)
        out_name = op.outputs[0]
        fixed_out = user.output_reqs.get(out_name) if user else None
        if out_name in self.user_tensors:
            tattr = self.tensors[out_name]
            if fixed_out is not None and fixed_out != tattr:
                raise ConflictingAnnotations(
                    f"op {op.name!r}: output requirement differs from the annotation of {out_name!r}"
                )
            if tattr.process_mesh != mesh:
                raise ConflictingAnnotations(
                    f"op {op.name!r}: annotated output {out_name!r} is not on the op's process mesh"
                )
            fixed_out = tattr
        fixed = [user.input_reqs.get(i) if user else None for i in op.inputs]
        target_out = fixed_out if fixed_out is not None else out_hint
        back = backward_inputs(op, shapes, _placed(target_out, placement)) if target_out is not None else None
        candidates = []
        for k, name in enumerate(op.inputs):
            cands = []
            if back is not None:
                cands.append(transplant(back[k], shapes[k], mesh, placement))
            if name in self.tensors:
                cands.append(transplant(self.tensors[name], shapes[k], mesh, placement))
            candidates.append(cands)
        ins = resolve_inputs(op, shapes, mesh, placement, fixed, candidates)
        out = forward_output(op, ins)
        if fixed_out is not None and out != fixed_out.canonical():
            raise ConflictingAnnotations(
                f"op {op.name!r}: inputs produce {out.dims_mapping} but output is annotated {fixed_out.dims_mapping}"
            )
        self.decided[op.name] = (ins, out)
        self.tensors[out_name] = out

    def op_mesh(self, op):
        user = self.dg.op_attrs.get(op.name)
        if user is not None:
            return user.process_mesh, user.placement()
        for name in op.inputs:
            if name in self.tensors:
                a = self.tensors[name]
                return a.process_mesh, a.placement
        return None

    def forward_sweep(self):
        changed = False
        for op in self.order:
            if op.name in self.decided:
                continue
            found = None
            if op.name not in self.dg.op_attrs and op.outputs[0] in self.user_tensors:
                a = self.tensors[op.outputs[0]]
                found = (a.process_mesh, a.placement)
            if found is None:
                found = self.op_mesh(op)
            if found is not None:
                self.decide(op, *found)
                changed = True
        return changed

    def consumer_hint(self, tensor):
        for op in self.g.consumers(tensor):
            if op.name in self.decided:
                ins, _ = self.decided[op.name]
                return ins[op.inputs.index(tensor)]
            user = self.dg.op_attrs.get(op.name)
            if user is not None and tensor in user.input_reqs:
                return user.input_reqs[tensor]
        return None

    def backward_sweep(self):
        changed = False
        for op in reversed(self.order):
            if op.name in self.decided:
                continue
            hint = self.consumer_hint(op.outputs[0])
            if hint is not None:
                self.decide(op, hint.process_mesh, hint.placement, out_hint=hint)
                changed = True
        for name in sorted(self.g.feeds):
            if name not in self.tensors:
                hint = self.consumer_hint(name)
                if hint is not None:
                    self.tensors[name] = hint.canonical()
                    changed = True
        return changed

    def run(self) -> DistributedGraph:
        limit = 2 * len(self.order) + 2
        while True:
            sweeps = 0
            while self.forward_sweep() | self.backward_sweep():
                sweeps += 1
                if sweeps > limit:
                    raise CompletionError("completion did not reach a fixed point")
            pending = [op for op in self.order if op.name not in self.decided]
            if not pending:
                break
            if self.default_mesh is None:
                raise CompletionError(f"no annotation reaches op {pending[0].name!r} and no default mesh given")
            self.decide(pending[0], self.default_mesh, self.default_placement)
        for name in sorted(self.g.tensors):
            if name not in self.tensors:
                if self.default_mesh is None:
                    raise CompletionError(f"tensor {name!r} is unconstrained and no default mesh given")
                self.tensors[name] = replicated(self.g.tensors[name].shape, self.default_mesh, self.default_placement)
        op_attrs = {}
        for op in self.g.ops:
            ins, out = self.decided[op.name]
            user = self.dg.op_attrs.get(op.name)
            op_attrs[op.name] = OpDistAttr(
                ins[0].process_mesh,
                dict(zip(op.inputs, ins)),
                {op.outputs[0]: out},
                user.device_placement if user else (),
            )
        for name, attr in self.tensors.items():
            problems = validate_dist_attr(self.g.tensors[name], attr)
            if problems:
                raise CompletionError(f"tensor {name!r}: " + "; ".join(problems))
        return DistributedGraph(self.g, dict(sorted(self.tensors.items())), op_attrs)


def complete(dg: DistributedGraph, default_mesh: ProcessMesh = None, default_placement=None) -> DistributedGraph:
    """Fill every unfilled tensor/operator attribute by propagation.

    User annotations are never overridden; unconstrained parts end up fully
    replicated on ``default_mesh``.
    """
    return _Completer(dg, default_mesh, default_placement).run()


def candidate_reqs(op: OpSpec, shapes, mesh: ProcessMesh, placement=()) -> list:
    """Every legal tuple of input requirements with even shard sizes on ``mesh``.

    Mesh axes of extent 1 are never used for sharding (equivalent to replication).
    """
    axes = [a for a in range(mesh.ndim) if mesh.shape[a] > 1]
    per_input = []
    for shape in shapes:
        options = []
        for dm in itertools.product([-1, *axes], repeat=len(shape)):
            used = [a for a in dm if a >= 0]
            if len(used) != len(set(used)):
                continue
            if any(a >= 0 and shape[d] % mesh.shape[a] for d, a in enumerate(dm)):
                continue
            options.append(make_attr(shape, mesh, dm, placement))
        per_input.append(options)
    out = []
    for combo in itertools.product(*per_input):
        if check_reqs(op, shapes, list(combo)) is None:
            out.append(list(combo))
    return out
