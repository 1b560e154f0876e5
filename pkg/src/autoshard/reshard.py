"""Reshard planning: turn one tensor layout into another by index-box intersection."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .completion import reduction_axis
from .graph_ir import (
    DistAttr,
    DistributedGraph,
    TensorSpec,
    box_intersect,
    box_volume,
    full_box,
)

COMM_KINDS = ("p2p_send_recv", "all_gather", "all_reduce", "slice_local", "broadcast")


@dataclass(frozen=True)
class Transfer:
    src: int
    dst: int
    box: tuple
    src_device: str = None
    dst_device: str = None

    @property
    def volume(self) -> int:
        return box_volume(self.box)


@dataclass(frozen=True)
class CommOp:
    """One logical communication.

    For reshard-generated kinds ``payload`` lists every (src, dst, box)
    transfer and ``bytes`` is their total volume. For ``all_reduce`` the payload
    holds one (p, p, box) entry per participant and ``bytes`` is the size of
    the buffer being reduced.
    """

    kind: str
    tensor: str
    src_processes: tuple
    dst_processes: tuple
    payload: tuple
    bytes: int
    site: tuple = ()
    devices: tuple = ()  # (process, device) pairs for collective participants

    @property
    def processes(self) -> tuple:
        return tuple(sorted(set(self.src_processes) | set(self.dst_processes)))

    @property
    def name(self) -> str:
        where = "/".join(str(s) for s in self.site) if self.site else self.tensor
        return f"{self.kind}:{where}:{'-'.join(map(str, self.processes))}"


@dataclass(frozen=True)
class ReshardPlan:
    ops: tuple
    source: DistAttr
    target: DistAttr
    local_copies: tuple = field(default=(), compare=False)

    @property
    def bytes(self) -> int:
        return sum(op.bytes for op in self.ops if op.kind != "slice_local")

    def __len__(self):
        return len(self.ops)


def needs_reshard(actual: DistAttr, required: DistAttr) -> bool:
    return actual.canonical() != required.canonical()


def _holders(attr: DistAttr):
    """Distinct boxes of ``attr`` in process order, each with its owning processes."""
    groups = {}
    for p in attr.process_mesh.process_ids:
        groups.setdefault(attr.box(p), []).append(p)
    return list(groups.items())


def plan_reshard(t: TensorSpec, actual: DistAttr, required: DistAttr, site=()) -> ReshardPlan:
    """Communication that re-materializes ``t`` laid out as ``required``.

    Every destination cell comes from exactly one source replica: the
    destination itself when it already holds the cells on the same device,
    otherwise the lowest-numbered owning process.
    """
    if not needs_reshard(actual, required):
        return ReshardPlan((), actual, required)
    src_dev = actual.placement
    dst_dev = required.placement
    holders = _holders(actual)
    remote, local = [], []
    for q in required.process_mesh.process_ids:
        want = required.box(q)
        for box, owners in holders:
            piece = box_intersect(box, want)
            if piece is None:
                continue
            if q in owners and src_dev.get(q) == dst_dev.get(q):
                local.append(Transfer(q, q, piece, src_dev.get(q), dst_dev.get(q)))
                continue
            src = min(owners)
            remote.append(Transfer(src, q, piece, src_dev.get(src), dst_dev.get(q)))
    itemsize = t.itemsize
    if not remote:
        op = CommOp(
            "slice_local", t.name,
            tuple(sorted({x.src for x in local})), tuple(sorted({x.dst for x in local})),
            tuple(local), sum(x.volume for x in local) * itemsize, site,
        )
        return ReshardPlan((op,), actual, required, tuple(local))
    srcs = tuple(sorted({x.src for x in remote}))
    dsts = tuple(sorted({x.dst for x in remote}))
    kind = _classify(t, actual, required, remote)
    op = CommOp(kind, t.name, srcs, dsts, tuple(remote), sum(x.volume for x in remote) * itemsize, site)
    return ReshardPlan((op,), actual, required, tuple(local))


def _classify(t, actual, required, remote) -> str:
    same_group = (
        set(actual.process_mesh.process_ids) == set(required.process_mesh.process_ids)
        and actual.device_placement == required.device_placement
    )
    if same_group and required.is_replicated() and not actual.is_replicated():
        return "all_gather"
    whole = full_box(t.shape)
    dsts = {x.dst for x in remote}
    if len({x.src for x in remote}) == 1 and len(dsts) >= 2 and all(x.box == whole for x in remote):
        return "broadcast"
    return "p2p_send_recv"


def op_allreduce_comms(dg: DistributedGraph, op) -> list:
    """All-reduce collectives an operator needs internally (contracted / reduced mesh axis)."""
    oa = dg.op_attrs[op.name]
    reqs = [oa.input_reqs[i] for i in op.inputs]
    axis = reduction_axis(op, reqs)
    if axis < 0:
        return []
    out_name = op.outputs[0]
    out_attr = oa.output_reqs[out_name]
    t = dg.base.tensors[out_name]
    placement = oa.placement()
    comms = []
    for group in oa.process_mesh.groups_along(axis):
        payload = tuple(Transfer(p, p, out_attr.box(p), placement.get(p), placement.get(p)) for p in group)
        nbytes = box_volume(out_attr.box(group[0])) * t.itemsize
        devices = tuple((p, placement[p]) for p in group if p in placement)
        comms.append(CommOp("all_reduce", out_name, group, group, payload, nbytes, ("op", op.name), devices))
    return comms


def insert_comm(dg: DistributedGraph) -> DistributedGraph:
    """Return ``dg`` with every reshard and intra-operator all-reduce made explicit.

    Reshard sites are tagged ``("reshard", tensor, consumer_op)``; all-reduce
    sites ``("op", op_name)``. The order is deterministic (topological).
    """
    comms = []
    g = dg.base
    for op in g.ordered_ops():
        oa = dg.op_attrs[op.name]
        for name in op.inputs:
            plan = plan_reshard(g.tensors[name], dg.tensor_attrs[name], oa.input_reqs[name], ("reshard", name, op.name))
            comms.extend(plan.ops)
        comms.extend(op_allreduce_comms(dg, op))
    return replace(dg, inserted_comm=tuple(comms))


def reshard_plans(dg: DistributedGraph) -> dict:
    """(tensor, consumer op) -> ReshardPlan for every operator input."""
    g = dg.base
    out = {}
    for op in g.ordered_ops():
        oa = dg.op_attrs[op.name]
        for name in op.inputs:
            out[(name, op.name)] = plan_reshard(
                g.tensors[name], dg.tensor_attrs[name], oa.input_reqs[name], ("reshard", name, op.name)
            )
    return out


def comm_to_json(c: CommOp) -> dict:
    return {
        "kind": c.kind,
        "tensor": c.tensor,
        "site": list(c.site),
        "src_processes": list(c.src_processes),
        "dst_processes": list(c.dst_processes),
        "bytes": c.bytes,
        "payload": [
            {"src": x.src, "dst": x.dst, "box": [list(b) for b in x.box],
             "src_device": x.src_device, "dst_device": x.dst_device}
            for x in c.payload
        ],
    }


__all__ = [
    "COMM_KINDS", "CommOp", "ReshardPlan", "Transfer", "comm_to_json", "insert_comm",
    "needs_reshard", "op_allreduce_comms", "plan_reshard", "reshard_plans",
]
