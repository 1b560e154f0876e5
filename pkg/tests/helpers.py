"""Seeded generators of random distributed graphs and task DAGs shared by the tests."""

from __future__ import annotations

import numpy as np

from autoshard.actor_sim import Task
from autoshard.completion import candidate_reqs, forward_output
from autoshard.graph_ir import DistAttr, DistributedGraph, OpDistAttr, OpSpec, ProcessMesh, TensorSpec, build_graph

DIMS = (2, 4, 6, 8)

# criterion number -> measurement line, filled by the acceptance tests
ACCEPTANCE_DETAILS = {}


def _compose(rng, total, parts):
    """Random composition of ``total`` into ``parts`` positive sizes."""
    if parts > total:
        return None
    cuts = np.sort(rng.choice(np.arange(1, total), size=parts - 1, replace=False)) if parts > 1 else []
    edges = [0, *map(int, cuts), total]
    return tuple(b - a for a, b in zip(edges, edges[1:]))


def random_mesh(rng, max_procs=8):
    """A 1-d or 2-d mesh over a random subset of process ids 0..max_procs-1."""
    n = int(rng.integers(1, max_procs + 1))
    procs = tuple(sorted(int(p) for p in rng.choice(max_procs, size=n, replace=False)))
    if n >= 4 and n % 2 == 0 and rng.random() < 0.4:
        return ProcessMesh((2, n // 2), procs)
    return ProcessMesh((n,), procs)


def random_placement(rng, mesh, shared=False):
    """Process p lives on gpu{p}; with ``shared`` some processes collapse onto one device."""
    out = {}
    for p in mesh.process_ids:
        out[p] = f"gpu{p // 2 * 2}" if shared and rng.random() < 0.5 else f"gpu{p}"
    return out


def random_attr(rng, shape, mesh, placement, uneven=True):
    """Random dims mapping; sharded dims get random (possibly uneven) positive shard sizes."""
    axes = list(range(mesh.ndim))
    dims, sizes = [], []
    for extent in shape:
        free = [a for a in axes if a not in dims and mesh.shape[a] <= extent]
        if free and rng.random() < 0.6:
            a = int(rng.choice(free))
            parts = mesh.shape[a]
            ss = _compose(rng, extent, parts) if uneven and rng.random() < 0.5 else None
            if ss is None:
                q, r = divmod(extent, parts)
                ss = tuple(q + (1 if i < r else 0) for i in range(parts))
            dims.append(a)
            sizes.append(ss)
        else:
            dims.append(-1)
            sizes.append((extent,))
    return DistAttr(mesh, tuple(dims), tuple(sizes), placement)


def random_serial(rng, max_ops=6):
    """Random DAG of up to ``max_ops`` ops over small 2-d tensors plus optional embedding/reduce ops."""
    tensors, ops, feeds = {}, [], []

    def new(name, shape, feed=False):
        tensors[name] = TensorSpec(name, tuple(shape))
        if feed:
            feeds.append(name)
        return name

    pool = []
    if rng.random() < 0.25:
        ids = new("ids", (int(rng.choice(DIMS)),), feed=True)
        table = new("table", (int(rng.choice((4, 6, 8))), int(rng.choice(DIMS))), feed=True)
        out = new("emb", (tensors[ids].shape[0], tensors[table].shape[1]))
        ops.append(OpSpec("lookup", "embedding_lookup", (ids, table), (out,)))
        pool.append(out)
    else:
        pool.append(new("x", (int(rng.choice(DIMS)), int(rng.choice(DIMS))), feed=True))
    n_ops = int(rng.integers(1, max_ops + 1)) - len(ops)
    for i in range(max(n_ops, 0)):
        two_d = [t for t in pool if len(tensors[t].shape) == 2]
        if not two_d:
            break
        src = two_d[int(rng.integers(len(two_d)))]
        shape = tensors[src].shape
        kind = str(rng.choice(["matmul", "matmul", "relu", "add", "elementwise_mul", "reduce_sum"]))
        name = f"op{i}"
        if kind == "matmul":
            w = new(f"w{i}", (shape[1], int(rng.choice(DIMS))), feed=True)
            out = new(f"t{i}", (shape[0], tensors[w].shape[1]))
            ops.append(OpSpec(name, kind, (src, w), (out,)))
        elif kind in ("add", "elementwise_mul"):
            same = [t for t in two_d if tensors[t].shape == shape and t != src]
            other = same[0] if same and rng.random() < 0.5 else new(f"b{i}", shape, feed=True)
            out = new(f"t{i}", shape)
            ops.append(OpSpec(name, kind, (src, other), (out,)))
        elif kind == "reduce_sum":
            axis = int(rng.integers(2))
            out = new(f"t{i}", (shape[0], 1) if axis == 1 else (1, shape[1]))
            ops.append(OpSpec(name, kind, (src,), (out,), {"axis": axis, "keepdims": True}))
        else:
            out = new(f"t{i}", shape)
            ops.append(OpSpec(name, kind, (src,), (out,)))
        pool.append(out)
    consumed = {i for op in ops for i in op.inputs}
    fetches = [t for t in tensors if t not in consumed and t not in feeds]
    return build_graph(ops, tensors.values(), feeds, fetches)


def random_distributed(rng, max_ops=6, max_procs=8):
    """Random serial graph with random op meshes/requirements and random (uneven) feed layouts."""
    g = random_serial(rng, max_ops)
    shared = rng.random() < 0.3
    op_attrs, tensor_attrs = {}, {}
    for op in g.ordered_ops():
        shapes = [g.tensors[i].shape for i in op.inputs]
        for _ in range(20):
            mesh = random_mesh(rng, max_procs)
            place = random_placement(rng, mesh, shared)
            cands = candidate_reqs(op, shapes, mesh, place)
            if cands:
                break
        reqs = cands[int(rng.integers(len(cands)))]
        out = forward_output(op, reqs)
        op_attrs[op.name] = OpDistAttr(mesh, dict(zip(op.inputs, reqs)), {op.outputs[0]: out}, place)
        tensor_attrs[op.outputs[0]] = out
    for name in sorted(g.feeds):
        mesh = random_mesh(rng, max_procs)
        tensor_attrs[name] = random_attr(rng, g.tensors[name].shape, mesh, random_placement(rng, mesh, shared)).canonical()
    return DistributedGraph(g, tensor_attrs, op_attrs)


def dyadic_cost(rng):
    """Cost on a 1/1024 grid in (0, 2]: sums of a few hundred stay exact in binary floating point."""
    return int(rng.integers(1, 2049)) / 1024


def random_tasks(rng, max_tasks=50, devices=8, comm_prob=0.3):
    """Random task DAG; some cross-device edges are routed through explicit comm tasks holding a link."""
    n = int(rng.integers(1, max_tasks + 1))
    devs = [f"gpu{i}" for i in range(int(rng.integers(1, devices + 1)))]
    placed = [devs[int(rng.integers(len(devs)))] for _ in range(n)]
    tasks = []
    ids = {}
    for i in range(n):
        if len(tasks) + 4 > max_tasks:
            break
        preds = sorted({int(p) for p in rng.choice(i, size=min(i, int(rng.integers(0, 4))), replace=False)}) if i else []
        real = []
        for p in preds:
            if placed[p] != placed[i] and rng.random() < comm_prob:
                cid = len(tasks)
                a, b = sorted((placed[p], placed[i]))
                tasks.append(Task(cid, (f"comm{p}-{i}",), None, dyadic_cost(rng), (ids[p],), ((a, b),)))
                real.append(cid)
            else:
                real.append(ids[p])
        ids[i] = len(tasks)
        tasks.append(Task(ids[i], (f"op{i}",), placed[i], dyadic_cost(rng), tuple(real)))
    return tasks, devs
