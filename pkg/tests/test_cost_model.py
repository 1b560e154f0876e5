from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from autoshard.cluster import Component, simple_cluster
from autoshard.cost_model import (
    DagNode,
    MergedDag,
    PerfDatabase,
    comm_op_cost,
    compute_op_cost,
    longest_path,
    merge_comm_ops,
    reduce_graph_cost,
    simulate_memory,
)
from autoshard.errors import NoCostAvailable, SchemaError
from autoshard.graph_ir import (
    DistributedGraph,
    OpDistAttr,
    OpSpec,
    ProcessMesh,
    TensorSpec,
    build_graph,
    make_attr,
)
from autoshard.reshard import CommOp, Transfer, insert_comm

GPU = Component("g", "gpu", 1e9, 1 << 30, "m0")
MM = OpSpec("mm", "matmul", ("a", "b"), ("c",))


def test_db_exact_hit():
    db = PerfDatabase()
    db.add("matmul", [[3, 8], [8, 4]], [[3, 4]], "f64", "gpu", 42e-6)
    assert compute_op_cost(MM, ((3, 8), (8, 4)), GPU, db) == 42e-6


def test_flop_fallback():
    assert math.isclose(compute_op_cost(MM, ((3, 8), (8, 4)), GPU, PerfDatabase()), 1.92e-7)


def test_fitted_model_on_miss():
    db = PerfDatabase()
    for m in (1, 2, 4):
        db.add("matmul", [[m, 8], [8, 4]], [[m, 4]], "f64", "gpu", 1e-6 + 64 * m * 1e-9)
    # FLOPs 2*3*8*4 = 192 -> 1e-6 + 192e-9
    assert math.isclose(compute_op_cost(MM, ((3, 8), (8, 4)), GPU, db), 1.192e-6)


def test_two_records_do_not_fit():
    db = PerfDatabase()
    for m in (1, 2):
        db.add("matmul", [[m, 8], [8, 4]], [[m, 4]], "f64", "gpu", 1.0)
    assert db.fit("matmul", "gpu") is None


def test_no_cost_on_zero_flops():
    nic = Component("n", "nic", 0.0, 0, "m0")
    with pytest.raises(NoCostAvailable):
        compute_op_cost(OpSpec("r", "relu", ("a",), ("b",)), ((3, 8),), nic, PerfDatabase())


def test_db_rejects_bad_records():
    with pytest.raises(SchemaError):
        PerfDatabase.from_json([{"kind": "relu", "in_shapes": [[1]], "out_shapes": [[1]],
                                 "dtype": "f64", "device_kind": "gpu", "seconds": 0}])
    with pytest.raises(SchemaError):
        PerfDatabase.from_json([{"kind": "relu"}])


def _c4(bw=1e9, lat=1e-5):
    return simple_cluster([f"gpu{i}" for i in range(4)], bandwidth=bw, latency=lat)


def _allreduce(p, n):
    procs = tuple(range(p))
    payload = tuple(Transfer(q, q, ((0, n // 8),)) for q in procs)
    return CommOp("all_reduce", "x", procs, procs, payload, n, ("op", "o"),
                  tuple((q, f"gpu{q}") for q in procs))


def test_p2p_zero_bytes_is_latency():
    c = CommOp("p2p_send_recv", "x", (0,), (1,), (Transfer(0, 1, ((0, 0),), "gpu0", "gpu1"),), 0)
    assert comm_op_cost(c, _c4()) == 1e-5


def test_allreduce_single_process_free():
    assert comm_op_cost(_allreduce(1, 10**6), _c4()) == 0.0


def test_allreduce_ring_closed_form():
    assert math.isclose(comm_op_cost(_allreduce(4, 10**6), _c4()), 1.56e-3)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 4), st.integers(1, 10**6), st.integers(0, 10**6))
def test_allreduce_monotone(p, n, dn):
    c = _c4()
    assert comm_op_cost(_allreduce(p, n), c) <= comm_op_cost(_allreduce(p, n + dn), c)
    if p < 4:
        assert comm_op_cost(_allreduce(p, n), c) <= comm_op_cost(_allreduce(p + 1, n), c)


def test_merge_fig3_reshard1(fig3):
    dag = merge_comm_ops(insert_comm(_complete(fig3.graph)))
    succs = dag.succs()
    node = next(n for n, v in dag.nodes.items() if v.kind == "comm" and "A1/Matmul1" in n)
    assert len(dag.nodes[node].preds) == 2 and len(succs[node]) == 4


def _complete(dg):
    from autoshard.completion import complete

    return complete(dg)


def test_merge_allreduce_four_ranks():
    g = build_graph(
        [MM, OpSpec("r", "relu", ("c",), ("d",))],
        [TensorSpec("a", (4, 8)), TensorSpec("b", (8, 4)), TensorSpec("c", (4, 4)), TensorSpec("d", (4, 4))],
        ["a", "b"], ["d"],
    )
    m = ProcessMesh((4,), (0, 1, 2, 3))
    place = {p: f"gpu{p}" for p in range(4)}
    ra, rb = make_attr((4, 8), m, (-1, 0), place), make_attr((8, 4), m, (0, -1), place)
    rc = make_attr((4, 4), m, (-1, -1), place)
    dg = insert_comm(DistributedGraph(
        g, {"a": ra, "b": rb, "c": rc, "d": rc},
        {"mm": OpDistAttr(m, {"a": ra, "b": rb}, {"c": rc}, place),
         "r": OpDistAttr(m, {"c": rc}, {"d": rc}, place)},
    ))
    dag = merge_comm_ops(dg)
    comm = [n for n, v in dag.nodes.items() if v.kind == "comm"]
    groups = {(c.kind, c.tensor, c.processes) for c in dg.inserted_comm}
    assert len(comm) == len(groups) == 1
    assert len(dag.nodes[comm[0]].preds) == 4 and len(dag.succs()[comm[0]]) == 4


def _chain(devices=("gpu0",)):
    n = len(devices)
    ops = [OpSpec(f"r{i}", "relu", (f"t{i}",), (f"t{i + 1}",)) for i in range(3)]
    g = build_graph(ops, [TensorSpec(f"t{i}", (3, 8)) for i in range(4)], ["t0"], ["t3"])
    tensors, op_attrs = {}, {}
    for i in range(4):
        dev = devices[min(i, 2) % n]
        pid = devices.index(dev)
        m = ProcessMesh((1,), (pid,))
        tensors[f"t{i}"] = make_attr((3, 8), m, (-1, -1), {pid: dev})
    for i, op in enumerate(ops):
        a = tensors[f"t{i + 1}"]
        op_attrs[op.name] = OpDistAttr(a.process_mesh, {f"t{i}": a}, {f"t{i + 1}": a}, a.placement)
        tensors[f"t{i}"] = tensors[f"t{i}"] if i else a
    return g, DistributedGraph(g, tensors, op_attrs)


def test_single_op_and_chain_sum():
    g, dg = _chain()
    db = PerfDatabase()
    db.add("relu", [[3, 8]], [[3, 8]], "f64", "gpu", 2e-6)
    est = reduce_graph_cost(dg, simple_cluster(["gpu0"]), db)
    assert est.total_time == pytest.approx(6e-6, rel=0, abs=1e-18)
    assert est.total_time >= max(est.per_op_costs.values())


def test_no_comm_merge_is_identity():
    g, dg = _chain()
    dag = merge_comm_ops(dg)
    assert not [n for n in dag.nodes.values() if n.kind == "comm"]
    assert len([n for n in dag.nodes.values() if n.kind == "compute"]) == 3


def _node(name, dev, preds=()):
    return DagNode(name, "compute", dev, 0, None, list(preds))


def test_diamond_key_path():
    dag = MergedDag({
        "s": _node("s", "d0"),
        "a": _node("a", "d1", ["s"]),
        "b": _node("b", "d2", ["s"]),
        "t": _node("t", "d0", ["a", "b"]),
    })
    total, sched, path = longest_path(dag, {"s": 1e-6, "a": 5e-6, "b": 3e-6, "t": 1e-6})
    assert total == pytest.approx(7e-6)
    assert path == ["s", "a", "t"]


def test_same_device_branches_serialize():
    dag = MergedDag({
        "s": _node("s", "d0"),
        "a": _node("a", "d0", ["s"]),
        "b": _node("b", "d0", ["s"]),
        "t": _node("t", "d0", ["a", "b"]),
    })
    total, _, _ = longest_path(dag, {"s": 1.0, "a": 5.0, "b": 3.0, "t": 1.0})
    assert total == 10.0


def _brute_longest(dag, costs):
    best = {}
    for n, node in dag.nodes.items():
        best[n] = costs[n] + max((best[p] for p in node.preds), default=0.0)
    return max(best.values())


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31))
def test_distinct_devices_equal_plain_longest_path(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 12))
    nodes, costs = {}, {}
    for i in range(n):
        preds = [f"n{j}" for j in range(i) if rng.random() < 0.3]
        nodes[f"n{i}"] = _node(f"n{i}", f"d{i}", preds)
        costs[f"n{i}"] = int(rng.integers(1, 64)) / 8
    total, _, _ = longest_path(MergedDag(nodes), costs)
    assert total == _brute_longest(MergedDag(nodes), costs)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31))
def test_cost_monotone(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 10))
    nodes, costs = {}, {}
    for i in range(n):
        preds = [f"n{j}" for j in range(i) if rng.random() < 0.3]
        nodes[f"n{i}"] = _node(f"n{i}", f"d{int(rng.integers(3))}", preds)
        costs[f"n{i}"] = int(rng.integers(1, 64)) / 8
    dag = MergedDag(nodes)
    base, _, _ = longest_path(dag, costs)
    k = f"n{int(rng.integers(n))}"
    bumped = dict(costs, **{k: costs[k] + int(rng.integers(1, 16)) / 8})
    assert longest_path(dag, bumped)[0] >= base


def test_memory_single_tensor():
    g = build_graph([], [TensorSpec("x", (3, 8))], ["x"], ["x"])
    m = ProcessMesh((1,), (0,))
    dg = DistributedGraph(g, {"x": make_attr((3, 8), m, (-1, -1), {0: "gpu0"})}, {})
    assert simulate_memory(dg) == {"gpu0": 192}


def test_memory_replicated_copies():
    g = build_graph([], [TensorSpec("x", (3, 8))], ["x"], ["x"])
    m = ProcessMesh((2,), (0, 1))
    dg = DistributedGraph(g, {"x": make_attr((3, 8), m, (-1, -1), {0: "gpu0", 1: "gpu1"})}, {})
    assert simulate_memory(dg) == {"gpu0": 192, "gpu1": 192}


def _liveness_oracle(g):
    """Serial liveness over feeds (sorted) then ops in topological order."""
    size = {n: int(np.prod(t.shape)) * t.itemsize for n, t in g.tensors.items()}
    steps = [(f, None) for f in sorted(g.feeds)] + [(op.outputs[0], op) for op in g.ordered_ops()]
    last = {}
    for i, (_, op) in enumerate(steps):
        for t in (op.inputs if op else ()):
            last[t] = i
    live, peak = 0, 0
    for i, (out, op) in enumerate(steps):
        live += size[out]
        peak = max(peak, live)
        for t in dict.fromkeys((op.inputs if op else ()) + ((out,) if out not in last else ())):
            if last.get(t, i) == i and t not in g.fetches:
                live -= size[t]
    return peak


def test_memory_chain_liveness():
    ops = [
        OpSpec("A", "matmul", ("x", "w1"), ("a",)),
        OpSpec("B", "matmul", ("a", "w2"), ("b",)),
        OpSpec("C", "reduce_sum", ("b",), ("c",), {"axis": 1, "keepdims": True}),
    ]
    shapes = {"x": (3, 8), "w1": (8, 4), "a": (3, 4), "w2": (4, 16), "b": (3, 16), "c": (3, 1)}
    g = build_graph(ops, [TensorSpec(n, s) for n, s in shapes.items()], ["x", "w1", "w2"], ["c"])
    m = ProcessMesh((1,), (0,))
    pl = {0: "gpu0"}
    attrs = {n: make_attr(s, m, (-1, -1), pl) for n, s in shapes.items()}
    op_attrs = {op.name: OpDistAttr(m, {i: attrs[i] for i in op.inputs}, {op.outputs[0]: attrs[op.outputs[0]]}, pl)
                for op in ops}
    dg = DistributedGraph(g, attrs, op_attrs)
    assert simulate_memory(dg)["gpu0"] == _liveness_oracle(g) == 1056


def test_fig3_estimate_matches_fixture(fig3):
    est = reduce_graph_cost(_complete(fig3.graph), fig3.cluster, fig3.db)
    ref = fig3.expected["cost"]
    assert float(f"{est.total_time:.9g}") == ref["total_time"]
    assert est.per_device_peak_memory == ref["per_device_peak_memory"]


def test_trip_count_multiplies_cost():
    loop = OpSpec("mm", "matmul", ("a", "b"), ("c",), {"trip_count": 5})
    once = compute_op_cost(MM, ((3, 8), (8, 4)), GPU, PerfDatabase())
    assert compute_op_cost(loop, ((3, 8), (8, 4)), GPU, PerfDatabase()) == pytest.approx(5 * once)
    with pytest.raises(SchemaError):
        OpSpec("mm", "matmul", ("a", "b"), ("c",), {"trip_count": 0})
