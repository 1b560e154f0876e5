from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from autoshard.completion import complete
from autoshard.errors import MissingFeed, SchemaError, ShapeMismatch, UndeliveredMessage
from autoshard.fixtures import fig3_graph, fig3_serial
from autoshard.graph_ir import OpDistAttr, OpSpec, ProcessMesh, TensorSpec, build_graph, DistributedGraph, make_attr
from autoshard.numeric_exec import (
    gather_tensor,
    max_abs_diff,
    random_feeds,
    read_array,
    run_distributed,
    run_serial,
    shard_tensor,
    write_array,
)
from autoshard.reshard import insert_comm

from helpers import random_distributed

ONES = {"A1": np.ones((6, 8)), "W1": np.ones((8, 4)), "W2": np.ones((4, 4))}


def test_fig3_serial_ones():
    out = run_serial(fig3_serial(), ONES).fetches["A4"]
    assert np.array_equal(out, 32 * np.ones((6, 4)))


def test_fig3_distributed_ones():
    out = run_distributed(complete(fig3_graph()), ONES).fetches["A4"]
    assert np.array_equal(out, 32 * np.ones((6, 4)))


def test_fig3_fixture_feeds(fig3):
    dist = run_distributed(complete(fig3.graph), fig3.feeds)
    assert np.max(np.abs(dist.fetches["A4"] - fig3.expected["A4"])) <= 1e-12


def test_identity_and_relu():
    g = build_graph(
        [OpSpec("i", "identity", ("x",), ("y",)), OpSpec("r", "relu", ("y",), ("z",))],
        [TensorSpec("x", (3, 2)), TensorSpec("y", (3, 2)), TensorSpec("z", (3, 2))],
        ["x"], ["y", "z"],
    )
    x = -np.arange(1, 7, dtype=float).reshape(3, 2)
    res = run_serial(g, {"x": x})
    assert np.array_equal(res.fetches["y"], x)
    assert np.array_equal(res.fetches["z"], np.zeros((3, 2)))


def test_missing_and_misshaped_feeds():
    g = fig3_serial()
    with pytest.raises(MissingFeed):
        run_serial(g, {"A1": np.ones((6, 8))})
    with pytest.raises(ShapeMismatch):
        run_serial(g, {**ONES, "A1": np.ones((6, 7))})


def test_one_process_is_bitwise_serial():
    g = fig3_serial()
    m = ProcessMesh((1,), (0,))
    done = complete(DistributedGraph(g), default_mesh=m, default_placement={0: "gpu0"})
    feeds = random_feeds(g, 1)
    a, b = run_serial(g, feeds), run_distributed(done, feeds)
    assert all(np.array_equal(a.fetches[k], b.fetches[k]) for k in a.fetches)


def test_contracted_dim_allreduce():
    g = build_graph(
        [OpSpec("mm", "matmul", ("a", "b"), ("c",))],
        [TensorSpec("a", (4, 6)), TensorSpec("b", (6, 3)), TensorSpec("c", (4, 3))],
        ["a", "b"], ["c"],
    )
    m = ProcessMesh((2,), (0, 1))
    place = {0: "gpu0", 1: "gpu1"}
    ra, rb = make_attr((4, 6), m, (-1, 0), place), make_attr((6, 3), m, (0, -1), place)
    out = make_attr((4, 3), m, (-1, -1), place)
    dg = DistributedGraph(g, {"a": ra, "b": rb, "c": out}, {"mm": OpDistAttr(m, {"a": ra, "b": rb}, {"c": out}, place)})
    dg = insert_comm(dg)
    assert [c.kind for c in dg.inserted_comm] == ["all_reduce"]
    feeds = random_feeds(g, 7)
    assert max_abs_diff(run_serial(g, feeds), run_distributed(dg, feeds)) <= 1e-12


def test_dropped_transfer_is_detected():
    from dataclasses import replace

    dg = insert_comm(complete(fig3_graph()))
    comms = list(dg.inserted_comm)
    comms[0] = replace(comms[0], payload=comms[0].payload[1:])
    with pytest.raises(UndeliveredMessage):
        run_distributed(replace(dg, inserted_comm=tuple(comms)), ONES)


def test_message_hook_can_corrupt():
    dg = insert_comm(complete(fig3_graph()))
    bad = run_distributed(dg, ONES, message_hook=lambda comm, x, data: data + 1.0)
    assert max_abs_diff(run_serial(dg.base, ONES), bad) > 1e-9


def test_deterministic_across_runs():
    dg = insert_comm(random_distributed(np.random.default_rng(11)))
    feeds = random_feeds(dg.base, 11)
    a, b = run_distributed(dg, feeds), run_distributed(dg, feeds)
    assert all(np.array_equal(a.fetches[k], b.fetches[k]) for k in a.fetches)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31))
def test_spmd_equivalence(seed):
    dg = insert_comm(random_distributed(np.random.default_rng(seed)))
    feeds = random_feeds(dg.base, seed)
    assert max_abs_diff(run_serial(dg.base, feeds), run_distributed(dg, feeds)) <= 1e-9


def test_shard_gather_round_trip():
    m = ProcessMesh((2, 2), (0, 1, 2, 3))
    a = make_attr((6, 8), m, (1, 0))
    x = np.arange(48, dtype=float).reshape(6, 8)
    assert np.array_equal(gather_tensor(shard_tensor(x, a), a, (6, 8)), x)


def test_array_file_round_trip(tmp_path):
    x = np.arange(12, dtype=float).reshape(3, 4)
    write_array(tmp_path / "x.arr", "x", x)
    raw = (tmp_path / "x.arr").read_bytes()
    header, body = raw.split(b"\n", 1)
    # column-major payload: first column first
    assert np.frombuffer(body[:24], dtype="<f8").tolist() == [0.0, 4.0, 8.0]
    name, back = read_array(tmp_path / "x.arr")
    assert name == "x" and np.array_equal(back, x)


def test_array_file_bad_header(tmp_path):
    (tmp_path / "bad.arr").write_bytes(b'{"name": "x", "shape": [1], "dtype": "f32"}\n' + bytes(4))
    with pytest.raises(SchemaError):
        read_array(tmp_path / "bad.arr")
