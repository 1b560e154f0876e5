from __future__ import annotations

import math
import threading
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from autoshard.elastic import (
    CheckpointPolicy,
    DiskStorage,
    ElasticJob,
    KVStore,
    MemoryStorage,
    checkpoint_interval,
    convert_weights,
    elastic_step,
    init_state,
    mlp_scheme,
    restore,
    run_with_failure,
    save_checkpoint,
)
from autoshard.errors import (
    ConcurrentSaveConflict,
    IncompleteManifest,
    InvalidParams,
    NoFeasibleScheme,
    StorageFull,
)
from autoshard.graph_ir import ProcessMesh, make_attr, partition_signature
from autoshard.numeric_exec import gather_tensor, shard_tensor

GPUS = [f"gpu{i}" for i in range(6)]


def _init(seed=0):
    rng = np.random.default_rng(seed)
    return {"W1": rng.standard_normal((6, 8)), "W2": rng.standard_normal((8, 4))}


def _same(a: dict, b: dict) -> bool:
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def test_interval_closed_form():
    assert checkpoint_interval(2.0, 10_000.0) == 200.0
    assert math.isclose(checkpoint_interval(3.0, 3.0), 3.0 * math.sqrt(2))
    assert checkpoint_interval(100.0, 1.0) == 100.0
    for c, m in [(0.0, 1.0), (-1.0, 1.0), (1.0, 0.0)]:
        with pytest.raises(InvalidParams):
            checkpoint_interval(c, m)


@settings(max_examples=60, deadline=None)
@given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e6), st.floats(0, 1e3))
def test_interval_monotone(c, m, d):
    assert checkpoint_interval(c, m) <= checkpoint_interval(c, m + d)
    assert checkpoint_interval(c, m) <= checkpoint_interval(c + d, m)


def test_policy_levels():
    with pytest.raises(InvalidParams):
        CheckpointPolicy(level2_interval=5, level3_interval=2)
    pol = CheckpointPolicy.from_costs(1.0, 0.5, 8.0, 10_000.0)
    assert 1 <= pol.level2_interval <= pol.level3_interval
    assert pol.levels_due(0) == [2, 3]


def test_dp_save_rotates_one_rank():
    scheme = mlp_scheme("dp4", GPUS[:4])
    state = init_state(scheme, _init())
    store = MemoryStorage()
    ranks = []
    for _ in range(5):
        man = save_checkpoint(state, scheme, 2, store)
        per = {e["tensor"]: e["rank"] for e in man["entries"]}
        assert len(man["entries"]) == 2
        ranks.append(per["W1"])
    assert ranks == [0, 1, 2, 3, 0]


def test_mp_save_keeps_every_shard(tmp_path):
    scheme = mlp_scheme("mp2", GPUS[:2], "model_parallel")
    state = init_state(scheme, _init())
    man = save_checkpoint(state, scheme, 3, DiskStorage(tmp_path))
    assert sorted((e["tensor"], e["rank"]) for e in man["entries"]) == [("W1", 0), ("W1", 1), ("W2", 0), ("W2", 1)]


def test_empty_weights_manifest():
    scheme = mlp_scheme("dp2", GPUS[:2])
    man = save_checkpoint(init_state(scheme, {}), scheme, 2, MemoryStorage())
    assert man["entries"] == []
    assert restore(man, MemoryStorage()).weights == {}


@pytest.mark.parametrize("layout,n", [("data_parallel", 4), ("model_parallel", 2)])
def test_round_trip_bitwise(tmp_path, layout, n):
    scheme = mlp_scheme("s", GPUS[:n], layout)
    state = init_state(scheme, _init(), states={"samples_seen": 7}, hyper={"lr": 0.05, "batch_size": 16})
    state.step = 3
    kv = KVStore()
    store = DiskStorage(tmp_path)
    save_checkpoint(state, scheme, 3, store, kv)
    back = restore(store.latest(), store, scheme, kv)
    assert back.step == 3 and back.hyper == state.hyper and back.states == state.states
    for name in state.weights:
        assert back.weights[name].keys() == state.weights[name].keys()
        assert all(np.array_equal(back.weights[name][p], state.weights[name][p]) for p in state.weights[name])


def test_restore_into_smaller_scheme():
    big = mlp_scheme("mp4", GPUS[:4], "model_parallel")
    small = mlp_scheme("mp2", GPUS[:2], "model_parallel")
    state = init_state(big, _init())
    store = MemoryStorage()
    save_checkpoint(state, big, 2, store)
    back = restore(store.latest(), store, small)
    assert len(back.weights["W1"]) == 2
    assert _same(back.global_weights(), state.global_weights())


def test_missing_shard_detected():
    scheme = mlp_scheme("mp2", GPUS[:2], "model_parallel")
    store = MemoryStorage()
    man = save_checkpoint(init_state(scheme, _init()), scheme, 2, store)
    man["entries"] = man["entries"][1:]
    with pytest.raises(IncompleteManifest):
        restore(man, store)
    with pytest.raises(IncompleteManifest):
        restore(None, store)


def test_storage_full_leaves_previous_manifest():
    scheme = mlp_scheme("mp2", GPUS[:2], "model_parallel")
    state = init_state(scheme, _init())
    store = MemoryStorage(capacity_bytes=600)
    with pytest.raises(StorageFull):
        save_checkpoint(state, scheme, 2, store)
    assert store.latest() is None and store.blobs == {}


def test_concurrent_save_conflict():
    scheme = mlp_scheme("dp2", GPUS[:2])
    state = init_state(scheme, _init())
    store = MemoryStorage()
    gate = threading.Event()
    original = store.put_blob

    def slow(key, name, array):
        gate.wait(5)
        original(key, name, array)

    store.put_blob = slow
    with ThreadPoolExecutor(1) as pool:
        fut = save_checkpoint(state, scheme, 2, store, executor=pool)
        with pytest.raises(ConcurrentSaveConflict):
            save_checkpoint(state, scheme, 2, store)
        gate.set()
        assert fut.result()["step"] == 0


def test_async_save_snapshot_isolation():
    scheme = mlp_scheme("dp2", GPUS[:2])
    state = init_state(scheme, _init())
    before = state.global_weights()
    store = MemoryStorage()
    gate = threading.Event()
    original = store.put_blob
    store.put_blob = lambda k, n, a: (gate.wait(5), original(k, n, a))
    with ThreadPoolExecutor(1) as pool:
        fut = save_checkpoint(state, scheme, 2, store, executor=pool)
        for shard in state.weights["W1"].values():
            shard += 1.0  # training keeps mutating while the save is in flight
        assert store.latest() is None
        gate.set()
        fut.result()
    assert _same(restore(store.latest(), store).global_weights(), before)


def _attr(shape, n, dims):
    return make_attr(shape, ProcessMesh((n,), tuple(range(n))), dims, {p: f"gpu{p}" for p in range(n)})


@pytest.mark.parametrize("a,b", [
    ((2, (0, -1)), (2, (0, -1))),
    ((2, (0, -1)), (2, (-1, 0))),
    ((4, (0, -1)), (2, (-1, -1))),
])
def test_convert_weights(a, b):
    shape = (6, 8)
    x = np.arange(48, dtype=float).reshape(shape)
    aa, bb = _attr(shape, *a), _attr(shape, *b)
    out = convert_weights({"W": shard_tensor(x, aa)}, {"W": aa}, {"W": bb}, {"W": shape})
    assert np.array_equal(gather_tensor(out["W"], bb, shape), x)
    if b[1] == (-1, -1):
        assert all(np.array_equal(s, x) for s in out["W"].values())


def _table():
    return [mlp_scheme("mp2", GPUS[:2], "model_parallel", level=1), mlp_scheme("dp4", GPUS[:4], level=2)]


def test_fig5_sequence():
    table = _table()
    job = ElasticJob(table[1], init_state(table[1], _init()), set(GPUS[:5]))
    sig = partition_signature(job.scheme.graph)
    ref = job.state.global_weights()

    rec = elastic_step(job, ("device_failed", "gpu2"), table)
    assert rec.action == "replace" and rec.placement_change == {"gpu2": "gpu4"}
    assert partition_signature(job.scheme.graph) == sig
    assert "gpu2" not in job.scheme.graph.devices()

    rec = elastic_step(job, ("resources_revoked", {"gpu3", "gpu4"}), table)
    assert rec.action == "switch" and rec.to_scheme == "mp2" and rec.converted
    assert partition_signature(job.scheme.graph) != sig
    assert _same(job.state.global_weights(), ref)
    assert job.state.hyper["batch_size"] == 16

    rec = elastic_step(job, ("resources_granted", {"gpu2"}), table)
    assert rec.action == "none"

    rec = elastic_step(job, ("resources_granted", {"gpu3"}), table)
    assert rec.action == "switch" and rec.to_scheme == "dp4"
    assert _same(job.state.global_weights(), ref)
    assert job.state.hyper["batch_size"] == 32


def test_no_feasible_scheme():
    table = _table()
    job = ElasticJob(table[0], init_state(table[0], _init()), set(GPUS[:2]))
    with pytest.raises(NoFeasibleScheme):
        elastic_step(job, ("device_failed", "gpu1"), table)
    with pytest.raises(InvalidParams):
        elastic_step(job, ("reboot", "gpu0"), table)


@pytest.mark.parametrize("level", [2, 3])
@pytest.mark.parametrize("k", [5, 10, 15])
def test_recovery_equivalence(tmp_path, level, k):
    scheme = mlp_scheme("mp2", GPUS[:2], "model_parallel")
    init = {**_init(3), "W1@m": np.zeros((6, 8)), "W2@m": np.zeros((8, 4))}

    def storage(tag):
        return MemoryStorage() if level == 2 else DiskStorage(tmp_path / tag)

    clean = run_with_failure(scheme, init, 20, None, level, storage("a"), KVStore(), seed=9)
    crashed = run_with_failure(scheme, init, 20, k, level, storage("b"), KVStore(), seed=9)
    assert crashed.step == clean.step == 20
    assert _same(crashed.global_weights(), clean.global_weights())
    assert crashed.states == clean.states
