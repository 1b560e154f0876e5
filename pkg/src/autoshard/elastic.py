"""Fault tolerance and elasticity.

A *scheme* is a distributed graph bound to a resource set. Checkpoints come
in three levels: a save-before-exit hook (level 1), periodic in-memory
backups (level 2) and less frequent persistent snapshots (level 3). Saves are
deduplicated: each replicated shard is written by one replica, rotating over
successive saves. Switching schemes converts weights through the reshard
planner and the numeric runtime.
"""

from __future__ import annotations

import copy
import json
import math
import os
import threading
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ConcurrentSaveConflict,
    IncompleteManifest,
    InvalidParams,
    NoFeasibleScheme,
    SchemeMismatchUnresolvable,
    StorageFull,
)
from .completion import complete
from .graph_ir import (
    DistAttr,
    DistributedGraph,
    OpDistAttr,
    OpSpec,
    ProcessMesh,
    TensorSpec,
    annotate,
    attr_from_json,
    attr_to_json,
    box_volume,
    build_graph,
    make_attr,
)
from .numeric_exec import execute_reshard, gather_tensor, read_array, shard_tensor, write_array
from .reshard import plan_reshard


def checkpoint_interval(save_cost: float, mtbf: float) -> float:
    """sqrt(2 C M), never shorter than one save."""
    if not (save_cost > 0 and mtbf > 0) or math.isinf(save_cost) or math.isinf(mtbf):
        raise InvalidParams("save cost and MTBF must be positive and finite")
    return max(math.sqrt(2.0 * save_cost * mtbf), save_cost)


@dataclass(frozen=True)
class CheckpointPolicy:
    level1: bool = True
    level2_interval: int = 1
    level3_interval: int = 1
    mtbf_estimate: float = 3600.0
    save_costs: tuple = (0.0, 0.1, 1.0)  # seconds per level 1..3

    def __post_init__(self):
        if not 1 <= self.level2_interval <= self.level3_interval:
            raise InvalidParams("need 1 <= level2 interval <= level3 interval")

    @classmethod
    def from_costs(cls, step_seconds: float, mem_cost: float, disk_cost: float, mtbf: float) -> "CheckpointPolicy":
        """Step intervals from the benefit-cost rule applied to each level's save cost."""
        l2 = max(1, round(checkpoint_interval(mem_cost, mtbf) / step_seconds))
        l3 = max(l2, round(checkpoint_interval(disk_cost, mtbf) / step_seconds))
        return cls(True, l2, l3, mtbf, (0.0, mem_cost, disk_cost))

    def levels_due(self, step: int) -> list:
        due = []
        if step % self.level2_interval == 0:
            due.append(2)
        if step % self.level3_interval == 0:
            due.append(3)
        return due


@dataclass(frozen=True)
class Scheme:
    id: str
    graph: DistributedGraph
    resources: frozenset
    level: int = 0

    def __post_init__(self):
        object.__setattr__(self, "resources", frozenset(self.resources))
        used = self.graph.devices()
        if not used <= self.resources:
            raise InvalidParams(f"scheme {self.id!r} places work on {sorted(used - self.resources)} outside its resources")

    def weight_attr(self, name) -> DistAttr:
        # optimizer slots such as "W@m" share their weight's layout
        return self.graph.tensor_attrs[name.split("@")[0]]


@dataclass
class JobState:
    step: int
    weights: dict  # name -> {process: array}
    attrs: dict  # name -> DistAttr
    shapes: dict  # name -> global shape
    states: dict = field(default_factory=dict)  # opaque, JSON-serializable
    hyper: dict = field(default_factory=lambda: {"lr": 0.1, "batch_size": 32})

    def snapshot(self) -> "JobState":
        return JobState(
            self.step,
            {n: {p: a.copy() for p, a in s.items()} for n, s in self.weights.items()},
            dict(self.attrs), dict(self.shapes), copy.deepcopy(self.states), dict(self.hyper),
        )

    def global_weights(self) -> dict:
        return {n: gather_tensor(self.weights[n], self.attrs[n], self.shapes[n]) for n in sorted(self.weights)}


def init_state(scheme: Scheme, values: dict, hyper=None, states=None) -> JobState:
    """Shard global ``values`` under the scheme's tensor attrs."""
    weights, attrs, shapes = {}, {}, {}
    for name, value in sorted(values.items()):
        attr = scheme.weight_attr(name)
        weights[name] = shard_tensor(np.asarray(value, dtype=np.float64), attr)
        attrs[name] = attr
        shapes[name] = tuple(np.shape(value))
    return JobState(0, weights, attrs, shapes, dict(states or {}), dict(hyper or {"lr": 0.1, "batch_size": 32}))


# --------------------------------------------------------------------------- storage


class KVStore:
    """In-process stand-in for a highly available key-value backend."""

    def __init__(self):
        self._data = {}
        self._lock = threading.Lock()

    def put_many(self, items: dict):
        blob = {k: json.dumps(v, sort_keys=True) for k, v in items.items()}
        with self._lock:
            self._data.update(blob)

    def get(self, key, default=None):
        with self._lock:
            raw = self._data.get(key)
        return default if raw is None else json.loads(raw)


class _Storage:
    level = 0

    def __init__(self, capacity_bytes=None):
        self.capacity_bytes = capacity_bytes
        self._save_lock = threading.Lock()
        self._meta_lock = threading.Lock()

    def begin_save(self):
        if not self._save_lock.acquire(blocking=False):
            raise ConcurrentSaveConflict("another save is still in progress on this storage")

    def end_save(self):
        self._save_lock.release()

    def next_save_index(self) -> int:
        with self._meta_lock:
            n = self._read_counter()
            self._write_counter(n + 1)
            return n


class MemoryStorage(_Storage):
    """Level-2 in-memory backup."""

    level = 2

    def __init__(self, capacity_bytes=None):
        super().__init__(capacity_bytes)
        self.blobs = {}
        self.manifests = []
        self._counter = 0

    def _read_counter(self):
        return self._counter

    def _write_counter(self, n):
        self._counter = n

    def used_bytes(self) -> int:
        return sum(a.nbytes for a in self.blobs.values())

    def put_blob(self, key, name, array):
        if self.capacity_bytes is not None and self.used_bytes() + array.nbytes > self.capacity_bytes:
            raise StorageFull(f"in-memory backup full ({self.capacity_bytes} bytes)")
        self.blobs[key] = np.array(array, copy=True)

    def drop_blob(self, key):
        self.blobs.pop(key, None)

    def get_blob(self, key):
        if key not in self.blobs:
            raise IncompleteManifest(f"shard file {key!r} is missing")
        return self.blobs[key].copy()

    def commit(self, manifest: dict):
        with self._meta_lock:
            self.manifests = [*self.manifests, copy.deepcopy(manifest)]

    def latest(self):
        with self._meta_lock:
            return copy.deepcopy(self.manifests[-1]) if self.manifests else None


class DiskStorage(_Storage):
    """Level-3 persistent snapshot directory: one file per shard plus JSON manifests."""

    level = 3

    def __init__(self, root, capacity_bytes=None):
        super().__init__(capacity_bytes)
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _read_counter(self):
        path = self.root / "save_counter"
        return int(path.read_text()) if path.exists() else 0

    def _write_counter(self, n):
        self._atomic_write(self.root / "save_counter", str(n))

    def _atomic_write(self, path, text):
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(text)
        os.replace(tmp, path)

    def used_bytes(self) -> int:
        return sum(f.stat().st_size for f in self.root.glob("*.arr"))

    def put_blob(self, key, name, array):
        need = array.nbytes + 256
        if self.capacity_bytes is not None and self.used_bytes() + need > self.capacity_bytes:
            raise StorageFull(f"snapshot directory full ({self.capacity_bytes} bytes)")
        write_array(self.root / key, name, array)

    def drop_blob(self, key):
        try:
            (self.root / key).unlink()
        except FileNotFoundError:
            pass

    def get_blob(self, key):
        path = self.root / key
        if not path.exists():
            raise IncompleteManifest(f"shard file {key!r} is missing")
        return read_array(path)[1]

    def commit(self, manifest: dict):
        name = f"manifest-{manifest['save_index']:06d}.json"
        self._atomic_write(self.root / name, json.dumps(manifest, sort_keys=True, indent=1))
        self._atomic_write(self.root / "LATEST", name)

    def latest(self):
        pointer = self.root / "LATEST"
        if not pointer.exists():
            return None
        return json.loads((self.root / pointer.read_text().strip()).read_text())


# --------------------------------------------------------------------------- save / restore


def _replica_groups(attr: DistAttr) -> list:
    groups = {}
    for p in attr.process_mesh.process_ids:
        groups.setdefault(attr.box(p), []).append(p)
    return list(groups.items())


def save_checkpoint(state: JobState, scheme: Scheme, level: int, storage, kv: KVStore = None,
                    executor: ThreadPoolExecutor = None):
    """Deduplicated save of ``state``.

    One replica of every distinct shard is written; among replicas the saving
    rank rotates with the storage's save counter. The manifest is committed
    only after every shard is stored, so readers see either the previous
    manifest or the new one. With ``executor`` the writes happen off the
    caller's thread on a snapshot of the state and a Future is returned.
    """
    if level not in (1, 2, 3):
        raise InvalidParams(f"checkpoint level must be 1, 2 or 3, got {level}")
    storage.begin_save()
    try:
        snap = state.snapshot()
        index = storage.next_save_index()
    except BaseException:
        storage.end_save()
        raise

    def work():
        written = []
        try:
            entries = []
            for name in sorted(snap.weights):
                attr = snap.attrs[name]
                for box, owners in _replica_groups(attr):
                    rank = owners[index % len(owners)]
                    key = f"s{index:06d}-{name}-r{rank}.arr"
                    storage.put_blob(key, name, snap.weights[name][rank])
                    written.append(key)
                    entries.append({"tensor": name, "shard_box": [list(b) for b in box], "rank": rank, "file": key})
            manifest = {
                "scheme_id": scheme.id,
                "step": snap.step,
                "level": level,
                "save_index": index,
                "entries": entries,
                "attrs": {n: attr_to_json(a) for n, a in sorted(snap.attrs.items())},
                "shapes": {n: list(s) for n, s in sorted(snap.shapes.items())},
            }
            if kv is not None:
                kv.put_many({f"job/{index}": {"step": snap.step, "hyper": snap.hyper, "states": snap.states}})
            storage.commit(manifest)
            return manifest
        except BaseException:
            for key in written:
                storage.drop_blob(key)
            raise
        finally:
            storage.end_save()

    if executor is None:
        return work()
    fut: Future = executor.submit(work)
    return fut


def _check_tiling(name, shape, entries):
    """Every cell of the global tensor covered exactly once by the manifest's shard boxes."""
    cover = np.zeros(shape, dtype=np.int64)
    for e in entries:
        sl = tuple(slice(lo, hi) for lo, hi in e["shard_box"])
        cover[sl] += 1
    if cover.size and (cover.min() != 1 or cover.max() != 1):
        raise IncompleteManifest(f"manifest does not cover {name!r} exactly once")


def restore(manifest: dict, storage, target: Scheme = None, kv: KVStore = None) -> JobState:
    """Rebuild a JobState from a manifest, converting weights if ``target`` differs."""
    if manifest is None:
        raise IncompleteManifest("no manifest to restore from")
    by_tensor = {}
    for e in manifest["entries"]:
        by_tensor.setdefault(e["tensor"], []).append(e)
    weights, attrs, shapes = {}, {}, {}
    for name, attr_doc in sorted(manifest["attrs"].items()):
        attr = attr_from_json(attr_doc).canonical()
        shape = tuple(manifest["shapes"][name])
        entries = by_tensor.get(name, [])
        _check_tiling(name, shape, entries)
        blobs = {tuple(tuple(b) for b in e["shard_box"]): storage.get_blob(e["file"]) for e in entries}
        shards = {}
        for p in attr.process_mesh.process_ids:
            box = attr.box(p)
            if box not in blobs:
                raise IncompleteManifest(f"{name!r}: no saved shard for box {box}")
            shards[p] = blobs[box].copy()
        weights[name], attrs[name], shapes[name] = shards, attr, shape
    meta = kv.get(f"job/{manifest['save_index']}") if kv is not None else None
    state = JobState(
        manifest["step"], weights, attrs, shapes,
        meta["states"] if meta else {}, meta["hyper"] if meta else {"lr": 0.1, "batch_size": 32},
    )
    if meta is not None and meta["step"] != manifest["step"]:
        raise IncompleteManifest("key-value record and manifest disagree on the step")
    if target is not None:
        missing = [n for n in weights if n.split("@")[0] not in target.graph.tensor_attrs]
        if missing:
            raise SchemeMismatchUnresolvable(f"target scheme {target.id!r} has no layout for {missing}")
        for n in weights:
            if tuple(target.graph.base.tensors[n.split("@")[0]].shape) != shapes[n]:
                raise SchemeMismatchUnresolvable(f"{n!r} changes shape between schemes")
        new_attrs = {n: target.weight_attr(n) for n in weights}
        if any(new_attrs[n].canonical() != attrs[n] for n in weights):
            state.weights = convert_weights(weights, attrs, new_attrs, shapes)
            state.attrs = new_attrs
    return state


def convert_weights(weights: dict, attrs_a: dict, attrs_b: dict, shapes: dict) -> dict:
    """Re-lay out every weight from ``attrs_a`` to ``attrs_b`` with the reshard planner."""
    out = {}
    for name in sorted(weights):
        a, b = attrs_a[name], attrs_b[name]
        spec = TensorSpec(name, tuple(shapes[name]))
        plan = plan_reshard(spec, a, b)
        if not plan.ops:
            out[name] = {p: arr.copy() for p, arr in weights[name].items()}
            continue
        out[name] = execute_reshard(name, plan.ops, a, b, weights[name])
    return out


# --------------------------------------------------------------------------- scheme switching


def remap_devices(dg: DistributedGraph, mapping: dict) -> DistributedGraph:
    """Same partition, devices renamed through ``mapping``."""

    def fix(a: DistAttr) -> DistAttr:
        return a.with_placement({p: mapping.get(d, d) for p, d in a.device_placement})

    tensors = {n: fix(a) for n, a in dg.tensor_attrs.items()}
    ops = {
        n: OpDistAttr(
            oa.process_mesh,
            {k: fix(v) for k, v in oa.input_reqs.items()},
            {k: fix(v) for k, v in oa.output_reqs.items()},
            {p: mapping.get(d, d) for p, d in oa.device_placement},
        )
        for n, oa in dg.op_attrs.items()
    }
    return DistributedGraph(dg.base, tensors, ops, ())


def rebind(scheme: Scheme, devices) -> Scheme:
    """Move a scheme onto ``devices`` (same count), pairing both sides in sorted order."""
    old = sorted(scheme.resources)
    new = sorted(devices)[: len(old)]
    if len(new) < len(old):
        raise NoFeasibleScheme(f"scheme {scheme.id!r} needs {len(old)} devices, {len(new)} available")
    mapping = dict(zip(old, new))
    return Scheme(scheme.id, remap_devices(scheme.graph, mapping), frozenset(new), scheme.level)


def linear_lr_scaling(hyper: dict, old: Scheme, new: Scheme) -> dict:
    """Keep the per-device batch fixed and scale the learning rate with the global batch."""
    ratio = len(new.resources) / len(old.resources)
    out = dict(hyper)
    out["batch_size"] = max(1, int(round(hyper["batch_size"] * ratio)))
    out["lr"] = hyper["lr"] * out["batch_size"] / hyper["batch_size"]
    return out


@dataclass
class ActionRecord:
    action: str  # none | replace | switch
    event: tuple
    from_scheme: str
    to_scheme: str
    placement_change: dict = field(default_factory=dict)
    converted: bool = False
    hyper: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "action": self.action, "event": [self.event[0], sorted(self.event[1])],
            "from_scheme": self.from_scheme, "to_scheme": self.to_scheme,
            "placement_change": dict(sorted(self.placement_change.items())),
            "converted": self.converted, "hyper": dict(sorted(self.hyper.items())),
        }


@dataclass
class ElasticJob:
    scheme: Scheme
    state: JobState
    available: set
    hyper_hook: object = linear_lr_scaling

    def spares(self) -> list:
        return sorted(set(self.available) - set(self.scheme.resources))


def _switch(job: ElasticJob, target: Scheme, event) -> ActionRecord:
    bound = rebind(target, job.available)
    new_attrs = {n: bound.weight_attr(n) for n in job.state.weights}
    job.state.weights = convert_weights(job.state.weights, job.state.attrs, new_attrs, job.state.shapes)
    job.state.attrs = new_attrs
    old = job.scheme
    job.state.hyper = job.hyper_hook(job.state.hyper, old, bound)
    job.scheme = bound
    return ActionRecord("switch", event, old.id, bound.id, converted=True, hyper=dict(job.state.hyper))


def elastic_step(job: ElasticJob, event, scheme_table) -> ActionRecord:
    """React to ``(kind, devices)`` where kind is device_failed, resources_granted or resources_revoked.

    ``scheme_table`` is ordered by trigger level (ascending device count).
    """
    kind, devs = event[0], frozenset([event[1]] if isinstance(event[1], str) else event[1])
    event = (kind, devs)
    table = sorted(scheme_table, key=lambda s: (s.level, len(s.resources), s.id))
    cur = job.scheme
    if kind == "device_failed":
        job.available -= devs
        lost = sorted(devs & cur.resources)
        if not lost:
            return ActionRecord("none", event, cur.id, cur.id)
        spares = job.spares()
        if len(spares) >= len(lost):
            mapping = dict(zip(lost, spares))
            graph = remap_devices(cur.graph, mapping)
            resources = (cur.resources - set(lost)) | set(mapping.values())
            new = Scheme(cur.id, graph, resources, cur.level)
            job.scheme = new
            job.state.attrs = {n: new.weight_attr(n) for n in job.state.weights}
            return ActionRecord("replace", event, cur.id, new.id, placement_change=mapping)
        kind = "resources_revoked"
    if kind == "resources_revoked":
        job.available -= devs
        if cur.resources <= job.available:
            return ActionRecord("none", event, cur.id, cur.id)
        fitting = [s for s in table if len(s.resources) <= len(job.available)]
        if not fitting:
            raise NoFeasibleScheme(f"{len(job.available)} devices left, no scheme fits")
        return _switch(job, fitting[-1], event)
    if kind == "resources_granted":
        job.available |= devs
        higher = [s for s in table if s.level > cur.level and len(s.resources) <= len(job.available)]
        if not higher:
            return ActionRecord("none", event, cur.id, cur.id)
        return _switch(job, higher[-1], event)
    raise InvalidParams(f"unknown event kind {kind!r}")


# --------------------------------------------------------------------------- toy training loop


def toy_gradient(name: str, shape, step: int, seed: int) -> np.ndarray:
    """Deterministic pseudo-gradient for one weight at one step."""
    tag = sum((i + 1) * ord(ch) for i, ch in enumerate(name))
    rng = np.random.default_rng([seed, step, tag])
    return rng.standard_normal(shape)


def train_step(state: JobState, seed: int, momentum: float = 0.9):
    """SGD with momentum applied shard by shard; momentum buffers live in ``weights`` as ``<name>@m``."""
    step = state.step + 1
    for name in sorted(n for n in state.weights if not n.endswith("@m")):
        attr = state.attrs[name]
        grad = toy_gradient(name, state.shapes[name], step, seed)
        mom = state.weights.get(name + "@m")
        for p, w in state.weights[name].items():
            g = grad[tuple(slice(lo, hi) for lo, hi in attr.box(p))]
            if mom is not None:
                mom[p] = momentum * mom[p] + g
                g = mom[p]
            state.weights[name][p] = w - state.hyper["lr"] * g
    state.step = step
    state.states["samples_seen"] = state.states.get("samples_seen", 0) + state.hyper["batch_size"]


def run_with_failure(scheme: Scheme, init: dict, steps: int, fail_at, level: int, storage, kv: KVStore,
                     seed: int = 0, interval: int = 5) -> JobState:
    """Train for ``steps`` with a checkpoint at step 0 and every ``interval`` steps.

    With ``fail_at = k`` the job crashes during step k, after the update but
    before that step's checkpoint is written, loses all in-process state and
    resumes from the latest committed checkpoint.
    """
    state = init_state(scheme, init, states={"samples_seen": 0})
    save_checkpoint(state, scheme, level, storage, kv)
    failed = False
    while state.step < steps:
        train_step(state, seed)
        if fail_at is not None and not failed and state.step == fail_at:
            failed = True
            del state
            state = restore(storage.latest(), storage, scheme, kv)
            continue
        if state.step % interval == 0:
            save_checkpoint(state, scheme, level, storage, kv)
    return state


def mlp_scheme(scheme_id: str, devices, layout: str = "data_parallel", level: int = None) -> Scheme:
    """A two-layer MLP (x[8,6] @ W1[6,8] -> relu -> @ W2[8,4]) laid out over ``devices``.

    ``data_parallel`` shards the batch and replicates the weights;
    ``model_parallel`` splits W1 by columns and W2 by rows.
    """
    devices = sorted(devices)
    n = len(devices)
    mesh = ProcessMesh((n,), tuple(range(n)))
    place = dict(enumerate(devices))
    g = build_graph(
        [OpSpec("fc1", "matmul", ("x", "W1"), ("h",)), OpSpec("act", "relu", ("h",), ("a",)),
         OpSpec("fc2", "matmul", ("a", "W2"), ("y",))],
        [TensorSpec("x", (8, 6)), TensorSpec("W1", (6, 8)), TensorSpec("h", (8, 8)), TensorSpec("a", (8, 8)),
         TensorSpec("W2", (8, 4)), TensorSpec("y", (8, 4))],
        ["x", "W1", "W2"], ["y"],
    )
    if layout == "data_parallel":
        dims = {"x": (0, -1), "W1": (-1, -1), "W2": (-1, -1)}
    elif layout == "model_parallel":
        dims = {"x": (-1, -1), "W1": (-1, 0), "W2": (0, -1)}
    else:
        raise InvalidParams(f"unknown layout {layout!r}")
    if n == 1:
        dims = {k: (-1, -1) for k in dims}
    ann = {k: make_attr(g.tensors[k].shape, mesh, d, place) for k, d in dims.items()}
    dg = complete(annotate(g, {"tensors": ann}))
    return Scheme(scheme_id, dg, frozenset(devices), n if level is None else level)


def weight_bytes(state: JobState) -> int:
    return sum(box_volume(state.attrs[n].box(p)) * 8 for n in state.weights for p in state.weights[n])
