"""Heterogeneous cluster model: components plus a flattened sparse link matrix."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

from .errors import DanglingLink, SchemaError, Unreachable, UnknownDevice
from .graph_ir import DistAttr

COMPONENT_KINDS = ("cpu", "gpu", "npu", "nic", "switch")
COMPUTE_KINDS = ("cpu", "gpu", "npu")
INF_BANDWIDTH = math.inf


@dataclass(frozen=True)
class Component:
    id: str
    kind: str
    flops: float
    memory_bytes: int
    host_machine: str

    def __post_init__(self):
        if self.kind not in COMPONENT_KINDS:
            raise SchemaError(f"component {self.id!r}: unknown kind {self.kind!r}")
        if self.flops < 0 or self.memory_bytes < 0:
            raise SchemaError(f"component {self.id!r}: flops and memory_bytes must be >= 0")

    @property
    def is_compute(self) -> bool:
        return self.kind in COMPUTE_KINDS


@dataclass(frozen=True)
class Link:
    bandwidth: float
    latency: float
    utilization: float = 1.0

    @property
    def effective_bandwidth(self) -> float:
        # static utilization scalar; a placeholder for a real sharing model
        return self.bandwidth * self.utilization


@dataclass(frozen=True)
class LinkProfile:
    bandwidth: float
    latency: float
    path: tuple = ()

    @property
    def hops(self) -> int:
        return max(len(self.path) - 1, 0)

    @property
    def edges(self) -> tuple:
        """Undirected edges along the path, each as a sorted pair."""
        return tuple(tuple(sorted(e)) for e in zip(self.path, self.path[1:]))


@dataclass(frozen=True)
class Cluster:
    machines: tuple  # (machine id, tuple of component ids)
    components: dict
    links: dict = field(default_factory=dict)  # (a, b) with a < b -> Link

    def __hash__(self):
        return id(self)

    def component(self, device_id) -> Component:
        try:
            return self.components[device_id]
        except KeyError:
            raise UnknownDevice(f"unknown device {device_id!r}") from None

    def link(self, a, b):
        return self.links.get((a, b) if a < b else (b, a))

    def neighbours(self, a) -> list:
        return _adjacency(self)[a]

    def compute_devices(self, kind=None) -> list:
        return sorted(
            c.id for c in self.components.values() if c.is_compute and (kind is None or c.kind == kind)
        )


@lru_cache(maxsize=64)
def _adjacency(c: Cluster) -> dict:
    adj = {d: [] for d in c.components}
    for a, b in c.links:
        adj[a].append(b)
        adj[b].append(a)
    return {d: sorted(v) for d, v in adj.items()}


def link_profile(c: Cluster, a, b) -> LinkProfile:
    """Bandwidth/latency between two devices.

    A direct edge wins. Otherwise the minimum-hop path is used (ties broken by
    the lexicographically smallest device-id sequence); its bandwidth is the
    bottleneck edge and its latency the sum over edges.
    """
    c.component(a)
    c.component(b)
    if a == b:
        return LinkProfile(INF_BANDWIDTH, 0.0, (a,))
    return _profile(c, *sorted((a, b)))


@lru_cache(maxsize=4096)
def _profile(c: Cluster, a, b) -> LinkProfile:
    path = _min_hop_path(c, a, b)
    if path is None:
        raise Unreachable(f"no path between {a!r} and {b!r}")
    bw = math.inf
    lat = 0.0
    for x, y in zip(path, path[1:]):
        edge = c.link(x, y)
        bw = min(bw, edge.effective_bandwidth)
        lat += edge.latency
    return LinkProfile(bw, lat, tuple(path))


def _min_hop_path(c: Cluster, a, b):
    # BFS over sorted adjacency gives the minimum hop count; among equal-length
    # paths keep the lexicographically smallest by comparing whole paths.
    adj = _adjacency(c)
    best = {a: (a,)}
    frontier = [a]
    while frontier and b not in best:
        nxt = {}
        for u in frontier:
            for v in adj[u]:
                if v in best:
                    continue
                cand = best[u] + (v,)
                if v not in nxt or cand < nxt[v]:
                    nxt[v] = cand
        best.update(nxt)
        frontier = sorted(nxt)
    return best.get(b)


def device_of(c: Cluster, attr: DistAttr, p: int) -> Component:
    placement = attr.placement
    if p not in placement:
        raise UnknownDevice(f"process {p} has no device in this placement")
    return c.component(placement[p])


# --------------------------------------------------------------------------- JSON


def _require(doc, keys, where):
    if not isinstance(doc, dict):
        raise SchemaError(f"{where}: expected an object")
    for k in keys:
        if k not in doc:
            raise SchemaError(f"{where}: missing field {k!r}")


def cluster_from_json(doc) -> Cluster:
    _require(doc, ("machines", "links"), "cluster")
    extra = set(doc) - {"machines", "links"}
    if extra:
        raise SchemaError(f"cluster: unknown field(s) {sorted(extra)}")
    comps = {}
    machines = []
    for i, m in enumerate(doc["machines"]):
        _require(m, ("id", "components"), f"cluster.machines[{i}]")
        ids = []
        for j, comp in enumerate(m["components"]):
            where = f"cluster.machines[{i}].components[{j}]"
            _require(comp, ("id", "kind", "flops", "memory_bytes"), where)
            if comp["id"] in comps:
                raise SchemaError(f"{where}: duplicate device id {comp['id']!r}")
            try:
                comps[comp["id"]] = Component(
                    str(comp["id"]), comp["kind"], float(comp["flops"]), int(comp["memory_bytes"]), str(m["id"])
                )
            except (TypeError, ValueError) as exc:
                raise SchemaError(f"{where}: {exc}") from exc
            ids.append(comp["id"])
        machines.append((str(m["id"]), tuple(ids)))
    links = {}
    for i, l in enumerate(doc["links"]):
        where = f"cluster.links[{i}]"
        _require(l, ("a", "b", "bandwidth", "latency"), where)
        a, b = l["a"], l["b"]
        for end in (a, b):
            if end not in comps:
                raise DanglingLink(f"{where}: endpoint {end!r} is not a known device")
        if a == b:
            raise SchemaError(f"{where}: self-edge on {a!r}")
        bw, lat = float(l["bandwidth"]), float(l["latency"])
        util = float(l.get("utilization", 1.0))
        if bw <= 0 or lat < 0 or not 0 < util <= 1:
            raise SchemaError(f"{where}: need bandwidth > 0, latency >= 0, 0 < utilization <= 1")
        links[tuple(sorted((a, b)))] = Link(bw, lat, util)
    return Cluster(tuple(machines), comps, links)


def cluster_to_json(c: Cluster) -> dict:
    machines = []
    for mid, ids in c.machines:
        machines.append({
            "id": mid,
            "components": [
                {"id": d, "kind": c.components[d].kind, "flops": c.components[d].flops,
                 "memory_bytes": c.components[d].memory_bytes}
                for d in ids
            ],
        })
    links = []
    for (a, b), l in sorted(c.links.items()):
        entry = {"a": a, "b": b, "bandwidth": l.bandwidth, "latency": l.latency}
        if l.utilization != 1.0:
            entry["utilization"] = l.utilization
        links.append(entry)
    return {"machines": machines, "links": links}


def load_cluster(spec) -> Cluster:
    """Accept a parsed document or a path to a JSON file."""
    if isinstance(spec, dict):
        return cluster_from_json(spec)
    with open(spec) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{spec}: invalid JSON ({exc})") from exc
    return cluster_from_json(doc)


def simple_cluster(devices, bandwidth=1e10, latency=1e-6, kind="gpu", flops=1e12, memory_bytes=16 << 30) -> Cluster:
    """Single machine, fully connected devices; handy for tests and demos."""
    doc = {
        "machines": [{"id": "m0", "components": [
            {"id": d, "kind": kind, "flops": flops, "memory_bytes": memory_bytes} for d in devices
        ]}],
        "links": [
            {"a": a, "b": b, "bandwidth": bandwidth, "latency": latency}
            for i, a in enumerate(devices) for b in devices[i + 1:]
        ],
    }
    return cluster_from_json(doc)
