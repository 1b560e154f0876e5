"""Bundled inputs: the worked 3-op example, a desk-scale recommender, toy clusters and perf databases.

Everything under ``data/`` is produced by :func:`regenerate` from pinned
seeds and verified against ``data/checksums.json`` when loaded.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .completion import complete
from .cluster import Cluster, cluster_from_json
from .cost_model import PerfDatabase, op_flops, reduce_graph_cost
from .errors import SchemaError, UnknownFixture
from .graph_ir import (
    DistributedGraph,
    OpDistAttr,
    OpSpec,
    ProcessMesh,
    TensorSpec,
    annotate,
    build_graph,
    graph_from_json,
    graph_to_json,
    make_attr,
)
from .numeric_exec import load_array_dir, run_serial, save_array_dir

DATA_DIR = Path(__file__).parent / "data"
FIXTURE_SEED = 20240611

FIXTURES = ("fig3", "recsys", "homogeneous8", "heter_cpu_gpu", "two_machine")

# calibration for the recommender database (see the decisions notes)
EMBED_RATE = {"cpu": 1.0e8, "gpu": 2.5e7}  # looked-up elements per second
DENSE_FLOPS = {"cpu": 1.0e9, "gpu": 8.0e9}
RECSYS_VOCAB = 1000
RECSYS_DIMS = (16, 32, 16)


@dataclass
class FixtureSet:
    name: str
    graph: DistributedGraph = None
    cluster: Cluster = None
    db: PerfDatabase = None
    feeds: dict = field(default_factory=dict)
    expected: dict = field(default_factory=dict)
    files: dict = field(default_factory=dict)  # role -> path


# --------------------------------------------------------------------------- builders


def fig3_serial():
    tensors = [
        TensorSpec("A1", (6, 8)), TensorSpec("W1", (8, 4)), TensorSpec("W2", (4, 4)),
        TensorSpec("A2", (6, 4)), TensorSpec("A3", (6, 4)), TensorSpec("A4", (6, 4)),
    ]
    ops = [
        OpSpec("Matmul1", "matmul", ("A1", "W1"), ("A2",)),
        OpSpec("Relu", "relu", ("A2",), ("A3",)),
        OpSpec("Matmul2", "matmul", ("A3", "W2"), ("A4",)),
    ]
    return build_graph(ops, tensors, ["A1", "W1", "W2"], ["A4"])


def fig3_annotations():
    """Tensor and operator attributes of the worked example, with self-consistent shard sizes."""
    m01 = ProcessMesh((2,), (0, 1))
    m67 = ProcessMesh((2,), (6, 7))
    m2345 = ProcessMesh((2, 2), (2, 3, 4, 5))
    g01 = {0: "gpu0", 1: "gpu1"}
    c67 = {6: "cpu0", 7: "cpu1"}
    g67 = {6: "gpu6", 7: "gpu7"}
    g2345 = {2: "gpu2", 3: "gpu3", 4: "gpu4", 5: "gpu5"}
    tensors = {
        "A1": make_attr((6, 8), m01, (0, -1), g01),
        "W1": make_attr((8, 4), m01, (-1, 0), g01),
        "W2": make_attr((4, 4), m67, (0, -1), c67),
    }
    ops = {
        "Matmul1": OpDistAttr(
            m2345,
            {"A1": make_attr((6, 8), m2345, (0, -1), g2345), "W1": make_attr((8, 4), m2345, (-1, 1), g2345)},
            {"A2": make_attr((6, 4), m2345, (0, 1), g2345)},
        ),
        "Relu": OpDistAttr(
            m2345,
            {"A2": make_attr((6, 4), m2345, (0, 1), g2345)},
            {"A3": make_attr((6, 4), m2345, (0, 1), g2345)},
        ),
        "Matmul2": OpDistAttr(
            m67,
            {"A3": make_attr((6, 4), m67, (-1, 0), g67), "W2": make_attr((4, 4), m67, (0, -1), g67)},
            {"A4": make_attr((6, 4), m67, (-1, -1), g67)},
        ),
    }
    return {"tensors": tensors, "ops": ops}


def fig3_graph() -> DistributedGraph:
    """The worked example as annotated by hand (intermediate tensors left for completion)."""
    return annotate(fig3_serial(), fig3_annotations())


def fig3_complete() -> DistributedGraph:
    return complete(fig3_graph())


def _machine(mid, comps):
    return {"id": mid, "components": [
        {"id": cid, "kind": kind, "flops": flops, "memory_bytes": mem} for cid, kind, flops, mem in comps
    ]}


def fig3_cluster_doc() -> dict:
    gpus = [(f"gpu{i}", "gpu", 1.0e12, 16 << 30) for i in range(8)]
    cpus = [(f"cpu{i}", "cpu", 1.0e11, 64 << 30) for i in range(2)]
    links = []
    for i in range(8):
        for j in range(i + 1, 8):
            links.append({"a": f"gpu{i}", "b": f"gpu{j}", "bandwidth": 3.0e11, "latency": 1.0e-6})
    for c in range(2):
        for i in range(8):
            links.append({"a": f"cpu{c}", "b": f"gpu{i}", "bandwidth": 1.6e10, "latency": 5.0e-6})
    links.append({"a": "cpu0", "b": "cpu1", "bandwidth": 4.0e10, "latency": 1.0e-6})
    return {"machines": [_machine("m0", gpus + cpus)], "links": links}


def homogeneous8_doc() -> dict:
    gpus = [(f"gpu{i}", "gpu", 1.0e12, 16 << 30) for i in range(8)]
    links = [
        {"a": f"gpu{i}", "b": f"gpu{j}", "bandwidth": 3.0e11, "latency": 1.0e-6}
        for i in range(8) for j in range(i + 1, 8)
    ]
    return {"machines": [_machine("m0", gpus)], "links": links}


def heter_cpu_gpu_doc() -> dict:
    comps = [
        ("cpu0", "cpu", 1.0e9, 64 << 30), ("cpu1", "cpu", 1.0e9, 64 << 30),
        ("gpu0", "gpu", 8.0e9, 16 << 30), ("gpu1", "gpu", 8.0e9, 16 << 30),
    ]
    links = [
        {"a": "cpu0", "b": "cpu1", "bandwidth": 4.0e10, "latency": 1.0e-6},
        {"a": "gpu0", "b": "gpu1", "bandwidth": 3.0e11, "latency": 1.0e-6},
    ]
    for c in ("cpu0", "cpu1"):
        for g in ("gpu0", "gpu1"):
            links.append({"a": c, "b": g, "bandwidth": 1.6e10, "latency": 2.0e-6})
    return {"machines": [_machine("ws0", comps)], "links": links}


def two_machine_doc() -> dict:
    machines, links = [], []
    for m in range(2):
        comps = [(f"m{m}gpu{i}", "gpu", 1.0e12, 16 << 30) for i in range(2)]
        comps.append((f"m{m}nic", "nic", 0.0, 0))
        machines.append(_machine(f"m{m}", comps))
        links.append({"a": f"m{m}gpu0", "b": f"m{m}gpu1", "bandwidth": 3.0e11, "latency": 1.0e-6})
        for i in range(2):
            links.append({"a": f"m{m}gpu{i}", "b": f"m{m}nic", "bandwidth": 1.6e10, "latency": 2.0e-6})
    links.append({"a": "m0nic", "b": "m1nic", "bandwidth": 1.25e10, "latency": 1.0e-5})
    return {"machines": machines, "links": links}


def recsys_serial(batch: int = 128):
    """Embedding lookup followed by a three-layer MLP over one sparse feature."""
    d, h1, h2 = RECSYS_DIMS
    tensors = [
        TensorSpec("ids", (batch,)), TensorSpec("table", (RECSYS_VOCAB, d)),
        TensorSpec("emb", (batch, d)),
        TensorSpec("w1", (d, h1)), TensorSpec("h1", (batch, h1)), TensorSpec("a1", (batch, h1)),
        TensorSpec("w2", (h1, h2)), TensorSpec("h2", (batch, h2)), TensorSpec("a2", (batch, h2)),
        TensorSpec("w3", (h2, 1)), TensorSpec("out", (batch, 1)),
    ]
    ops = [
        OpSpec("lookup", "embedding_lookup", ("ids", "table"), ("emb",)),
        OpSpec("fc1", "matmul", ("emb", "w1"), ("h1",)),
        OpSpec("relu1", "relu", ("h1",), ("a1",)),
        OpSpec("fc2", "matmul", ("a1", "w2"), ("h2",)),
        OpSpec("relu2", "relu", ("h2",), ("a2",)),
        OpSpec("fc3", "matmul", ("a2", "w3"), ("out",)),
    ]
    return build_graph(ops, tensors, ["ids", "table", "w1", "w2", "w3"], ["out"])


RECSYS_EMBED_OPS = ("lookup",)
RECSYS_DENSE_OPS = ("fc1", "relu1", "fc2", "relu2", "fc3")


def recsys_configs(mode_embed="async_push_pull", mode_dense="sync_collective") -> dict:
    """The three resource configurations compared on the recommender: two pipeline stages each."""
    from .actor_sim import Stage

    def two(embed_dev, dense_dev):
        return [Stage(RECSYS_EMBED_OPS, (embed_dev,), mode_embed), Stage(RECSYS_DENSE_OPS, (dense_dev,), mode_dense)]

    return {"heter": two("cpu0", "gpu0"), "cpu_only": two("cpu0", "cpu1"), "gpu_only": two("gpu0", "gpu1")}


def recsys_manual_graph(batch: int = 128) -> DistributedGraph:
    """Hand-written two-stage partition: embedding on cpu0, dense layers on gpu0, all replicated."""
    g = recsys_serial(batch)
    m_cpu = ProcessMesh((1,), (0,))
    m_gpu = ProcessMesh((1,), (2,))
    ops = {}
    for op in g.ordered_ops():
        mesh, dev = (m_cpu, {0: "cpu0"}) if op.name in RECSYS_EMBED_OPS else (m_gpu, {2: "gpu0"})
        ins = {i: make_attr(g.tensors[i].shape, mesh, (-1,) * g.tensors[i].rank, dev) for i in op.inputs}
        out = op.outputs[0]
        ops[op.name] = OpDistAttr(mesh, ins, {out: make_attr(g.tensors[out].shape, mesh, (-1,) * g.tensors[out].rank, dev)})
    tensors = {}
    for op in g.ordered_ops():
        for i in op.inputs:
            if i in g.feeds and i not in tensors:
                tensors[i] = ops[op.name].input_reqs[i]
        tensors[op.outputs[0]] = ops[op.name].output_reqs[op.outputs[0]]
    return DistributedGraph(g, tensors, ops)


def _record(kind, ins, outs, dev_kind, seconds):
    return {"kind": kind, "in_shapes": [list(s) for s in ins], "out_shapes": [list(s) for s in outs],
            "dtype": "f64", "device_kind": dev_kind, "seconds": float(seconds)}


def recsys_perf_db_doc() -> list:
    """Calibrated records: embedding favours cpu, dense layers favour gpu.

    Embedding records at several row counts let the database fit a line for
    other batch sizes; dense ops fall back to the device FLOP rate.
    """
    d, h1, h2 = RECSYS_DIMS
    recs = []
    for dev in ("cpu", "gpu"):
        for rows in (8, 32, 128, 512):
            ins = [(rows,), (RECSYS_VOCAB, d)]
            outs = [(rows, d)]
            recs.append(_record("embedding_lookup", ins, outs, dev, op_flops("embedding_lookup", ins, outs) / EMBED_RATE[dev]))
        for rows in (32, 128):
            for (k, n) in ((d, h1), (h1, h2), (h2, 1)):
                ins = [(rows, k), (k, n)]
                outs = [(rows, n)]
                recs.append(_record("matmul", ins, outs, dev, op_flops("matmul", ins, outs) / DENSE_FLOPS[dev]))
    return sorted(recs, key=lambda r: json.dumps(r, sort_keys=True))


def recsys_cluster_doc() -> dict:
    return heter_cpu_gpu_doc()


def synthetic_perf_db_doc(seed: int = FIXTURE_SEED) -> list:
    """Seeded noisy records covering every local shard shape of the worked example.

    Times are FLOPs over the device rate plus a per-launch overhead, scaled
    by uniform noise in [0.9, 1.1].
    """
    rng = np.random.default_rng(seed)
    shapes = []
    for m in (1, 2, 3, 6):
        for n in (1, 2, 4):
            for k in (1, 2, 4, 8):
                shapes.append(("matmul", [(m, k), (k, n)], [(m, n)]))
            shapes.append(("relu", [(m, n)], [(m, n)]))
    recs = []
    for dev, rate, overhead in (("gpu", 1.0e12, 2.0e-6), ("cpu", 1.0e11, 5.0e-6)):
        for kind, ins, outs in shapes:
            base = op_flops(kind, ins, outs) / rate + overhead
            recs.append(_record(kind, ins, outs, dev, round(base * float(rng.uniform(0.9, 1.1)), 12)))
    return recs


def fig3_feeds(seed: int = FIXTURE_SEED) -> dict:
    rng = np.random.default_rng(seed)
    g = fig3_serial()
    return {name: rng.standard_normal(g.tensors[name].shape) for name in sorted(g.feeds)}


def recsys_feeds(batch: int = 128, seed: int = FIXTURE_SEED) -> dict:
    rng = np.random.default_rng(seed + 1)
    g = recsys_serial(batch)
    feeds = {}
    for name in sorted(g.feeds):
        shape = g.tensors[name].shape
        if name == "ids":
            feeds[name] = rng.integers(0, RECSYS_VOCAB, size=shape).astype(np.float64)
        else:
            feeds[name] = rng.standard_normal(shape) * 0.1
    return feeds


# --------------------------------------------------------------------------- files


def _dump(path: Path, doc):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def regenerate(root=DATA_DIR) -> dict:
    """Write every fixture file under ``root`` and return {relative path: sha256}."""
    root = Path(root)
    _dump(root / "fig3" / "graph.json", graph_to_json(fig3_graph()))
    _dump(root / "fig3" / "cluster.json", fig3_cluster_doc())
    _dump(root / "fig3" / "perf_db.json", synthetic_perf_db_doc())
    feeds = fig3_feeds()
    save_array_dir(root / "fig3" / "feeds", feeds)
    save_array_dir(root / "fig3" / "expected", run_serial(fig3_serial(), feeds).fetches)
    est = reduce_graph_cost(
        fig3_complete(), cluster_from_json(fig3_cluster_doc()), PerfDatabase.from_json(synthetic_perf_db_doc())
    )
    _dump(root / "fig3" / "expected" / "cost.json", _rounded(est.to_json()))

    _dump(root / "recsys" / "graph.json", graph_to_json(recsys_serial()))
    _dump(root / "recsys" / "cluster.json", recsys_cluster_doc())
    _dump(root / "recsys" / "perf_db.json", recsys_perf_db_doc())
    rfeeds = recsys_feeds()
    save_array_dir(root / "recsys" / "feeds", rfeeds)
    save_array_dir(root / "recsys" / "expected", run_serial(recsys_serial(), rfeeds).fetches)

    _dump(root / "homogeneous8" / "cluster.json", homogeneous8_doc())
    _dump(root / "heter_cpu_gpu" / "cluster.json", heter_cpu_gpu_doc())
    _dump(root / "two_machine" / "cluster.json", two_machine_doc())
    sums = checksums(root)
    _dump(root / "checksums.json", sums)
    return sums


def _rounded(doc):
    if isinstance(doc, float):
        return float(f"{doc:.9g}")
    if isinstance(doc, dict):
        return {k: _rounded(v) for k, v in doc.items()}
    if isinstance(doc, list):
        return [_rounded(v) for v in doc]
    return doc


def checksums(root=DATA_DIR) -> dict:
    root = Path(root)
    out = {}
    for path in sorted(root.rglob("*")):
        if path.is_file() and path.name != "checksums.json":
            out[path.relative_to(root).as_posix()] = hashlib.sha256(path.read_bytes()).hexdigest()
    return out


def verify_checksums(root=DATA_DIR) -> list:
    """Relative paths whose content differs from the pinned checksums."""
    root = Path(root)
    pinned = json.loads((root / "checksums.json").read_text())
    actual = checksums(root)
    return sorted(k for k in set(pinned) | set(actual) if pinned.get(k) != actual.get(k))


def load_fixture(name: str, root=DATA_DIR) -> FixtureSet:
    if name not in FIXTURES:
        raise UnknownFixture(f"no fixture named {name!r}; known: {', '.join(FIXTURES)}")
    root = Path(root)
    bad = [p for p in verify_checksums(root) if p.startswith(name + "/")]
    if bad:
        raise SchemaError(f"fixture {name!r} files do not match pinned checksums: {bad}")
    base = root / name
    fx = FixtureSet(name)
    if (base / "graph.json").exists():
        fx.files["graph"] = base / "graph.json"
        fx.graph = graph_from_json(json.loads((base / "graph.json").read_text()))
    fx.files["cluster"] = base / "cluster.json"
    fx.cluster = cluster_from_json(json.loads((base / "cluster.json").read_text()))
    if (base / "perf_db.json").exists():
        fx.files["perf_db"] = base / "perf_db.json"
        fx.db = PerfDatabase.from_json(json.loads((base / "perf_db.json").read_text()))
    if (base / "feeds").is_dir():
        fx.files["feeds"] = base / "feeds"
        fx.feeds = load_array_dir(base / "feeds")
    if (base / "expected").is_dir():
        fx.files["expected"] = base / "expected"
        fx.expected = load_array_dir(base / "expected")
        cost = base / "expected" / "cost.json"
        if cost.exists():
            fx.expected["cost"] = json.loads(cost.read_text())
    return fx
