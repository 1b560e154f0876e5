from __future__ import annotations

import json
import shutil

import numpy as np
import pytest

from autoshard.completion import complete
from autoshard.errors import SchemaError, UnknownFixture
from autoshard.fixtures import DATA_DIR, FIXTURES, fig3_annotations, load_fixture, regenerate, verify_checksums
from autoshard.graph_ir import local_shard_shape
from autoshard.numeric_exec import run_serial


def test_pinned_checksums_hold():
    assert verify_checksums() == []


def test_regenerates_bit_identically(tmp_path):
    sums = regenerate(tmp_path)
    assert sums == json.loads((DATA_DIR / "checksums.json").read_text())


@pytest.mark.parametrize("name", FIXTURES)
def test_every_fixture_loads(name):
    fx = load_fixture(name)
    assert fx.cluster.compute_devices()


def test_fig3_bundle(fig3):
    assert [op.kind for op in fig3.graph.base.ordered_ops()] == ["matmul", "relu", "matmul"]
    assert len(fig3.cluster.compute_devices("gpu")) == 8 and len(fig3.cluster.compute_devices("cpu")) == 2
    done = complete(fig3.graph)
    assert done.op_attrs["Matmul1"].placement() == {2: "gpu2", 3: "gpu3", 4: "gpu4", 5: "gpu5"}
    assert done.tensor_attrs["W2"].placement == {6: "cpu0", 7: "cpu1"}
    ann = fig3_annotations()["tensors"]
    assert local_shard_shape(fig3.graph.base.tensors["A1"], ann["A1"], 0) == (3, 8)
    assert np.array_equal(run_serial(fig3.graph.base, fig3.feeds).fetches["A4"], fig3.expected["A4"])


def test_recsys_bundle(recsys):
    ops = [op.kind for op in recsys.graph.base.ordered_ops()]
    assert ops[0] == "embedding_lookup" and "matmul" in ops
    kinds = {recsys.cluster.component(d).kind for d in recsys.cluster.compute_devices()}
    assert kinds == {"cpu", "gpu"}
    out = run_serial(recsys.graph.base, recsys.feeds).fetches["out"]
    assert np.array_equal(out, recsys.expected["out"])


def test_unknown_fixture():
    with pytest.raises(UnknownFixture):
        load_fixture("nosuch")


def test_tampered_fixture_rejected(tmp_path):
    root = tmp_path / "data"
    shutil.copytree(DATA_DIR, root)
    path = root / "fig3" / "cluster.json"
    path.write_text(path.read_text().replace("gpu7", "gpu9"))
    with pytest.raises(SchemaError):
        load_fixture("fig3", root)
    load_fixture("recsys", root)
