from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from autoshard.completion import candidate_reqs, complete
from autoshard.errors import CompletionError, ConflictingAnnotations
from autoshard.fixtures import fig3_annotations, fig3_graph, fig3_serial
from autoshard.graph_ir import ProcessMesh, annotate, make_attr, validate_dist_attr
from autoshard.numeric_exec import max_abs_diff, random_feeds, run_distributed, run_serial

from helpers import random_distributed


def test_fig3_intermediates_follow_table2():
    done = complete(fig3_graph())
    assert done.is_complete()
    a2 = done.tensor_attrs["A2"]
    assert a2.process_mesh.to_nested() == [[2, 3], [4, 5]]
    assert a2.dims_mapping == (0, 1)
    assert a2.expanded_sizes() == [[3, 3], [2, 2]]
    assert done.tensor_attrs["A3"] == a2
    a4 = done.tensor_attrs["A4"]
    assert a4.process_mesh.process_ids == (6, 7)
    assert a4.dims_mapping == (-1, -1)
    assert a4.expanded_sizes() == [[6, 6], [4, 4]]


def test_user_annotations_preserved():
    dg = fig3_graph()
    done = complete(dg)
    for name, attr in dg.tensor_attrs.items():
        assert done.tensor_attrs[name] == attr
    for name, oa in dg.op_attrs.items():
        assert done.op_attrs[name].input_reqs == oa.input_reqs


def test_fully_annotated_is_fixed_point():
    once = complete(fig3_graph())
    assert complete(once) == once


def test_empty_annotations_default_mesh():
    g = fig3_serial()
    m = ProcessMesh((1,), (0,))
    done = complete(annotate(g, {}), default_mesh=m, default_placement={0: "gpu0"})
    assert all(a.is_replicated() for a in done.tensor_attrs.values())
    feeds = random_feeds(g, 3)
    assert max_abs_diff(run_serial(g, feeds), run_distributed(done, feeds)) == 0.0


def test_no_annotation_without_default_mesh():
    with pytest.raises(CompletionError):
        complete(annotate(fig3_serial(), {}))


def test_conflicting_annotations():
    g = fig3_serial()
    ann = fig3_annotations()
    m = ProcessMesh((2, 2), (2, 3, 4, 5))
    place = {2: "gpu2", 3: "gpu3", 4: "gpu4", 5: "gpu5"}
    # A2 annotated row-sharded only, while Matmul1's requirements produce [0, 1]
    ann["tensors"]["A2"] = make_attr((6, 4), m, (0, -1), place)
    with pytest.raises(ConflictingAnnotations):
        complete(annotate(g, ann))


def test_partial_from_a1_only(fig3):
    ann = fig3_annotations()
    dg = annotate(fig3_serial(), {"tensors": {"A1": ann["tensors"]["A1"]}})
    done = complete(dg)
    assert done.tensor_attrs["A1"] == ann["tensors"]["A1"]
    assert max_abs_diff(run_serial(dg.base, fig3.feeds), run_distributed(done, fig3.feeds)) <= 1e-12


def test_candidate_counts():
    from autoshard.graph_ir import OpSpec

    m2 = ProcessMesh((2,), (0, 1))
    mm = OpSpec("mm", "matmul", ("a", "b"), ("c",))
    assert len(candidate_reqs(mm, [(6, 8), (8, 4)], m2)) == 6
    relu = OpSpec("r", "relu", ("a",), ("b",))
    assert len(candidate_reqs(relu, [(6, 4)], m2)) == 3
    assert len(candidate_reqs(mm, [(6, 8), (8, 4)], ProcessMesh((1,), (0,)))) == 1


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_complete_is_idempotent_and_valid(seed):
    dg = random_distributed(np.random.default_rng(seed))
    # keep only the feed annotations and let completion rebuild the rest
    partial = annotate(dg.base, {"tensors": {n: dg.tensor_attrs[n] for n in dg.base.feeds}})
    done = complete(partial)
    assert complete(done) == done
    assert complete(partial) == done
    for name, attr in done.tensor_attrs.items():
        assert validate_dist_attr(done.base.tensors[name], attr) == []
    for name in dg.base.feeds:
        assert done.tensor_attrs[name] == dg.tensor_attrs[name]
    feeds = random_feeds(done.base, seed)
    assert max_abs_diff(run_serial(done.base, feeds), run_distributed(done, feeds)) <= 1e-9
