"""Automatic SPMD sharding, cost-model planning and execution simulation for dataflow graphs."""

from .cluster import Cluster, load_cluster
from .completion import complete
from .cost_model import PerfDatabase, reduce_graph_cost
from .errors import AutoshardError
from .fixtures import load_fixture
from .graph_ir import DistAttr, DistributedGraph, OpDistAttr, OpSpec, ProcessMesh, TensorSpec, annotate, build_graph
from .planner import PlanConfig, brute_force_plan, plan
from .reshard import insert_comm, plan_reshard

__version__ = "0.1.0"

__all__ = [
    "AutoshardError",
    "Cluster",
    "DistAttr",
    "DistributedGraph",
    "OpDistAttr",
    "OpSpec",
    "PerfDatabase",
    "PlanConfig",
    "ProcessMesh",
    "TensorSpec",
    "annotate",
    "brute_force_plan",
    "build_graph",
    "complete",
    "insert_comm",
    "load_cluster",
    "load_fixture",
    "plan",
    "plan_reshard",
    "reduce_graph_cost",
]
