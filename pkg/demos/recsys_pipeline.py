"""Compare heterogeneous and single-resource pipelines for the recommender graph.

Run with ``python3 demos/recsys_pipeline.py``.
"""

from __future__ import annotations

from autoshard.actor_sim import compare_configs
from autoshard.fixtures import load_fixture, recsys_configs, recsys_manual_graph
from autoshard.planner import PlanConfig, plan, plan_from_annotations


def main():
    fx = load_fixture("recsys")
    g = fx.graph.base
    print(f"{'batch':>6s} " + " ".join(f"{name:>12s}" for name in recsys_configs()))
    for batch in (32, 128, 512):
        rep = compare_configs(g, recsys_configs(), fx.cluster, fx.db, batch=batch)
        print(f"{batch:6d} " + " ".join(f"{row['throughput']:12.4g}" for row in rep["table"]))

    manual = plan_from_annotations(recsys_manual_graph(), fx.cluster, fx.db).total_time
    found = plan(g, fx.cluster, fx.db, PlanConfig(search="beam", beam_width=8))
    print(f"\nmanual two-stage layout: {manual * 1e6:.2f} us per step")
    print(f"planner layout:          {found.cost * 1e6:.2f} us per step")
    for name, attr in sorted(found.graph.op_attrs.items()):
        print(f"  {name:8s} on {sorted(set(attr.placement().values()))}")


if __name__ == "__main__":
    main()
