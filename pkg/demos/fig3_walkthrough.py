"""Walk through the three-op worked example: completion, resharding, execution and cost.

Run with ``python3 demos/fig3_walkthrough.py``.
"""

from __future__ import annotations

from autoshard.completion import complete
from autoshard.cost_model import reduce_graph_cost
from autoshard.fixtures import load_fixture
from autoshard.numeric_exec import max_abs_diff, run_distributed, run_serial
from autoshard.planner import PlanConfig, plan
from autoshard.reshard import insert_comm


def main():
    fx = load_fixture("fig3")
    dg = insert_comm(complete(fx.graph))

    print("tensor layouts after completion")
    for name, attr in sorted(dg.tensor_attrs.items()):
        print(f"  {name:3s} mesh {attr.process_mesh.to_nested()} dims {list(attr.dims_mapping)} "
              f"on {sorted(set(attr.placement.values()))}")

    print("\ninserted communication")
    for c in dg.inserted_comm:
        print(f"  {c.kind:14s} {c.tensor:3s} {list(c.src_processes)} -> {list(c.dst_processes)}  {c.bytes} bytes")

    diff = max_abs_diff(run_serial(dg.base, fx.feeds), run_distributed(dg, fx.feeds))
    print(f"\nserial vs distributed max abs diff: {diff:.2e}")

    est = reduce_graph_cost(dg, fx.cluster, fx.db)
    print(f"hand-written layout: {est.total_time * 1e6:.2f} us, critical path {' -> '.join(est.critical_path)}")
    for dev, b in sorted(est.per_device_peak_memory.items()):
        print(f"  peak {dev}: {b} bytes")

    best = plan(dg.base, fx.cluster, fx.db, PlanConfig(search="beam", beam_width=4))
    print(f"\nplanner (beam 4): {best.cost * 1e6:.2f} us after {best.stats['evaluated']} evaluations")


if __name__ == "__main__":
    main()
