"""Device failure, scale down, scale up and a crash-restore drill on a small MLP.

Run with ``python3 demos/elastic_drill.py``.
"""

from __future__ import annotations

import numpy as np

from autoshard.elastic import (
    ElasticJob,
    KVStore,
    MemoryStorage,
    checkpoint_interval,
    elastic_step,
    init_state,
    mlp_scheme,
    run_with_failure,
)


def main():
    devs = ["D0", "D1", "D2", "D3", "D4"]
    table = [mlp_scheme("mp2", devs[:2], "model_parallel", level=1), mlp_scheme("dp4", devs[:4], level=2)]
    rng = np.random.default_rng(0)
    init = {"W1": rng.standard_normal((6, 8)), "W2": rng.standard_normal((8, 4))}
    job = ElasticJob(table[1], init_state(table[1], init), set(devs))
    ref = job.state.global_weights()

    for event in [("device_failed", "D2"), ("resources_revoked", {"D3", "D4"}),
                  ("resources_granted", {"D2"}), ("resources_granted", {"D3"})]:
        rec = elastic_step(job, event, table)
        same = all(np.array_equal(ref[n], w) for n, w in job.state.global_weights().items())
        print(f"{event[0]:18s} {sorted(rec.event[1])}: {rec.action:7s} -> {rec.to_scheme} "
              f"on {sorted(job.scheme.resources)}, lr {job.state.hyper['lr']:.3g}, weights kept {same}")

    print(f"\nsave every {checkpoint_interval(2.0, 10_000.0):.0f} s for a 2 s save and a 10,000 s MTBF")
    init.update({k + "@m": np.zeros_like(v) for k, v in list(init.items())})
    clean = run_with_failure(table[1], init, 20, None, 2, MemoryStorage(), KVStore()).global_weights()
    crashed = run_with_failure(table[1], init, 20, 10, 2, MemoryStorage(), KVStore()).global_weights()
    print("crash at step 10, restore, resume: bitwise equal",
          all(np.array_equal(clean[n], crashed[n]) for n in clean))


if __name__ == "__main__":
    main()
