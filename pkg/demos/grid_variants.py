"""Train the four actor/critic combinations on the congestion grid and print learning curves.

Pass a number of iterations as the first argument (default 60); about 0.5 s
per iteration per variant on one CPU core.
"""

import sys

import numpy as np

from collective_ac.countsim import evaluate_policy
from collective_ac.domains import make_grid_domain
from collective_ac.model import ObservationModel
from collective_ac.trainer import VARIANTS, TrainConfig, init_networks, train


def main(iterations=60):
    m = make_grid_domain()
    obs = ObservationModel.for_model(m, "o1")
    p0, _ = init_networks(m, obs, 0)
    base, se = evaluate_policy(m, p0, obs, 200, np.random.default_rng(0))
    print(f"untrained policy: {base:.2f} +/- {se:.2f}")
    step = max(1, iterations // 4)
    for v in VARIANTS:
        cfg = TrainConfig(variant=v, iterations=iterations, eval_interval=step, eval_samples=100)
        _, _, met = train(m, obs, cfg,
                          on_record=lambda r, v=v: print(f"  {v:5s} it {r['iteration']:4d} "
                                                         f"return {r['return_mean']:7.2f}",
                                                         flush=True))
        print(f"{v}: final {met.records[-1]['return_mean']:.2f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 60)
