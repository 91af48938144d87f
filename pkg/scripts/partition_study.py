"""Partitioned against whole-network estimation on the 37-bus corpus feeder.

Checks that the sub-network solves reproduce the whole-network voltages,
then estimates from a perturbed start both ways and reports MADR and wall
time.

    python scripts/partition_study.py --T 240 --epochs 5 --workers 3
"""

import argparse
import time

import numpy as np

from gridfit.corpus import load_feeder
from gridfit.estimator import EstimatorConfig, sgd_estimate
from gridfit.evaluation import madr
from gridfit.forward import Problem
from gridfit.netmodel import assemble_admittance
from gridfit.partition import (
    partition_network, partitioned_estimate, quasi_source_series, rotate_to_reference, subnetwork_data,
)
from gridfit.synthlab import ScenarioConfig, generate_scenario, perturb_parameters


class Job:
    def __init__(self, cfg):
        self.cfg = cfg

    def __call__(self, model, data, w):
        return sgd_estimate(data, model, w, cfg=self.cfg)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--T", type=int, default=240)
    ap.add_argument("--epochs", type=int, default=5)
    ap.add_argument("--workers", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--cut", nargs=2, action="append", metavar=("FROM", "TO"))
    args = ap.parse_args()
    cuts = [tuple(c) for c in args.cut] if args.cut else [("702", "703"), ("708", "733")]

    model, peak = load_feeder("ieee37_like")
    w_true = model.params_vector()
    data = generate_scenario(model, w_true, peak, ScenarioConfig(T=args.T, unbalance_target=None, rng_seed=args.seed)).data
    plan = partition_network(model, cuts)
    u = Problem(model, data).solve(assemble_admittance(model), np.arange(data.T + 1))
    sub_data = subnetwork_data(plan, data, quasi_source_series(plan, w_true, u, data.source))

    idx = model.state_index
    for sub, d in zip(plan.subnetworks, sub_data):
        u_sub = Problem(sub.model, d).solve(assemble_admittance(sub.model), np.arange(d.T + 1))
        ref = rotate_to_reference(u, d.source if not sub.quasi_sourced else u[:, idx[sub.source]])
        nodes = [n for n in sub.model.nodes if n != sub.source]
        err = np.max(np.abs(u_sub[:, [sub.model.state_index[n] for n in nodes]] - ref[:, [idx[n] for n in nodes]]))
        print(f"sub-network at {sub.source}: {len(sub.lines)} lines, pseudo loads at {sub.pseudo_nodes or '-'}, "
              f"max voltage error {err:.2e} pu")

    w0 = perturb_parameters(w_true, 0.5, args.seed)
    cfg = EstimatorConfig(max_epochs=args.epochs, rng_seed=args.seed)
    t = time.perf_counter()
    w_part, _ = partitioned_estimate(plan, sub_data, w0, Job(cfg), args.workers)
    t_part = time.perf_counter() - t
    t = time.perf_counter()
    w_whole, _ = sgd_estimate(data, model, w0, cfg=cfg)
    t_whole = time.perf_counter() - t
    print(f"initial MADR {madr(w0, w_true):.2f}%")
    print(f"partitioned    MADR {madr(w_part, w_true):.2f}%  in {t_part:.1f} s ({args.workers} workers)")
    print(f"whole network  MADR {madr(w_whole, w_true):.2f}%  in {t_whole:.1f} s")


if __name__ == "__main__":
    main()
