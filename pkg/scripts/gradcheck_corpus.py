"""Analytic against finite-difference gradients on every corpus feeder.

    python scripts/gradcheck_corpus.py --draws 5 --instants 20
"""

import argparse
import time

from gridfit.corpus import FEEDERS, load_feeder
from gridfit.forward import Problem, SolverConfig
from gridfit.gradcheck import check_gradient
from gridfit.synthlab import ScenarioConfig, generate_scenario, perturb_parameters


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--feeders", nargs="+", default=sorted(FEEDERS), choices=sorted(FEEDERS))
    ap.add_argument("--draws", type=int, default=5)
    ap.add_argument("--instants", type=int, default=20)
    ap.add_argument("--half-width", type=float, default=0.5)
    args = ap.parse_args()

    for name in args.feeders:
        model, peak = load_feeder(name)
        w_true = model.params_vector()
        data = generate_scenario(model, w_true, peak, ScenarioConfig(T=args.instants, unbalance_target=None)).data
        problem = Problem(model, data, SolverConfig(mismatch_tol=1e-12))
        t = time.perf_counter()
        errs = [
            check_gradient(problem, perturb_parameters(w_true, args.half_width, k), data.full_batch).max_rel_err
            for k in range(args.draws)
        ]
        print(f"{name:12s} {12 * model.n_lines:4d} coordinates  worst rel err {max(errs):.2e}  "
              f"({time.perf_counter() - t:.1f} s)")


if __name__ == "__main__":
    main()
