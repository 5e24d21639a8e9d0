"""TD(0) on random on-policy MDPs with one-hot features: distance to the TD fixed point.

Reports the relative error after each checkpoint for a chosen step-size schedule, which
shows how the schedule's total step budget governs the error reached.
"""

import argparse

import numpy as np

from pfpe.approximator import FeatureMap
from pfpe.mdp import Policy, random_ergodic_mdp, stationary_distribution
from pfpe.td_engine import StepSizeSchedule, linear_setup, run_td0, td_fixed_point_linear

p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
p.add_argument("--instances", type=int, default=5)
p.add_argument("--steps", type=int, default=200_000)
p.add_argument("--alpha0", type=float, default=0.5)
p.add_argument("--power", type=float, default=0.8)
p.add_argument("--checkpoints", type=int, default=5)
args = p.parse_args()

sched = StepSizeSchedule.robbins_monro(args.alpha0, args.power)
marks = np.linspace(0, args.steps, args.checkpoints + 1).astype(int)
print("instance,n_states,n_actions,step,rel_error")
for inst in range(args.instances):
    rng = np.random.default_rng(inst)
    n_s, n_a = int(rng.integers(2, 11)), int(rng.integers(1, 4))
    mdp = random_ergodic_mdp(rng, n_s, n_a)
    pi = Policy(rng.dirichlet(np.ones(n_a), size=n_s))
    d = stationary_distribution(mdp, pi)
    feats = FeatureMap.one_hot(n_s, n_a)
    approx, gram = linear_setup(mdp, feats, d, pi, pi)
    w_star = td_fixed_point_linear(gram)
    path = run_td0(mdp, approx, d, pi, pi, sched, args.steps, np.zeros(feats.dim), seed=inst, return_iterates=True)
    for m in marks:
        err = np.linalg.norm(path[m] - w_star) / max(1.0, np.linalg.norm(w_star))
        print(f"{inst},{n_s},{n_a},{m},{err:.4g}")
