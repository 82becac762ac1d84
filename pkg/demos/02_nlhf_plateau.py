"""A single-output equilibrium does not improve when it is sampled more often."""
from ualign import majority_instance, nlhf_solve
from ualign.solvers import SolverConfig, certify, find_fixed_point

eps = 0.1
m = majority_instance(eps)  # 60% of users prefer y1, 40% prefer y2

# The two-player equilibrium always answers y1.
pi = nlhf_solve(m)
print("two-player policy:", pi.probs)

# Drawing k answers from it still gives k copies of y1, so any y2 opponent
# keeps winning 40% of the time.
for k in (1, 2, 4, 8):
    print(f"k={k}: certified {certify(pi, k, 1, m).certified_rate:.4f}  target {k / (k + 1):.4f}")

# The multiplayer equilibrium hedges instead, and meets k/(k+1) or better.
for k in (1, 2, 4, 8):
    cand = find_fixed_point(m, k, SolverConfig(algorithm="projected-gradient", iterations=20_000, tol=1e-12))
    rep = certify(cand.policy, k, 1, m)
    print(f"k={k}: p(y1)={cand.policy.probs[0]:.4f}  certified {rep.certified_rate:.4f}")
