"""No-regret self-play and the certificate it carries."""
import math

from ualign import condorcet_cycle_instance
from ualign.solvers import SolverConfig, certify, mwu_selfplay

m = condorcet_cycle_instance()
k = 3

# Every player runs the same multiplicative-weights update against the
# product of the others. The uniform mixture of iterates is certified up to
# the average regret.
for T in (100, 1000, 10_000):
    trace = mwu_selfplay(m, k, SolverConfig(iterations=T, init="random", seed=0))
    rep = certify(trace, k, 1, m)
    print(f"T={T:>6}  Reg/T={trace.regret_per_round:.4f} (<= {2 * math.sqrt(math.log(m.n) / T):.4f})"
          f"  bound={rep.bound:.4f}  certified={rep.certified_rate:.4f}")

print("final iterate:", trace.last.probs.round(4))
