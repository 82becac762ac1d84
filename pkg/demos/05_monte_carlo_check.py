"""Exact enumeration against sampling, and the cost of enumeration."""
import numpy as np

from ualign import Policy, ProductPolicy, uniform_rankings_instance
from ualign.engine import WinrateQuery, exact_winrate, mc_winrate, n_multisets, ranking_pure_closed_form
from ualign.prefcore import Multiset

m = uniform_rankings_instance(5)
base = Policy(np.array([0.4, 0.25, 0.15, 0.1, 0.1]))

q = WinrateQuery(ProductPolicy(base, 3), Multiset.of(4), m)
print("enumeration ", exact_winrate(q).value)
print("closed form ", ranking_pure_closed_form(base, 3, 4, m).value)
for n in (10**3, 10**4, 10**5):
    est = mc_winrate(q, n, seed=1)
    print(f"monte carlo  {est.value:.5f} +- {est.stderr:.5f}  (n={n})")

# Enumeration grows like C(|Y| + k - 1, k); past the cap, sampling is the only route.
for k in (2, 4, 8, 16):
    print(f"k={k:>2}: {n_multisets(m.n, k):>8} multisets of size k")
