"""Comparing sets of responses under two kinds of population preference."""
import numpy as np

from ualign import Multiset, PreferenceModel, condorcet_cycle_instance, model_winrate

# A Plackett-Luce population: each user picks a response with probability
# proportional to exp(reward). Two components with opposite tastes.
pl = PreferenceModel.pl([0.7, 0.3], [[2.0, 0.0, -1.0], [-1.0, 0.5, 1.5]], labels=["terse", "plain", "verbose"])

# A set wins if the user's pick lands in it, so more copies help.
for s in ([0], [0, 0], [0, 2]):
    rate = model_winrate(Multiset.from_ids(s), Multiset.of(1), pl)
    print(f"{[pl.label(y) for y in s]!s:28} vs ['plain']: {rate:.4f}")

# Ranking populations compare sets by their best element. A shared best
# element is a tie: it counts for the weak rate and not the strict one.
cyc = condorcet_cycle_instance()
s, t = Multiset.of(0, 1), Multiset.of(0, 2)
print("weak  ", model_winrate(s, t, cyc, "weak"))
print("strict", model_winrate(s, t, cyc, "strict"))

# Pairwise majorities chase each other round the cycle.
mat = np.array([[model_winrate(Multiset.of(i), Multiset.of(j), cyc, "strict") for j in range(3)] for i in range(3)])
print(np.round(mat, 3))
