"""What a k-output policy guarantees against opponents that also sample several answers."""
from ualign import condorcet_cycle_instance, majority_instance
from ualign.solvers import SolverConfig, certify, find_fixed_point

k = 4
for m in (majority_instance(0.1), condorcet_cycle_instance()):
    cand = find_fixed_point(m, k, SolverConfig(algorithm="projected-gradient", iterations=20_000, tol=1e-12))
    print(m.labels or m.n, "policy", cand.policy.probs.round(4))
    # An opponent of size l is enumerated exhaustively; the certified rate
    # should stay above (k + 1 - l) / (k + 1).
    for ell in range(1, k + 2):
        rep = certify(cand.policy, k, ell, m)
        print(f"  l={ell}: certified {rep.certified_rate:.4f}  threshold {rep.threshold:.4f}  worst opponent {rep.witness}")
