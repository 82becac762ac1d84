"""End-to-end acceptance checks, one test per criterion.

Run with ``pytest tests/test_acceptance.py -s`` to see the verdict lines as
they happen; they are also repeated in the terminal summary.
"""

import math
import time

import numpy as np

from oracles import majority_mpne
from ualign.engine import WinrateQuery, exact_winrate, mc_winrate, ranking_pure_closed_form, worst_pure_opponent_weak
from ualign.instances import condorcet_cycle_instance, majority_instance, uniform_pl_instance, uniform_rankings_instance
from ualign.prefcore import MixtureOfProducts, Multiset, Policy, PreferenceModel, ProductPolicy, check_properties
from ualign.solvers import SolverConfig, certify, find_fixed_point, mwu_selfplay, nlhf_solve


def _tv(p, q):
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def test_nlhf_rate_is_flat_in_k(verdict):
    t0 = time.perf_counter()
    m = majority_instance(0.1)
    pi = nlhf_solve(m)
    rates = {k: certify(pi, k, 1, m).certified_rate for k in (1, 2, 4, 8)}
    elapsed = time.perf_counter() - t0
    ok = all(abs(r - 0.6) <= 1e-12 for r in rates.values()) and elapsed < 1.0
    verdict(1, "NLHF certified rate is 0.6 for k in {1,2,4,8}", ok,
            f"rates={[round(r, 15) for r in rates.values()]}, {elapsed:.3f}s")


def test_mwu_mixture_certifies(verdict):
    T = 10_000
    worst_margin, worst_regret_ratio, slowest = math.inf, 0.0, 0.0
    for m in (majority_instance(0.1), condorcet_cycle_instance()):
        t0 = time.perf_counter()
        for k in (1, 2, 3):
            trace = mwu_selfplay(m, k, SolverConfig(iterations=T))
            rep = certify(trace, k, 1, m)
            worst_margin = min(worst_margin, rep.certified_rate - (k / (k + 1) - trace.regret_per_round - 1e-9))
            worst_regret_ratio = max(worst_regret_ratio, trace.regret_per_round / (2 * math.sqrt(math.log(m.n) / T)))
        slowest = max(slowest, time.perf_counter() - t0)
    ok = worst_margin >= 0 and worst_regret_ratio <= 1.0 and slowest < 30.0
    verdict(2, "MWU mixture at T=1e4 certifies k/(k+1) - Reg/T with Reg/T <= 2 sqrt(ln|Y|/T)", ok,
            f"min margin={worst_margin:.3g}, max Reg/T over bound={worst_regret_ratio:.3f}, slowest={slowest:.2f}s")


def test_uniform_pl_rate_is_tight(verdict):
    rng = np.random.default_rng(20)
    worst = 0.0
    for k in (1, 2, 3):
        m = uniform_pl_instance(k)
        bases = [Policy.uniform(m.n)] + [Policy(rng.dirichlet(np.ones(m.n))) for _ in range(20)]
        for base in bases:
            _, v = worst_pure_opponent_weak(ProductPolicy(base, k), 1, m)
            worst = max(worst, abs(v - k / (k + 1)))
    verdict(3, "uniform-pl min weak rate equals k/(k+1) for uniform and 20 random policies", worst <= 1e-12,
            f"max deviation={worst:.2e}")


def test_uniform_rankings_bound(verdict):
    rng = np.random.default_rng(50)
    m = uniform_rankings_instance(4)
    worst_excess = -math.inf
    for k in (1, 2):
        for _ in range(50):
            base = Policy(rng.dirichlet(np.ones(4)))
            _, v = worst_pure_opponent_weak(ProductPolicy(base, k), 1, m)
            worst_excess = max(worst_excess, v - k / (k + 1) * (1 + 1 / 4))
    verdict(4, "uniform-rankings m=4 min weak rate <= k/(k+1)(1+1/m)", worst_excess <= 1e-12,
            f"max excess over bound={worst_excess:.4f}")


def test_cycle_k4_large_opponents(verdict):
    m = condorcet_cycle_instance()
    trace = mwu_selfplay(m, 4, SolverConfig(iterations=10_000))
    margins = {}
    for ell in (1, 2, 3):
        rep = certify(trace, 4, ell, m)
        margins[ell] = rep.certified_rate - ((5 - ell) / 5 - trace.regret_per_round)
    ok = min(margins.values()) >= 0
    verdict(5, "cycle k=4 candidate certifies (5-l)/5 - Reg/T for l in {1,2,3}", ok,
            "margins=" + ", ".join(f"l={e}: {v:.4f}" for e, v in margins.items()))


def _random_pl(rng):
    n = int(rng.integers(2, 6))
    c = int(rng.integers(1, 4))
    return PreferenceModel.pl(rng.dirichlet(np.ones(c)), rng.normal(0.0, 2.0, (c, n)))


def _random_rankings(rng):
    n = int(rng.integers(2, 6))
    c = int(rng.integers(1, 5))
    return PreferenceModel.rankings(rng.dirichlet(np.ones(c)), [rng.permutation(n) for _ in range(c)])


def test_property_suite(verdict):
    failures, checks = 0, 0
    for family_seed, make in enumerate((_random_pl, _random_rankings)):
        rng = np.random.default_rng(family_seed)
        for case in range(200):
            rep = check_properties(make(rng), trials=1, seed=case, max_k=4)
            failures += len(rep.failures)
            checks += rep.checks
    ok = failures == 0 and checks == 2 * 200 * 3
    verdict(6, "200 random cases per model family satisfy all three properties", ok,
            f"{checks} checks, {failures} failures")


def _mc_queries():
    """30 queries mixing model kinds, policy shapes and modes, all small enough to enumerate."""
    rng = np.random.default_rng(7)
    out = []
    for i in range(30):
        m = _random_pl(rng) if i % 2 else _random_rankings(rng)
        n = m.n
        k, ell = int(rng.integers(1, 4)), int(rng.integers(1, 3))
        if i % 3 == 0:
            comps = [(w, ProductPolicy(Policy(rng.dirichlet(np.ones(n))), k)) for w in rng.dirichlet(np.ones(3))]
            lhs = MixtureOfProducts.from_components(comps)
        else:
            lhs = ProductPolicy(Policy(rng.dirichlet(np.ones(n))), k)
        rhs = (Multiset.from_ids(rng.integers(0, n, ell)) if i % 4 == 0
               else ProductPolicy(Policy(rng.dirichlet(np.ones(n))), ell))
        out.append(WinrateQuery(lhs, rhs, m, "strict" if i % 5 == 0 else "weak"))
    return out


def test_oracle_equivalence(verdict):
    rng = np.random.default_rng(6)
    worst = 0.0
    for n in range(1, 7):
        orders = [tuple(rng.permutation(n)) for _ in range(5)]
        m = PreferenceModel.rankings(rng.dirichlet(np.ones(5)), orders)
        for _ in range(4):
            base = Policy(rng.dirichlet(np.full(n, 0.7)))
            for k in range(1, 5):
                for y in range(n):
                    a = exact_winrate(WinrateQuery(ProductPolicy(base, k), Multiset.of(y), m)).value
                    b = ranking_pure_closed_form(base, k, y, m).value
                    worst = max(worst, abs(a - b))

    within = 0
    for seed, q in enumerate(_mc_queries()):
        exact = exact_winrate(q).value
        est = mc_winrate(q, 10**6, seed=seed)
        within += abs(est.value - exact) <= 5 * est.stderr
    ok = worst <= 1e-12 and within >= 29
    verdict(7, "closed form matches enumeration on |Y|<=6, k<=4; Monte Carlo within 5 SE", ok,
            f"max |closed - enum|={worst:.2e}, MC within 5 SE: {within}/30")


def test_equilibrium_oracles(verdict):
    point = nlhf_solve(majority_instance(0.1)).probs
    uniform = nlhf_solve(condorcet_cycle_instance()).probs
    tv_point = _tv(point, [1.0, 0.0])
    tv_uniform = _tv(uniform, np.full(3, 1 / 3))
    p_star = majority_mpne(0.1, 2)
    cand = find_fixed_point(majority_instance(0.1), 2, SolverConfig(algorithm="projected-gradient", iterations=50_000,
                                                                     tol=1e-12))
    tv_mpne = _tv(cand.policy.probs, [p_star, 1 - p_star])
    ok = tv_point <= 1e-6 and tv_uniform <= 1e-6 and tv_mpne <= 1e-2
    verdict(8, "NLHF point mass / uniform, MPNE on majority k=2 matches the bisection root", ok,
            f"TV: {tv_point:.1e}, {tv_uniform:.1e}, MPNE {tv_mpne:.1e} (p*={p_star:.6f})")
