"""Population win rates of product policies and their mixtures.

Three backends cross-check each other:

* exact enumeration over size-k multisets weighted by multinomial pmfs,
* a closed form for ranking populations against a single response,
* seeded Monte Carlo.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations_with_replacement
from typing import Union

import numpy as np
from scipy.special import expit, logsumexp

from .prefcore import (
    PL,
    RANKING,
    MixtureOfProducts,
    Multiset,
    Policy,
    PreferenceModel,
    ProductPolicy,
    _check_mode,
    winrate_matrix,
)

DEFAULT_CAP = 10**7
CAP_ENV = "UALIGN_CAP"

EXACT_BACKENDS = ("enumeration", "closed-form")

Lhs = Union[ProductPolicy, MixtureOfProducts]
Rhs = Union[Multiset, ProductPolicy]


class EnumerationCapError(ValueError):
    """Raised when exact enumeration would exceed the configured term budget."""

    def __init__(self, terms: int, cap: int):
        super().__init__(f"exact enumeration needs {terms} terms, above the cap of {cap}")
        self.terms = terms
        self.cap = cap


def default_cap() -> int:
    raw = os.environ.get(CAP_ENV)
    return int(raw) if raw else DEFAULT_CAP


def n_multisets(n: int, k: int) -> int:
    return math.comb(n + k - 1, k)


@lru_cache(maxsize=64)
def _enumeration(n: int, k: int) -> tuple[np.ndarray, np.ndarray]:
    rows = []
    for combo in combinations_with_replacement(range(n), k):
        v = [0] * n
        for y in combo:
            v[y] += 1
        rows.append(v)
    counts = np.array(rows, dtype=np.int64).reshape(-1, n)
    fk = math.factorial(k)
    coef = np.array([fk // math.prod(math.factorial(c) for c in row) for row in rows], dtype=float)
    counts.setflags(write=False)
    coef.setflags(write=False)
    return counts, coef


def enumerate_multisets(n: int, k: int) -> np.ndarray:
    """All size-``k`` multisets over ``n`` responses as a ``(N, n)`` count matrix."""
    return _enumeration(n, k)[0]


def multiset_pmf(bases: np.ndarray, k: int) -> np.ndarray:
    """Multinomial probability of every size-``k`` multiset under each base policy.

    ``bases`` is ``(|Y|,)`` or ``(T, |Y|)``; the result is ``(N,)`` or ``(T, N)``.
    """
    bases = np.asarray(bases, dtype=float)
    counts, coef = _enumeration(bases.shape[-1], k)
    return coef * np.prod(bases[..., None, :] ** counts, axis=-1)


@dataclass(frozen=True)
class WinrateQuery:
    lhs: Lhs
    rhs: Rhs
    model: PreferenceModel
    mode: str = "weak"

    def __post_init__(self):
        _check_mode(self.mode)
        n = self.model.n
        if self.lhs.n != n:
            raise ValueError(f"lhs policy has {self.lhs.n} responses, model has {n}")
        if isinstance(self.rhs, Multiset):
            if self.rhs.support[-1] >= n:
                raise ValueError("rhs multiset refers to a response outside the model")
        elif self.rhs.n != n:
            raise ValueError(f"rhs policy has {self.rhs.n} responses, model has {n}")


@dataclass(frozen=True)
class Estimate:
    value: float
    stderr: float = 0.0
    n_samples: int = 0
    backend: str = "enumeration"

    @property
    def exact(self) -> bool:
        return self.backend in EXACT_BACKENDS


def _lhs_distribution(lhs: Lhs) -> tuple[np.ndarray, np.ndarray]:
    """Support multisets and their probabilities for the left-hand player."""
    counts, _ = _enumeration(lhs.n, lhs.k)
    if isinstance(lhs, ProductPolicy):
        return counts, multiset_pmf(lhs.base.probs, lhs.k)
    return counts, mixture_pmf(lhs)


def mixture_pmf(sigma: MixtureOfProducts, chunk: int = 4096) -> np.ndarray:
    """Multiset pmf of a mixture, accumulated chunk-wise in a fixed order."""
    out = np.zeros(n_multisets(sigma.n, sigma.k))
    for lo in range(0, sigma.weights.size, chunk):
        out += sigma.weights[lo:lo + chunk] @ multiset_pmf(sigma.bases[lo:lo + chunk], sigma.k)
    return out


def _rhs_distribution(rhs: Rhs, n: int) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(rhs, Multiset):
        return rhs.count_vector(n)[None, :], np.ones(1)
    counts, _ = _enumeration(n, rhs.k)
    return counts, multiset_pmf(rhs.base.probs, rhs.k)


def _terms(q: WinrateQuery) -> int:
    n = q.model.n
    left = n_multisets(n, q.lhs.k)
    right = 1 if isinstance(q.rhs, Multiset) else n_multisets(n, q.rhs.k)
    return left * right


def _check_cap(terms: int, cap: int | None) -> None:
    cap = default_cap() if cap is None else cap
    if terms > cap:
        raise EnumerationCapError(terms, cap)


def exact_winrate(q: WinrateQuery, cap: int | None = None, row_block: int = 2048) -> Estimate:
    """Exact ``P[lhs >= rhs]`` (or ``>``) by enumerating support multisets."""
    _check_cap(_terms(q), cap)
    n = q.model.n
    ca, pa = _lhs_distribution(q.lhs)
    cb, pb = _rhs_distribution(q.rhs, n)
    live_a, live_b = pa > 0, pb > 0
    ca, pa, cb, pb = ca[live_a], pa[live_a], cb[live_b], pb[live_b]
    # per-block products via BLAS; the final reduction is exactly rounded
    parts = []
    for lo in range(0, ca.shape[0], row_block):
        w = winrate_matrix(q.model, ca[lo:lo + row_block], cb, q.mode)
        parts.append(pa[lo:lo + row_block] * (w @ pb))
    value = math.fsum(np.concatenate(parts))
    return Estimate(min(1.0, max(0.0, value)), 0.0, 0, "enumeration")


def ranking_pure_closed_form(base: Policy, k: int, y: int, model: PreferenceModel) -> Estimate:
    """Weak win rate of ``base^k`` against response ``y`` under a ranking population.

    Under ranking ``i`` the sample loses only if every draw sits strictly below
    ``y``; with ``q_i`` the mass below ``y`` the rate is ``sum_i w_i (1 - q_i^k)``.
    """
    if model.kind != RANKING:
        raise ValueError("closed form requires a ranking-population model")
    if k < 1:
        raise ValueError("k must be >= 1")
    pos = model.positions
    below = pos > pos[:, [y]]
    q = np.where(below, base.probs[None, :], 0.0).sum(axis=1)
    value = math.fsum(model.weights * (1.0 - q**k))
    return Estimate(min(1.0, max(0.0, value)), 0.0, 0, "closed-form")


def _sample_counts(rng: np.random.Generator, side, n_draws: int, n: int) -> np.ndarray:
    if isinstance(side, Multiset):
        return np.broadcast_to(side.count_vector(n), (n_draws, n))
    if isinstance(side, ProductPolicy):
        return rng.multinomial(side.k, side.base.probs, size=n_draws)
    idx = rng.choice(side.weights.size, size=n_draws, p=side.weights)
    return rng.multinomial(side.k, side.bases[idx])


def _trial_values(rng, q: WinrateQuery, m: int) -> np.ndarray:
    n = q.model.n
    a = _sample_counts(rng, q.lhs, m, n)
    b = _sample_counts(rng, q.rhs, m, n)
    comp = rng.choice(q.model.weights.size, size=m, p=q.model.weights)
    if q.model.kind == PL:
        r = q.model.rewards[comp]
        la = logsumexp(r, b=a.astype(float), axis=1)
        lb = logsumexp(r, b=b.astype(float), axis=1)
        # conditional PL probability given the draws; unbiased and lower variance than a coin flip
        return expit(la - lb)
    pos = q.model.positions[comp]
    top_a = np.where(a > 0, pos, n).min(axis=1)
    top_b = np.where(b > 0, pos, n).min(axis=1)
    hit = top_a <= top_b if q.mode == "weak" else top_a < top_b
    return hit.astype(float)


def mc_winrate(q: WinrateQuery, n: int, seed: int | None = 0, chunk: int = 1 << 16) -> Estimate:
    """Monte Carlo estimate with ``stderr = sqrt(var / n)``.

    Each chunk draws from its own substream spawned from ``seed``, so the
    result depends only on ``(q, n, seed, chunk)``.  When every draw agrees the
    sample variance is floored at ``1/n`` so the reported error never collapses
    to zero.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    n_chunks = -(-n // chunk)
    streams = np.random.SeedSequence(seed).spawn(n_chunks)
    total = 0.0
    total_sq = 0.0
    for i, ss in enumerate(streams):
        m = min(chunk, n - i * chunk)
        x = _trial_values(np.random.default_rng(ss), q, m)
        total += math.fsum(x)
        total_sq += math.fsum(x * x)
    mean = total / n
    var = (total_sq - n * mean * mean) / (n - 1) if n > 1 else 0.0
    var = max(var, 1.0 / n)
    return Estimate(mean, math.sqrt(var / n), n, "monte-carlo")


def _opponent_matrix(sigma: Lhs, ell: int, model: PreferenceModel, cap: int | None):
    n = model.n
    _check_cap(n_multisets(n, ell) * n_multisets(n, sigma.k), cap)
    opp, _ = _enumeration(n, ell)
    ca, pa = _lhs_distribution(sigma)
    live = pa > 0
    return opp, ca[live], pa[live]


def opponent_strict_rates(sigma: Lhs, ell: int, model: PreferenceModel, cap: int | None = None):
    """``P[S > sigma]`` for every size-``ell`` multiset ``S``; returns ``(counts, rates)``."""
    opp, ca, pa = _opponent_matrix(sigma, ell, model, cap)
    w = winrate_matrix(model, opp, ca, "strict")
    return opp, np.clip(w @ pa, 0.0, 1.0)


def opponent_weak_rates(sigma: Lhs, ell: int, model: PreferenceModel, cap: int | None = None):
    """``P[sigma >= S]`` for every size-``ell`` multiset ``S``; returns ``(counts, rates)``."""
    opp, ca, pa = _opponent_matrix(sigma, ell, model, cap)
    w = winrate_matrix(model, ca, opp, "weak")
    return opp, np.clip(pa @ w, 0.0, 1.0)


def _lex_pick(counts: np.ndarray, rates: np.ndarray, best: float, tie_tol: float) -> int:
    cand = np.flatnonzero(rates >= best - tie_tol)
    rows = [tuple(counts[i]) for i in cand]
    return int(cand[min(range(len(rows)), key=rows.__getitem__)])


def best_pure_opponent(sigma: Lhs, ell: int, model: PreferenceModel, cap: int | None = None,
                       tie_tol: float = 1e-12) -> tuple[Multiset, float]:
    """Size-``ell`` multiset with the highest strict win rate against ``sigma``.

    The opponent's win rate is linear in its own mixed strategy, so the
    maximum over all distributions on size-``ell`` multisets is attained by a
    pure multiset.  Ties (within ``tie_tol``) go to the lexicographically
    smallest count vector.
    """
    if ell < 1:
        raise ValueError("opponent size must be >= 1")
    opp, rates = opponent_strict_rates(sigma, ell, model, cap)
    best = float(rates.max())
    i = _lex_pick(opp, rates, best, tie_tol)
    return Multiset.from_counts(opp[i]), float(rates[i])


def worst_pure_opponent_weak(sigma: Lhs, ell: int, model: PreferenceModel, cap: int | None = None,
                             tie_tol: float = 1e-12) -> tuple[Multiset, float]:
    """Minimum weak win rate of ``sigma`` over size-``ell`` multisets, computed directly."""
    opp, rates = opponent_weak_rates(sigma, ell, model, cap)
    worst = float(rates.min())
    i = _lex_pick(opp, -rates, -worst, tie_tol)
    return Multiset.from_counts(opp[i]), float(rates[i])
