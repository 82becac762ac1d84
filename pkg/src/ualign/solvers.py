"""Equilibrium solvers for the NLHF game and the (k+1)-player alignment game.

Player utilities in the (k+1)-player game use strict preference,
``u(pi', pi^k) = P[pi' > pi^k] = <pi', g>`` with ``g[y] = P[y > pi^k]``.
Certificates use weak preference and are cross-checked against the strict
route through antisymmetry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy.optimize import linprog
from scipy.special import softmax

from . import engine
from .engine import EnumerationCapError, best_pure_opponent, worst_pure_opponent_weak
from .prefcore import MixtureOfProducts, Multiset, Policy, PreferenceModel, ProductPolicy, winrate_matrix

ALGORITHMS = ("mwu", "projected-gradient", "lp-nlhf")
PGA_DEFAULT_ETA = 0.1


@dataclass(frozen=True)
class SolverConfig:
    algorithm: str = "mwu"
    iterations: int = 1000
    eta: Union[float, str] = "auto"
    seed: int = 0
    tol: float = 1e-9
    init: str = "uniform"

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.eta != "auto" and not (isinstance(self.eta, (int, float)) and self.eta > 0):
            raise ValueError(f"eta must be positive or 'auto', got {self.eta!r}")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.init not in ("uniform", "random"):
            raise ValueError("init must be 'uniform' or 'random'")

    def initial_policy(self, n: int) -> np.ndarray:
        if self.init == "uniform":
            return np.full(n, 1.0 / n)
        return np.random.default_rng(self.seed).dirichlet(np.ones(n))


class GradientOracle:
    """Evaluates ``g[y] = P[y > pi^k]`` for many ``pi`` against one model.

    The strict win-rate table between single responses and all size-``k``
    multisets is built once; each gradient is then a matrix-vector product.
    """

    def __init__(self, model: PreferenceModel, k: int, cap: int | None = None):
        n = model.n
        engine._check_cap(n * engine.n_multisets(n, k), cap)
        self.model = model
        self.k = k
        self.table = winrate_matrix(model, np.eye(n, dtype=np.int64), engine.enumerate_multisets(n, k), "strict")

    def __call__(self, probs: np.ndarray) -> np.ndarray:
        return np.clip(self.table @ engine.multiset_pmf(probs, self.k), 0.0, 1.0)


def utility_gradient(pi: Policy, k: int, model: PreferenceModel, cap: int | None = None) -> np.ndarray:
    """Gradient of player one's utility against ``pi^k``; the utility is linear so ``u(pi') = <pi', g>``."""
    return GradientOracle(model, k, cap)(pi.probs)


def simplex_project(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort and threshold)."""
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot project a vector with non-finite entries")
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, v.size + 1)
    rho = np.flatnonzero(u - css / ind > 0)[-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(v - theta, 0.0)


def _pga_map(probs: np.ndarray, grad: np.ndarray, eta: float) -> np.ndarray:
    return simplex_project(probs + eta * grad)


def pga_step(pi: Policy, k: int, model: PreferenceModel, eta: float = PGA_DEFAULT_ETA,
             oracle: GradientOracle | None = None) -> Policy:
    """One application of ``F(pi) = proj(pi + eta * g(pi))``."""
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    if eta == 0:
        return pi
    oracle = oracle or GradientOracle(model, k)
    return Policy(_pga_map(pi.probs, oracle(pi.probs), eta))


def fixed_point_residual(pi: Policy, k: int, model: PreferenceModel, eta: float = PGA_DEFAULT_ETA,
                         oracle: GradientOracle | None = None) -> float:
    oracle = oracle or GradientOracle(model, k)
    return float(np.linalg.norm(_pga_map(pi.probs, oracle(pi.probs), eta) - pi.probs))


def best_response_gap(pi: Policy, k: int, model: PreferenceModel, oracle: GradientOracle | None = None) -> float:
    """``max_y g[y] - <pi, g>``: zero exactly at a symmetric equilibrium."""
    oracle = oracle or GradientOracle(model, k)
    g = oracle(pi.probs)
    return float(g.max() - math.fsum(pi.probs * g))


@dataclass
class SelfPlayTrace:
    """Shared iterates of symmetric self-play and the gradients they faced."""

    k: int
    algorithm: str
    eta: float
    iterates: np.ndarray
    gradients: np.ndarray
    raw_regret: float = field(init=False)
    regret: float = field(init=False)

    def __post_init__(self):
        cum = self.gradients.sum(axis=0)
        played = math.fsum(np.einsum("ty,ty->t", self.iterates, self.gradients))
        self.raw_regret = float(cum.max() - played)
        self.regret = max(0.0, self.raw_regret)

    @property
    def T(self) -> int:
        return self.iterates.shape[0]

    @property
    def regret_per_round(self) -> float:
        return self.regret / self.T

    @property
    def last(self) -> Policy:
        return Policy(self.iterates[-1])

    @property
    def mixture(self) -> MixtureOfProducts:
        return MixtureOfProducts.uniform(self.iterates, self.k)

    @property
    def average_policy(self) -> Policy:
        return Policy(self.iterates.mean(axis=0))


def _degenerate_trace(model, k, config, algorithm, eta):
    it = np.ones((config.iterations, 1))
    return SelfPlayTrace(k, algorithm, eta, it, np.zeros_like(it))


def mwu_selfplay(model: PreferenceModel, k: int, config: SolverConfig = SolverConfig()) -> SelfPlayTrace:
    """Symmetric self-play with multiplicative weights on exact gradients.

    ``pi_{t+1}(y)`` is proportional to ``pi_t(y) * exp(eta * g_t[y])``; the
    ``"auto"`` step is ``sqrt(8 ln|Y| / T)``.
    """
    n, T = model.n, config.iterations
    eta = math.sqrt(8.0 * math.log(n) / T) if config.eta == "auto" else float(config.eta)
    if n == 1:
        return _degenerate_trace(model, k, config, "mwu", eta)
    oracle = GradientOracle(model, k)
    iterates = np.empty((T, n))
    grads = np.empty((T, n))
    logits = np.log(config.initial_policy(n))
    for t in range(T):
        p = softmax(logits)
        g = oracle(p)
        iterates[t], grads[t] = p, g
        logits = logits + eta * g
        logits -= logits.max()
    return SelfPlayTrace(k, "mwu", eta, iterates, grads)


def pga_selfplay(model: PreferenceModel, k: int, config: SolverConfig = SolverConfig(algorithm="projected-gradient")
                 ) -> SelfPlayTrace:
    """Symmetric self-play by projected gradient ascent (``eta`` defaults to 0.1)."""
    n, T = model.n, config.iterations
    eta = PGA_DEFAULT_ETA if config.eta == "auto" else float(config.eta)
    if n == 1:
        return _degenerate_trace(model, k, config, "projected-gradient", eta)
    oracle = GradientOracle(model, k)
    iterates = np.empty((T, n))
    grads = np.empty((T, n))
    p = config.initial_policy(n)
    for t in range(T):
        g = oracle(p)
        iterates[t], grads[t] = p, g
        p = _pga_map(p, g, eta)
    return SelfPlayTrace(k, "projected-gradient", eta, iterates, grads)


def selfplay(model: PreferenceModel, k: int, config: SolverConfig) -> SelfPlayTrace:
    if config.algorithm == "mwu":
        return mwu_selfplay(model, k, config)
    if config.algorithm == "projected-gradient":
        return pga_selfplay(model, k, config)
    raise ValueError(f"{config.algorithm!r} is not a self-play algorithm")


@dataclass(frozen=True)
class EquilibriumCandidate:
    policy: Policy
    residual: float
    gap: float
    iterations: int
    converged: bool


def find_fixed_point(model: PreferenceModel, k: int, config: SolverConfig = SolverConfig(algorithm="projected-gradient"),
                     max_iterations: int | None = None) -> EquilibriumCandidate:
    """Iterate the projected-gradient map until ``||F(pi) - pi|| <= tol``.

    Convergence is not guaranteed in general; the last point is returned
    either way with ``converged`` set accordingly.
    """
    n = model.n
    if n == 1:
        return EquilibriumCandidate(Policy.point(1, 0), 0.0, 0.0, 0, True)
    eta = PGA_DEFAULT_ETA if config.eta == "auto" else float(config.eta)
    oracle = GradientOracle(model, k)
    p = config.initial_policy(n)
    limit = max_iterations or config.iterations
    residual = math.inf
    it = 0
    for it in range(1, limit + 1):
        nxt = _pga_map(p, oracle(p), eta)
        residual = float(np.linalg.norm(nxt - p))
        p = nxt
        if residual <= config.tol:
            break
    pi = Policy(p)
    residual = fixed_point_residual(pi, k, model, eta, oracle)
    return EquilibriumCandidate(pi, residual, best_response_gap(pi, k, model, oracle), it, residual <= config.tol)


@dataclass(frozen=True)
class CertificationReport:
    k: int
    ell: int
    certified_rate: float
    weak_path_rate: float
    threshold: float
    witness: Multiset
    regret_slack: float
    tolerance: float
    passed: bool

    @property
    def bound(self) -> float:
        """Threshold after subtracting the regret slack."""
        return self.threshold - self.regret_slack


def rate_threshold(k: int, ell: int = 1) -> float:
    return max(0.0, (k + 1 - ell) / (k + 1))


Certifiable = Union[SelfPlayTrace, Policy, ProductPolicy, MixtureOfProducts]


def certify(obj: Certifiable, k: int, ell: int, model: PreferenceModel, tol: float = 1e-9,
            cap: int | None = None) -> CertificationReport:
    """Exact worst-case weak win rate of a k-output policy against size-``ell`` opponents.

    A trace certifies its uniform mixture of product iterates and lowers the
    threshold by ``Reg^T / T``; a single policy is certified as ``pi^k``.
    """
    slack = 0.0
    if isinstance(obj, SelfPlayTrace):
        if obj.k != k:
            raise ValueError(f"trace was built for k={obj.k}, asked to certify k={k}")
        sigma = obj.mixture
        slack = obj.regret_per_round
    elif isinstance(obj, Policy):
        sigma = ProductPolicy(obj, k)
    elif isinstance(obj, (ProductPolicy, MixtureOfProducts)):
        if obj.k != k:
            raise ValueError(f"policy outputs {obj.k} responses, asked to certify k={k}")
        sigma = obj
    else:
        raise TypeError(f"cannot certify {type(obj).__name__}")
    if sigma.n != model.n:
        raise ValueError("policy and model disagree on the number of responses")
    witness, strict_best = best_pure_opponent(sigma, ell, model, cap)
    _, weak_worst = worst_pure_opponent_weak(sigma, ell, model, cap)
    rate = 1.0 - strict_best
    threshold = rate_threshold(k, ell)
    return CertificationReport(
        k=k, ell=ell, certified_rate=rate, weak_path_rate=weak_worst, threshold=threshold,
        witness=witness, regret_slack=slack, tolerance=tol,
        passed=rate >= threshold - slack - tol,
    )


def nlhf_payoff(model: PreferenceModel) -> np.ndarray:
    """Symmetric constant-sum payoff ``M[y, y'] = (P[y >= y'] + P[y > y']) / 2``.

    Off the diagonal this is the weak win rate; self-ties are split so that
    ``M + M.T = 1``.
    """
    eye = np.eye(model.n, dtype=np.int64)
    return 0.5 * (winrate_matrix(model, eye, eye, "weak") + winrate_matrix(model, eye, eye, "strict"))


def nlhf_solve(model: PreferenceModel, config: SolverConfig | None = None) -> Policy:
    """Maximal-lottery policy of the two-player NLHF game.

    Solved as a linear program by default.  With ``algorithm="mwu"`` or
    ``"projected-gradient"`` the k=1 self-play average is returned instead.
    """
    n = model.n
    if n == 1:
        return Policy.point(1, 0)
    config = config or SolverConfig(algorithm="lp-nlhf")
    if config.algorithm != "lp-nlhf":
        return selfplay(model, 1, config).average_policy
    M = nlhf_payoff(model)
    # variables (pi, v): maximise v subject to pi^T M[:, j] >= v for every column j
    c = np.zeros(n + 1)
    c[-1] = -1.0
    a_ub = np.hstack([-M.T, np.ones((n, 1))])
    a_eq = np.hstack([np.ones((1, n)), np.zeros((1, 1))])
    res = linprog(c, A_ub=a_ub, b_ub=np.zeros(n), A_eq=a_eq, b_eq=[1.0],
                  bounds=[(0, None)] * n + [(None, None)], method="highs")
    if res.status != 0:
        raise RuntimeError(f"NLHF linear program failed: {res.message}")
    p = np.maximum(res.x[:n], 0.0)
    value = float(res.x[-1])
    if value < 0.5 - 1e-7:
        raise RuntimeError(f"NLHF linear program returned value {value:.3e} below 1/2")
    return Policy(p / p.sum())


def rlhf_solve(reward, pi_ref: Policy, eta_kl: float) -> Policy:
    """KL-regularised reward maximiser ``pi(y) ~ pi_ref(y) exp(reward[y] / eta_kl)``."""
    reward = np.asarray(reward, dtype=float)
    if eta_kl <= 0:
        raise ValueError("eta_kl must be positive")
    if np.any(pi_ref.probs <= 0):
        raise ValueError("reference policy must have full support")
    if reward.shape != pi_ref.probs.shape:
        raise ValueError("reward and reference policy sizes differ")
    return Policy(softmax(np.log(pi_ref.probs) + reward / eta_kl))


__all__ = [
    "ALGORITHMS", "CertificationReport", "EnumerationCapError", "EquilibriumCandidate", "GradientOracle",
    "SelfPlayTrace", "SolverConfig", "best_response_gap", "certify", "find_fixed_point", "fixed_point_residual",
    "mwu_selfplay", "nlhf_payoff", "nlhf_solve", "pga_selfplay", "pga_step", "rate_threshold", "rlhf_solve",
    "selfplay", "simplex_project", "utility_gradient",
]
