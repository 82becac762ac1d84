"""Responses, multisets, policies and population preference models.

Two families of population preferences are supported:

* ``"pl"``: a weighted mixture of Plackett-Luce components.  A multiset ``S``
  beats ``S'`` under one component with probability
  ``sum_{y in S} exp(r[y]) / (sum_{y in S} exp(r[y]) + sum_{y in S'} exp(r[y]))``
  (multiplicities counted).  Weak and strict preference coincide.
* ``"ranking"``: a weighted population of total orders.  Multisets are compared
  through their most preferred elements; equal maximal elements tie, which
  counts as a weak win and a strict loss.

All objects are immutable after construction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit, logsumexp

WEIGHT_TOL = 1e-9
PROB_TOL = 1e-12

PL = "pl"
RANKING = "ranking"
MODES = ("weak", "strict")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def _normalize_weights(weights, what: str) -> np.ndarray:
    """Check a weight vector and rescale it exactly once.

    Weights must be nonnegative and sum to one within ``WEIGHT_TOL``; the
    tolerance absorbs text-serialization rounding.
    """
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size == 0:
        raise ValueError(f"{what} must be a nonempty 1-d vector")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError(f"{what} must be finite and nonnegative, got {w.tolist()}")
    total = math.fsum(w)
    if abs(total - 1.0) > WEIGHT_TOL:
        raise ValueError(f"{what} must sum to 1 (got {total!r})")
    if total != 1.0:
        w = w / total
    return w


@dataclass(frozen=True)
class Response:
    id: int
    label: str | None = None

    def __post_init__(self):
        if self.id < 0:
            raise ValueError(f"response id must be nonnegative, got {self.id}")


@dataclass(frozen=True)
class Multiset:
    """A finite multiset of response ids.

    Stored as a sorted tuple of ``(id, multiplicity)`` pairs so that equal
    multisets compare and hash equal.
    """

    items: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if not self.items:
            raise ValueError("multiset must be nonempty")
        prev = -1
        for y, c in self.items:
            if y <= prev:
                raise ValueError("multiset items must be sorted by id without repeats")
            if y < 0 or c < 1:
                raise ValueError(f"invalid multiset entry ({y}, {c})")
            prev = y

    @classmethod
    def of(cls, *ids: int) -> "Multiset":
        return cls.from_ids(ids)

    @classmethod
    def from_ids(cls, ids: Iterable[int]) -> "Multiset":
        counts: dict[int, int] = {}
        for y in ids:
            y = int(y)
            counts[y] = counts.get(y, 0) + 1
        return cls.from_counts(counts)

    @classmethod
    def from_counts(cls, counts: Mapping[int, int] | Sequence[int] | np.ndarray) -> "Multiset":
        if isinstance(counts, Mapping):
            pairs = [(int(y), int(c)) for y, c in counts.items() if c]
        else:
            pairs = [(y, int(c)) for y, c in enumerate(counts) if c]
        if any(c < 0 for _, c in pairs):
            raise ValueError("multiplicities must be nonnegative")
        return cls(tuple(sorted(pairs)))

    @property
    def size(self) -> int:
        return sum(c for _, c in self.items)

    @property
    def support(self) -> tuple[int, ...]:
        return tuple(y for y, _ in self.items)

    @property
    def counts(self) -> dict[int, int]:
        return dict(self.items)

    def count_vector(self, n: int) -> np.ndarray:
        if self.items[-1][0] >= n:
            raise ValueError(f"response id {self.items[-1][0]} outside universe of size {n}")
        v = np.zeros(n, dtype=np.int64)
        for y, c in self.items:
            v[y] = c
        return v

    def __add__(self, other: "Multiset") -> "Multiset":
        merged = self.counts
        for y, c in other.items:
            merged[y] = merged.get(y, 0) + c
        return Multiset.from_counts(merged)

    def __iter__(self):
        for y, c in self.items:
            for _ in range(c):
                yield y

    def __len__(self) -> int:
        return self.size

    def __repr__(self) -> str:
        return "Multiset{" + ", ".join(map(str, self)) + "}"


@dataclass(frozen=True, eq=False)
class Policy:
    """A probability vector over the response universe."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("policy must be a nonempty 1-d vector")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise ValueError(f"policy entries must be finite and nonnegative, got {p.tolist()}")
        total = math.fsum(p)
        if abs(total - 1.0) > WEIGHT_TOL:
            raise ValueError(f"policy must sum to 1 (got {total!r})")
        if total != 1.0:
            p = p / total
        object.__setattr__(self, "probs", _frozen(p))

    @classmethod
    def uniform(cls, n: int) -> "Policy":
        return cls(np.full(n, 1.0 / n))

    @classmethod
    def point(cls, n: int, y: int) -> "Policy":
        p = np.zeros(n)
        p[y] = 1.0
        return cls(p)

    @property
    def n(self) -> int:
        return self.probs.size

    def __eq__(self, other):
        return isinstance(other, Policy) and np.array_equal(self.probs, other.probs)

    def __hash__(self):
        return hash(self.probs.tobytes())


@dataclass(frozen=True)
class ProductPolicy:
    """``k`` i.i.d. draws from ``base``."""

    base: Policy
    k: int

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")

    @property
    def n(self) -> int:
        return self.base.n


@dataclass(frozen=True, eq=False)
class MixtureOfProducts:
    """Pick base policy ``t`` with probability ``weights[t]``, then draw ``k`` samples.

    Bases are held as a ``(T, |Y|)`` array so that mixtures over thousands of
    self-play iterates stay cheap.
    """

    weights: np.ndarray
    bases: np.ndarray
    k: int

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        w = _normalize_weights(self.weights, "mixture weights")
        b = np.asarray(self.bases, dtype=float)
        if b.ndim != 2 or b.shape[0] != w.size:
            raise ValueError("bases must have shape (len(weights), |Y|)")
        if np.any(b < 0) or np.any(np.abs(b.sum(axis=1) - 1.0) > WEIGHT_TOL):
            raise ValueError("every base must be a probability vector")
        object.__setattr__(self, "weights", _frozen(w))
        object.__setattr__(self, "bases", _frozen(b))

    @classmethod
    def from_components(cls, components: Sequence[tuple[float, ProductPolicy]]) -> "MixtureOfProducts":
        ks = {pp.k for _, pp in components}
        if len(ks) != 1:
            raise ValueError(f"all components must share the same k, got {sorted(ks)}")
        return cls(
            np.array([w for w, _ in components]),
            np.stack([pp.base.probs for _, pp in components]),
            ks.pop(),
        )

    @classmethod
    def uniform(cls, bases: np.ndarray, k: int) -> "MixtureOfProducts":
        bases = np.asarray(bases, dtype=float)
        return cls(np.full(bases.shape[0], 1.0 / bases.shape[0]), bases, k)

    @property
    def n(self) -> int:
        return self.bases.shape[1]

    @property
    def components(self) -> list[tuple[float, ProductPolicy]]:
        return [(float(w), ProductPolicy(Policy(b), self.k)) for w, b in zip(self.weights, self.bases)]


@dataclass(frozen=True, eq=False)
class PLComponent:
    rewards: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rewards, dtype=float)
        if r.ndim != 1 or not np.all(np.isfinite(r)):
            raise ValueError("rewards must be a finite 1-d vector")
        object.__setattr__(self, "rewards", _frozen(r))

    @property
    def n(self) -> int:
        return self.rewards.size

    def log_mass(self, counts: np.ndarray) -> np.ndarray:
        """``log sum_y counts[..., y] * exp(rewards[y])``, computed with max-shifting."""
        counts = np.asarray(counts, dtype=float)
        return logsumexp(np.broadcast_to(self.rewards, counts.shape), b=counts, axis=-1)


@dataclass(frozen=True, eq=False)
class RankingComponent:
    """A total order; ``order[0]`` is the most preferred response."""

    order: tuple[int, ...]
    positions: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        order = tuple(int(y) for y in self.order)
        if sorted(order) != list(range(len(order))):
            raise ValueError(f"order must be a permutation of 0..{len(order) - 1}, got {order}")
        pos = np.empty(len(order), dtype=np.int64)
        pos[list(order)] = np.arange(len(order))
        object.__setattr__(self, "order", order)
        object.__setattr__(self, "positions", _frozen(pos))

    @property
    def n(self) -> int:
        return len(self.order)

    def top(self, s: Multiset) -> int:
        return min(s.support, key=lambda y: self.positions[y])


@dataclass(frozen=True, eq=False)
class PreferenceModel:
    """A population preference: weighted PL components or weighted rankings."""

    kind: str
    weights: np.ndarray
    components: tuple
    labels: tuple[str, ...] | None = None
    prompt: str | None = None

    def __post_init__(self):
        if self.kind not in (PL, RANKING):
            raise ValueError(f"kind must be 'pl' or 'ranking', got {self.kind!r}")
        comps = tuple(self.components)
        expected = PLComponent if self.kind == PL else RankingComponent
        if not comps or not all(isinstance(c, expected) for c in comps):
            raise ValueError(f"all components of a {self.kind!r} model must be {expected.__name__}")
        sizes = {c.n for c in comps}
        if len(sizes) != 1:
            raise ValueError("components disagree on the number of responses")
        w = _normalize_weights(self.weights, "component weights")
        if w.size != len(comps):
            raise ValueError("one weight per component is required")
        n = sizes.pop()
        if self.labels is not None:
            labels = tuple(str(s) for s in self.labels)
            if len(labels) != n or len(set(labels)) != n:
                raise ValueError("labels must be unique, one per response")
            object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "weights", _frozen(w))
        if self.kind == PL:
            table = np.stack([c.rewards for c in comps])
        else:
            table = np.stack([c.positions for c in comps])
        object.__setattr__(self, "_table", _frozen(table))

    @classmethod
    def pl(cls, weights, rewards, labels=None, prompt=None) -> "PreferenceModel":
        return cls(PL, np.asarray(weights, float), tuple(PLComponent(r) for r in rewards), labels, prompt)

    @classmethod
    def rankings(cls, weights, orders, labels=None, prompt=None) -> "PreferenceModel":
        return cls(RANKING, np.asarray(weights, float), tuple(RankingComponent(o) for o in orders), labels, prompt)

    @property
    def n(self) -> int:
        return self.components[0].n

    @property
    def rewards(self) -> np.ndarray:
        """``(C, |Y|)`` reward table (PL models only)."""
        if self.kind != PL:
            raise ValueError("rewards are only defined for PL models")
        return self._table

    @property
    def positions(self) -> np.ndarray:
        """``(C, |Y|)`` table of each response's rank, 0 = best (ranking models only)."""
        if self.kind != RANKING:
            raise ValueError("positions are only defined for ranking models")
        return self._table

    def label(self, y: int) -> str:
        return self.labels[y] if self.labels else f"y{y}"

    def relabel(self, perm: Sequence[int]) -> "PreferenceModel":
        """Model under the renaming ``y -> perm[y]``."""
        perm = np.asarray(perm)
        inv = np.argsort(perm)
        labels = tuple(self.labels[i] for i in inv) if self.labels else None
        if self.kind == PL:
            return PreferenceModel.pl(self.weights, [c.rewards[inv] for c in self.components], labels, self.prompt)
        return PreferenceModel.rankings(
            self.weights, [[int(perm[y]) for y in c.order] for c in self.components], labels, self.prompt
        )


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ValueError(f"mode must be 'weak' or 'strict', got {mode!r}")


def pl_winrate(s: Multiset, s_prime: Multiset, c: PLComponent) -> float:
    """Probability that ``s`` is preferred to ``s_prime`` under one PL component."""
    n = c.n
    la = c.log_mass(s.count_vector(n))
    lb = c.log_mass(s_prime.count_vector(n))
    return float(expit(la - lb))


def ranking_compare(s: Multiset, s_prime: Multiset, c: RankingComponent) -> tuple[int, int]:
    """Return ``(weak, strict)`` indicators of ``s`` over ``s_prime`` under one ranking."""
    a = c.positions[c.top(s)]
    b = c.positions[c.top(s_prime)]
    return int(a <= b), int(a < b)


def model_winrate(s: Multiset, s_prime: Multiset, m: PreferenceModel, mode: str = "weak") -> float:
    _check_mode(mode)
    if m.kind == PL:
        vals = [pl_winrate(s, s_prime, c) for c in m.components]
    else:
        idx = 0 if mode == "weak" else 1
        vals = [ranking_compare(s, s_prime, c)[idx] for c in m.components]
    return math.fsum(w * v for w, v in zip(m.weights, vals))


def winrate_matrix(
    m: PreferenceModel, lhs_counts: np.ndarray, rhs_counts: np.ndarray, mode: str = "weak",
    block: int = 1 << 22,
) -> np.ndarray:
    """Population win rates of every row multiset of ``lhs_counts`` over every row of ``rhs_counts``.

    Args:
        m: preference model.
        lhs_counts: ``(A, |Y|)`` multiplicity matrix.
        rhs_counts: ``(B, |Y|)`` multiplicity matrix.
        mode: ``"weak"`` or ``"strict"``; ignored for PL models.
        block: cap on the number of ``(component, a, b)`` cells materialised at once.

    Returns:
        ``(A, B)`` array.
    """
    _check_mode(mode)
    lhs = np.atleast_2d(np.asarray(lhs_counts))
    rhs = np.atleast_2d(np.asarray(rhs_counts))
    if np.any(lhs.sum(axis=1) == 0) or np.any(rhs.sum(axis=1) == 0):
        raise ValueError("multisets must be nonempty")
    na, nb = lhs.shape[0], rhs.shape[0]
    out = np.zeros((na, nb))
    step = max(1, block // max(1, na * nb))
    if m.kind == PL:
        for lo in range(0, len(m.components), step):
            r = m.rewards[lo:lo + step]
            la = logsumexp(r[:, None, :], b=lhs[None, :, :].astype(float), axis=-1)
            lb = logsumexp(r[:, None, :], b=rhs[None, :, :].astype(float), axis=-1)
            p = expit(la[:, :, None] - lb[:, None, :])
            out += np.tensordot(m.weights[lo:lo + step], p, axes=1)
        return out
    top_a = _top_positions(m.positions, lhs)
    top_b = _top_positions(m.positions, rhs)
    cmp = np.less_equal if mode == "weak" else np.less
    for lo in range(0, len(m.components), step):
        hit = cmp(top_a[lo:lo + step, :, None], top_b[lo:lo + step, None, :])
        out += np.tensordot(m.weights[lo:lo + step], hit.astype(float), axes=1)
    return out


def _top_positions(positions: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """``(C, N)`` rank of the most preferred member of each multiset under each ranking."""
    big = positions.shape[1]
    masked = np.where(counts[None, :, :] > 0, positions[:, None, :], big)
    return masked.min(axis=-1)


@dataclass
class PropertyReport:
    checks: int = 0
    failures: list[dict] = field(default_factory=list)
    worst_subadditivity_slack: float = math.inf
    worst_copy_margin: float = math.inf

    @property
    def passed(self) -> bool:
        return not self.failures


def check_properties(m: PreferenceModel, trials: int = 100, seed: int | None = 0,
                     max_k: int = 4, tol: float = PROB_TOL) -> PropertyReport:
    """Randomised check of antisymmetry, multi-vs-single copy and subadditivity.

    Failures are collected in the report (with the offending inputs) rather
    than raised.
    """
    from .engine import WinrateQuery, exact_winrate

    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    rep = PropertyReport()
    n = m.n

    def rand_ms(size):
        return Multiset.from_ids(rng.integers(0, n, size=size))

    for _ in range(trials):
        k = int(rng.integers(1, max_k + 1))
        s = rand_ms(k)
        s2 = rand_ms(int(rng.integers(1, max_k + 1)))
        lhs = model_winrate(s, s2, m, "weak")
        rhs = model_winrate(s2, s, m, "strict")
        rep.checks += 1
        if abs(lhs + rhs - 1.0) > tol:
            rep.failures.append({"property": "antisymmetry", "S": s, "S'": s2, "sum": lhs + rhs})

        pi = Policy(rng.dirichlet(np.full(n, 0.5)))
        copy_rate = exact_winrate(WinrateQuery(ProductPolicy(pi, k), ProductPolicy(pi, 1), m, "weak")).value
        margin = copy_rate - (1.0 - 1.0 / (k + 1))
        rep.worst_copy_margin = min(rep.worst_copy_margin, margin)
        rep.checks += 1
        if margin < -tol:
            rep.failures.append({"property": "multi-vs-single", "policy": pi.probs.tolist(), "k": k,
                                 "rate": copy_rate})

        a, b, c = rand_ms(int(rng.integers(1, 3))), rand_ms(int(rng.integers(1, 3))), rand_ms(int(rng.integers(1, 3)))
        slack = (model_winrate(a, c, m, "strict") + model_winrate(b, c, m, "strict")
                 - model_winrate(a + b, c, m, "strict"))
        rep.worst_subadditivity_slack = min(rep.worst_subadditivity_slack, slack)
        rep.checks += 1
        if slack < -tol:
            rep.failures.append({"property": "subadditivity", "S1": a, "S2": b, "S": c, "slack": slack})
    return rep


def model_to_dict(m: PreferenceModel) -> dict:
    labels = list(m.labels) if m.labels else [f"y{i}" for i in range(m.n)]
    if m.kind == PL:
        comps = [{"weight": float(w), "rewards": c.rewards.tolist()} for w, c in zip(m.weights, m.components)]
    else:
        comps = [{"weight": float(w), "order": list(c.order)} for w, c in zip(m.weights, m.components)]
    doc = {"responses": labels, "kind": m.kind, "components": comps}
    if m.prompt is not None:
        doc["prompt"] = m.prompt
    return doc


def model_from_dict(doc: Mapping, prompt: str | None = None) -> PreferenceModel:
    """Build a model from the JSON document layout.

    ``order`` entries may be response ids or response labels.
    """
    try:
        labels = [str(s) for s in doc["responses"]]
        kind = doc["kind"]
        comps = doc["components"]
    except KeyError as e:
        raise ValueError(f"preference model document is missing field {e.args[0]!r}") from None
    if not comps:
        raise ValueError("preference model document has no components")
    index = {s: i for i, s in enumerate(labels)}
    weights = [float(c["weight"]) for c in comps]
    prompt = doc.get("prompt", prompt)
    if kind == PL:
        rewards = [np.asarray(c["rewards"], float) for c in comps]
        if any(r.size != len(labels) for r in rewards):
            raise ValueError("every rewards vector needs one entry per response")
        return PreferenceModel.pl(weights, rewards, labels, prompt)
    if kind == RANKING:
        orders = [[index[y] if isinstance(y, str) else int(y) for y in c["order"]] for c in comps]
        if any(len(o) != len(labels) for o in orders):
            raise ValueError("every order must list each response exactly once")
        return PreferenceModel.rankings(weights, orders, labels, prompt)
    raise ValueError(f"unknown model kind {kind!r}")


def load_model(path: str | Path) -> PreferenceModel:
    path = Path(path)
    with path.open() as fh:
        doc = json.load(fh)
    return model_from_dict(doc, prompt=path.stem)


def save_model(m: PreferenceModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(m), indent=2) + "\n")
