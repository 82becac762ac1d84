"""Canonical preference instances used for lower bounds and reproductions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import permutations
from pathlib import Path

import numpy as np

from .prefcore import PreferenceModel, load_model

MAX_RANKING_RESPONSES = 8


def uniform_pl_instance(k: int, prompt: str | None = None) -> PreferenceModel:
    """``k + 1`` responses under one PL component with all rewards equal to 1."""
    if k < 1:
        raise ValueError("k must be >= 1")
    n = k + 1
    return PreferenceModel.pl([1.0], [np.ones(n)], [f"y{i + 1}" for i in range(n)], prompt)


def uniform_rankings_instance(m: int, prompt: str | None = None) -> PreferenceModel:
    """All ``m!`` rankings of ``m`` responses with equal weight."""
    if m < 2:
        raise ValueError("m must be >= 2")
    if m > MAX_RANKING_RESPONSES:
        raise ValueError(f"uniform rankings are capped at m={MAX_RANKING_RESPONSES} ({math.factorial(m)} rankings requested)")
    orders = list(permutations(range(m)))
    w = np.full(len(orders), 1.0 / len(orders))
    return PreferenceModel.rankings(w, orders, [f"y{i + 1}" for i in range(m)], prompt)


def majority_instance(eps: float, prompt: str | None = None) -> PreferenceModel:
    """Two responses; ``y1 > y2`` for a ``1/2 + eps`` share of the population."""
    if not 0 < eps < 0.5:
        raise ValueError(f"eps must lie in (0, 1/2), got {eps}")
    return PreferenceModel.rankings([0.5 + eps, 0.5 - eps], [(0, 1), (1, 0)], ["y1", "y2"], prompt)


def condorcet_cycle_instance(prompt: str | None = None) -> PreferenceModel:
    """Three cyclic rankings a>b>c, b>c>a, c>a>b with equal weight."""
    return PreferenceModel.rankings(
        np.full(3, 1.0 / 3), [(0, 1, 2), (1, 2, 0), (2, 0, 1)], ["a", "b", "c"], prompt
    )


def load_instances(path: str | Path) -> list[PreferenceModel]:
    """One model per prompt: a single JSON file, or a directory of them (sorted by name)."""
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.json"))
        if not files:
            raise ValueError(f"no *.json instance files in {path}")
        return [load_model(f) for f in files]
    return [load_model(path)]


@dataclass(frozen=True)
class InstanceSpec:
    """Named instance with parameters, e.g. ``majority:0.1`` or ``custom:models/``."""

    name: str
    params: tuple = field(default_factory=tuple)
    prompt: str | None = None

    @classmethod
    def parse(cls, text: str) -> "InstanceSpec":
        name, _, rest = text.strip().partition(":")
        if name == "custom":
            if not rest:
                raise ValueError("custom instance needs a path, e.g. custom:model.json")
            return cls(name, (rest,))
        if name in ("uniform-pl", "uniform-rankings"):
            if not rest:
                raise ValueError(f"{name} needs an integer parameter, e.g. {name}:3")
            return cls(name, (int(rest),))
        if name == "majority":
            return cls(name, (float(rest) if rest else 0.1,))
        if name == "condorcet-cycle":
            return cls(name, ())
        raise ValueError(f"unknown instance {name!r}")

    def __str__(self) -> str:
        return self.name if not self.params else f"{self.name}:{self.params[0]}"

    def build(self) -> list[PreferenceModel]:
        if self.name == "uniform-pl":
            return [uniform_pl_instance(self.params[0], self.prompt)]
        if self.name == "uniform-rankings":
            return [uniform_rankings_instance(self.params[0], self.prompt)]
        if self.name == "majority":
            return [majority_instance(self.params[0], self.prompt)]
        if self.name == "condorcet-cycle":
            return [condorcet_cycle_instance(self.prompt)]
        if self.name == "custom":
            return load_instances(self.params[0])
        raise ValueError(f"unknown instance {self.name!r}")
