"""Brute-force reference answers for tiny circuits.

Everything here is derived from the full joint table, which is built by
evaluating the engine at complete assignments only. Marginals,
conditionals and posteriors are then plain sums over that table, so they
do not share any code with the engine's marginalization path.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .model import Model
from .numerics import log_sum_exp

MAX_ASSIGNMENTS = 2 ** 20


@dataclass(frozen=True)
class JointTable:
    cardinalities: tuple[int, ...]
    log_mass: np.ndarray  # shape == cardinalities, axis i is variable i

    @property
    def assignments(self) -> np.ndarray:
        return np.array(list(itertools.product(*(range(k) for k in self.cardinalities))))

    def total(self) -> float:
        return float(log_sum_exp(self.log_mass.ravel()))


def _cardinalities(model: Model) -> tuple[int, ...]:
    if model.leaf_mode != "categorical":
        raise NotImplementedError("joint enumeration needs categorical leaves")
    return (model.num_categories,) * model.structure.num_variables


def enumerate_joint(model: Model, class_index: int = 0, chunk: int = 4096) -> JointTable:
    cards = _cardinalities(model)
    total = int(np.prod(cards, dtype=object))
    if total > MAX_ASSIGNMENTS:
        raise NotImplementedError(f"{total} assignments exceed the oracle limit")
    grid = np.indices(cards).reshape(len(cards), -1).T
    out = np.empty(len(grid))
    for lo in range(0, len(grid), chunk):
        out[lo:lo + chunk] = model.forward(grid[lo:lo + chunk], cls=class_index)
    return JointTable(cards, out.reshape(cards))


def oracle_marginal(table: JointTable, marginalized: Iterable[int]) -> np.ndarray:
    """Log-marginal over the remaining variables (any subset is allowed).

    The result keeps the remaining variables' axes in increasing id order.
    """
    axes = tuple(sorted({int(v) for v in marginalized}))
    if not axes:
        return table.log_mass.copy()
    flat = np.moveaxis(table.log_mass, axes, range(-len(axes), 0))
    flat = flat.reshape(flat.shape[: flat.ndim - len(axes)] + (-1,))
    return log_sum_exp(flat, axis=-1)


def oracle_marginal_at(table: JointTable, x, marginalized: Iterable[int]):
    """Marginal log-mass at the evidence values of each row of ``x``."""
    marg = sorted({int(v) for v in marginalized})
    keep = [v for v in range(len(table.cardinalities)) if v not in marg]
    m = oracle_marginal(table, marg)
    x = np.atleast_2d(np.asarray(x, dtype=np.intp))
    if not keep:
        return np.full(x.shape[0], float(m))
    return m[tuple(x[:, keep].T)]


def oracle_conditional_at(table: JointTable, x, query: Iterable[int],
                          marginalized: Iterable[int] = ()):
    query = {int(v) for v in query}
    marg = {int(v) for v in marginalized}
    return oracle_marginal_at(table, x, marg) - oracle_marginal_at(table, x, marg | query)


def oracle_posterior(model: Model, x) -> np.ndarray:
    """p(y | x) from per-class joint tables (uniform prior)."""
    tables = [enumerate_joint(model, k) for k in range(model.num_classes)]
    x = np.atleast_2d(np.asarray(x, dtype=np.intp))
    ll = np.stack([t.log_mass[tuple(x.T)] for t in tables], axis=1)
    ll = ll - ll.max(axis=1, keepdims=True)
    p = np.exp(ll)
    return p / p.sum(axis=1, keepdims=True)
