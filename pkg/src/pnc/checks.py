"""Executable validity checks: normalization, marginal agreement, gradients.

Used by the ``validate`` command. Each check returns a CheckResult instead
of raising, so a report can list every failing property.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .inference import log_conditional, log_marginal
from .model import Model
from .oracle import MAX_ASSIGNMENTS, enumerate_joint, oracle_conditional_at, oracle_marginal_at
from .training import check_gradients

NORMALIZATION_TOL = 1e-9
MARGINAL_TOL = 1e-9
GRADIENT_TOL = 1e-5


@dataclass(frozen=True)
class CheckResult:
    seed: int
    name: str
    passed: bool
    error: float

    def line(self) -> str:
        status = "pass" if self.passed else "fail"
        return f"seed={self.seed} check={self.name} status={status} error={self.error:.3e}"


def oracle_feasible(model: Model) -> bool:
    if model.leaf_mode != "categorical":
        return False
    return model.num_categories ** model.structure.num_variables <= MAX_ASSIGNMENTS


def check_normalization(model: Model, seed: int = 0) -> CheckResult:
    """Every class-conditional joint sums to one."""
    err = max(abs(enumerate_joint(model, k).total()) for k in range(model.num_classes))
    return CheckResult(seed, "normalization", bool(err < NORMALIZATION_TOL), float(err))


def check_marginals(model: Model, rng, num_queries: int = 10, seed: int = 0) -> CheckResult:
    """Engine suffix marginals and conditionals against brute force."""
    table = enumerate_joint(model)
    order = model.structure.variable_order.variables
    n = len(order)
    err = 0.0
    for _ in range(num_queries):
        x = rng.integers(0, model.num_categories, size=(4, n))
        k = int(rng.integers(0, n + 1))
        marg = {int(v) for v in order[n - k:]} if k else set()
        err = max(err, float(np.max(np.abs(
            log_marginal(model, x, marg) - oracle_marginal_at(table, x, marg)))))
        q = int(rng.integers(0, n - k + 1))
        query = {int(v) for v in order[n - k - q:n - k]}
        err = max(err, float(np.max(np.abs(
            log_conditional(model, x, query, marg)
            - oracle_conditional_at(table, x, query, marg)))))
    return CheckResult(seed, "marginal", bool(err < MARGINAL_TOL), err)


def check_gradient(model: Model, rng, seed: int = 0, batch: int = 3) -> CheckResult:
    x = rng.integers(0, model.num_categories, size=(batch, model.structure.num_variables))
    labels = rng.integers(0, model.num_classes, size=batch) if model.num_classes > 1 else None
    report = check_gradients(model, x, labels, "nll", tolerance=GRADIENT_TOL)
    return CheckResult(seed, "gradient", report.ok, report.worst)


def run_checks(model: Model, seed: int = 0) -> list[CheckResult]:
    """All three checks on one model; query and batch draws come from ``seed``."""
    if not oracle_feasible(model):
        raise DataError("model is too large for the brute-force oracle")
    rng = np.random.default_rng(seed)
    return [check_normalization(model, seed), check_marginals(model, rng, seed=seed),
            check_gradient(model, rng, seed=seed)]


def random_model(factory, seed: int, scale: float = 1.0) -> Model:
    """A model from ``factory(seed)`` with every parameter redrawn from N(0, scale^2)."""
    return factory(seed).randomize(np.random.default_rng(seed), scale)
