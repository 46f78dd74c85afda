"""Queries: densities, ordered marginals and conditionals, class posteriors."""

from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from .errors import DataError, QueryError
from .model import Model
from .numerics import log_softmax
from .structure import validate_query


def _as_batch(model: Model, x):
    x = np.asarray(x)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != model.structure.num_variables:
        raise DataError(
            f"assignment covers {x.shape[1]} variables, model has "
            f"{model.structure.num_variables}")
    return x, single


def _mask(model: Model, marginalized: Iterable[int]) -> np.ndarray:
    marg = sorted({int(v) for v in marginalized})
    check = validate_query(model.structure, marg)
    if not check:
        raise QueryError(check.message)
    mask = np.zeros(model.structure.num_variables, dtype=bool)
    mask[marg] = True
    return mask


def log_density(model: Model, x, class_index: int = 0):
    """log p(x) for complete assignments (one row per sample)."""
    x, single = _as_batch(model, x)
    if x.dtype.kind == "f" and np.isnan(x).any():
        raise DataError("incomplete assignment")
    out = model.forward(x, cls=class_index)
    return out[0] if single else out


def log_marginal(model: Model, x, marginalized: Iterable[int], class_index: int = 0):
    """log p(x_e) with ``marginalized`` summed out.

    ``marginalized`` must be a suffix of the induced variable order; the
    values of ``x`` at those positions are ignored.
    """
    mask = _mask(model, marginalized)
    x, single = _as_batch(model, x)
    if mask.all():
        # total mass is 1 by construction; skip the rounding of a full pass
        out = np.zeros(x.shape[0])
    else:
        out = model.forward(x, marginalized=mask, cls=class_index)
    return out[0] if single else out


def log_conditional(model: Model, x, query: Iterable[int], marginalized: Iterable[int] = (),
                    class_index: int = 0):
    """log p(x_query | x_evidence), evidence being everything not queried or marginalized.

    Requires evidence < query < marginalized in the induced order.
    """
    query = {int(v) for v in query}
    marginalized = {int(v) for v in marginalized}
    if query & marginalized:
        raise QueryError("query and marginalized sets overlap")
    # validate both before evaluating anything
    _mask(model, marginalized)
    _mask(model, marginalized | query)
    x, single = _as_batch(model, x)
    if not query:
        out = np.zeros(x.shape[0])
    else:
        out = (log_marginal(model, x, marginalized, class_index)
               - log_marginal(model, x, marginalized | query, class_index))
    return out[0] if single else out


def class_log_likelihoods(model: Model, x) -> np.ndarray:
    """[B, num_classes] matrix of log p(x | y)."""
    x, _ = _as_batch(model, x)
    B, K = x.shape[0], model.num_classes
    xs = np.repeat(x, K, axis=0)
    cls = np.tile(np.arange(K), B)
    return model.forward(xs, cls=cls).reshape(B, K)


def class_posterior(model: Model, x) -> np.ndarray:
    """p(y | x) under a uniform class prior."""
    if model.num_classes < 2:
        raise QueryError("class posterior needs a model with more than one class")
    x, single = _as_batch(model, x)
    post = np.exp(log_softmax(class_log_likelihoods(model, x)))
    return post[0] if single else post


def bits_per_dimension(mean_nll_nats: float, num_dims: int) -> float:
    if num_dims < 1:
        raise ValueError("num_dims must be >= 1")
    return mean_nll_nats / (math.log(2.0) * num_dims)
