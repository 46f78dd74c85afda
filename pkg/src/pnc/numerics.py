"""Log-space kernels and their exact derivatives.

All functions operate along the last axis (or the last two for
``masked_convolve``) and broadcast over leading batch axes. Backward
functions take the forward inputs/outputs explicitly instead of keeping
hidden state.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

DEFAULT_FLOOR = -100.0


def log_sum_exp(terms, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    """log(sum(exp(terms))) with max-shift; an all -inf slice gives -inf."""
    terms = np.asarray(terms, dtype=np.float64)
    if terms.shape[axis] == 0:
        raise ValueError("log_sum_exp of an empty slice")
    m = np.max(terms, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(terms - m), axis=axis, keepdims=True)) + m
    if not keepdims:
        out = np.squeeze(out, axis=axis)
    return out


def log_sum_exp_backward(terms, out, grad_out, axis: int = -1) -> np.ndarray:
    """Gradient w.r.t. ``terms``: grad_out * softmax(terms)."""
    out = np.expand_dims(out, axis)
    grad_out = np.expand_dims(grad_out, axis)
    with np.errstate(invalid="ignore"):
        w = np.exp(terms - out)
    return grad_out * np.where(np.isneginf(out), 0.0, w)


def weighted_log_sum(log_values, log_weights) -> np.ndarray:
    """log sum_i exp(log_w_i + log_v_i) over the last axis, with broadcasting.

    For a mixing matrix pass ``log_values[..., None, :]`` against weights
    [..., C_out, C_in].
    """
    log_values = np.asarray(log_values, dtype=np.float64)
    log_weights = np.asarray(log_weights, dtype=np.float64)
    if log_values.shape[-1] != log_weights.shape[-1]:
        raise ValueError(
            f"length mismatch: {log_values.shape[-1]} values vs {log_weights.shape[-1]} weights")
    return log_sum_exp(log_weights + log_values, axis=-1)


def weighted_log_sum_backward(log_values, log_weights, out, grad_out):
    """Returns (grad_values, grad_weights), each summed back to its input's shape."""
    g_terms = log_sum_exp_backward(log_weights + log_values, out, grad_out)
    return _reduce_to(g_terms, np.shape(log_values)), _reduce_to(g_terms, np.shape(log_weights))


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    """Sum out broadcast axes so ``g`` matches ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    return logits - log_sum_exp(logits, axis=axis, keepdims=True)


def log_softmax_backward(out, grad_out, axis: int = -1) -> np.ndarray:
    """Vector-Jacobian product of log_softmax given its output."""
    return grad_out - np.exp(out) * np.sum(grad_out, axis=axis, keepdims=True)


# --------------------------------------------------------------------------
# masked (half-kernel) convolution over partition grids


@dataclass
class HalfKernel:
    """Causal convolution taps.

    weight has shape [T, out, in], one matrix per offset. ``bias`` is either
    [out] or [P, out] (untied per partition).
    """

    offsets: tuple[tuple[int, int], ...]
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.offsets = tuple((int(r), int(c)) for r, c in self.offsets)
        for r, c in self.offsets:
            if r > 0 or (r == 0 and c >= 0):
                raise ValueError(f"offset {(r, c)} is not strictly raster-earlier")
        if self.weight.shape[0] != len(self.offsets):
            raise ValueError("one weight matrix per offset required")


@lru_cache(maxsize=256)
def _neighbor_index(grid_shape: tuple[int, int], offsets: tuple) -> np.ndarray:
    rows, cols = grid_shape
    P = rows * cols
    r, c = np.divmod(np.arange(P), cols)
    idx = np.full((P, len(offsets)), P, dtype=np.intp)
    for t, (dr, dc) in enumerate(offsets):
        rr, cc = r + dr, c + dc
        ok = (rr >= 0) & (rr < rows) & (cc >= 0) & (cc < cols)
        idx[ok, t] = rr[ok] * cols + cc[ok]
    idx.setflags(write=False)
    return idx


def neighbor_index(grid_shape, offsets) -> np.ndarray:
    """[P, T] source partition per tap; out-of-grid taps point at index P."""
    return _neighbor_index(tuple(grid_shape), tuple(tuple(o) for o in offsets))


def gather_neighbors(values: np.ndarray, nbr: np.ndarray, fill: float = 0.0) -> np.ndarray:
    """values [..., P, C] -> [..., P, T, C], out-of-grid taps set to ``fill``."""
    pad = np.full(values.shape[:-2] + (1, values.shape[-1]), fill)
    padded = np.concatenate([values, pad], axis=-2)
    return padded[..., nbr, :]


def scatter_neighbors(grad: np.ndarray, nbr: np.ndarray, num_partitions: int) -> np.ndarray:
    """Adjoint of gather_neighbors: [..., P, T, C] -> [..., P, C]."""
    out = np.zeros(grad.shape[:-3] + (num_partitions + 1, grad.shape[-1]))
    # within one tap the in-grid sources are distinct; the pad row absorbs the rest
    for t in range(nbr.shape[1]):
        out[..., nbr[:, t], :] += grad[..., :, t, :]
    return out[..., :num_partitions, :]


def masked_convolve(buffer, kernel: HalfKernel, grid_shape, floor: float = DEFAULT_FLOOR):
    """logits[p] = bias + sum_t W_t @ max(buffer[p + offset_t], floor).

    ``buffer`` is [..., P, C_in] in raster order over ``grid_shape``.
    Out-of-grid taps contribute zero.
    """
    buffer = np.asarray(buffer, dtype=np.float64)
    P, c_in = buffer.shape[-2:]
    T, c_out, _ = kernel.weight.shape
    out = np.broadcast_to(kernel.bias, buffer.shape[:-2] + (P, c_out)).copy()
    if T == 0:
        return out
    nbr = neighbor_index(grid_shape, kernel.offsets)
    x = gather_neighbors(np.maximum(buffer, floor), nbr)
    w = kernel.weight.transpose(0, 2, 1).reshape(T * c_in, c_out)
    out += x.reshape(x.shape[:-2] + (T * c_in,)) @ w
    return out


def masked_convolve_backward(buffer, kernel: HalfKernel, grid_shape, grad_out,
                             floor: float = DEFAULT_FLOOR):
    """Returns (grad_buffer, grad_weight, grad_bias)."""
    buffer = np.asarray(buffer, dtype=np.float64)
    P, c_in = buffer.shape[-2:]
    T, c_out, _ = kernel.weight.shape
    g_bias = _reduce_to(grad_out, np.shape(kernel.bias))
    if T == 0:
        return np.zeros_like(buffer), np.zeros_like(kernel.weight), g_bias
    nbr = neighbor_index(grid_shape, kernel.offsets)
    x = gather_neighbors(np.maximum(buffer, floor), nbr)
    x_flat = x.reshape(-1, T * c_in)
    g_flat = grad_out.reshape(-1, c_out)
    g_w = (x_flat.T @ g_flat).reshape(T, c_in, c_out).transpose(0, 2, 1)
    w = kernel.weight.transpose(0, 2, 1).reshape(T * c_in, c_out)
    g_x = (grad_out @ w.T).reshape(grad_out.shape[:-1] + (T, c_in))
    g_buf = scatter_neighbors(g_x, nbr, P) * (buffer > floor)
    return g_buf, g_w, g_bias
