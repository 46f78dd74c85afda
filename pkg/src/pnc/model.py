"""Parameters and layer-wise evaluation of layered circuits.

Evaluation runs bottom-up over a structure: leaf init, leaf mixture,
then alternating product and sum layers, a final product and the root
mixture. Every buffer holds log-values of shape [batch, partitions,
components]. Each layer function has a ``*_backward`` twin used for
training.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, InvalidStructureError
from .numerics import (
    DEFAULT_FLOOR,
    HalfKernel,
    gather_neighbors,
    log_softmax,
    log_softmax_backward,
    log_sum_exp,
    log_sum_exp_backward,
    masked_convolve,
    masked_convolve_backward,
    neighbor_index,
    scatter_neighbors,
    weighted_log_sum,
    weighted_log_sum_backward,
)
from .structure import CircuitStructure

LEAF_MODES = ("categorical", "two_input")
WEIGHT_INPUTS = ("normalized", "raw")

# Half-widths of the uniform initializers. Sum logits must not start equal:
# identical components receive identical gradients and never separate.
LEAF_INIT = 1.0
SUM_INIT = 1.0
# Weight-net kernels start at KERNEL_GAIN / sqrt(fan_in); output biases play
# the role of sum logits and share their initializer.
KERNEL_GAIN = 1.0


# --------------------------------------------------------------------------
# layer operations


def product_layer(buffer: np.ndarray, children: np.ndarray) -> np.ndarray:
    """Log-space product of child pairs; rows with a -1 right child pass through."""
    out = buffer[..., children[:, 0], :].copy()
    paired = children[:, 1] >= 0
    out[..., paired, :] += buffer[..., children[paired, 1], :]
    return out


def product_layer_backward(grad: np.ndarray, children: np.ndarray, num_in: int) -> np.ndarray:
    g = np.zeros(grad.shape[:-2] + (num_in, grad.shape[-1]))
    g[..., children[:, 0], :] = grad
    paired = children[:, 1] >= 0
    g[..., children[paired, 1], :] = grad[..., paired, :]
    return g


def plain_sum_layer(buffer, weight_logits, normalize=True):
    """out[p, c] = log sum_c' w[p, c, c'] exp(buffer[p, c'])."""
    logw = log_softmax(weight_logits) if normalize else weight_logits
    return weighted_log_sum(buffer[..., None, :], logw)


def plain_sum_layer_backward(buffer, weight_logits, out, grad, normalize=True):
    logw = log_softmax(weight_logits) if normalize else weight_logits
    g_buf, g_logw = weighted_log_sum_backward(buffer[..., None, :], logw, out, grad)
    g_logits = log_softmax_backward(logw, g_logw) if normalize else g_logw
    return g_buf[..., 0, :], g_logits


@dataclass
class NeuralCache:
    buffer: np.ndarray
    z: np.ndarray
    hidden: list = field(default_factory=list)  # (input, pre-activation) per kernel
    logw: np.ndarray = None
    out: np.ndarray = None


def _weight_net(buffer, kernels, grid_shape, floor, normalize_input):
    z = log_softmax(buffer) if normalize_input else buffer
    h = z
    hidden = []
    for j, k in enumerate(kernels):
        a = masked_convolve(h, k, grid_shape, floor)
        hidden.append((h, a))
        h = np.tanh(a) if j < len(kernels) - 1 else a
    return z, hidden, h


def neural_sum_layer(buffer, kernels, grid_shape, floor=DEFAULT_FLOOR, normalize_input=True,
                     normalize=True, return_cache=False):
    """Sum layer whose mixing weights come from a causal convolution.

    The weight net sees only partitions at the kernels' (strictly earlier)
    offsets, so partition p's weights never depend on its own scope.
    """
    C = buffer.shape[-1]
    z, hidden, logits = _weight_net(buffer, kernels, grid_shape, floor, normalize_input)
    logits = logits.reshape(logits.shape[:-1] + (C, C))
    logw = log_softmax(logits) if normalize else logits
    out = weighted_log_sum(buffer[..., None, :], logw)
    if return_cache:
        return out, NeuralCache(buffer, z, hidden, logw, out)
    return out


def neural_sum_layer_backward(cache: NeuralCache, kernels, grid_shape, grad,
                              floor=DEFAULT_FLOOR, normalize_input=True, normalize=True):
    """Returns (grad_buffer, [(grad_weight, grad_bias) per kernel])."""
    C = cache.buffer.shape[-1]
    g_buf, g_logw = weighted_log_sum_backward(cache.buffer[..., None, :], cache.logw,
                                              cache.out, grad)
    g_buf = g_buf[..., 0, :]
    g = log_softmax_backward(cache.logw, g_logw) if normalize else g_logw
    g = g.reshape(g.shape[:-2] + (C * C,))
    kernel_grads = [None] * len(kernels)
    for j in range(len(kernels) - 1, -1, -1):
        h_in, a = cache.hidden[j]
        if j < len(kernels) - 1:
            g = g * (1.0 - np.tanh(a) ** 2)
        g, g_w, g_b = masked_convolve_backward(h_in, kernels[j], grid_shape, g, floor)
        kernel_grads[j] = (g_w, g_b)
    g_z = g
    if normalize_input:
        g_buf = g_buf + log_softmax_backward(cache.z, g_z)
    else:
        g_buf = g_buf + g_z
    return g_buf, kernel_grads


def quotient_sum_layer(buffer, weight_logits, offsets, grid_shape, normalize=True,
                       return_cache=False):
    """Conditional mixing: weights re-scaled by the preceding partitions' values.

    out[p, c] = log sum_c' w K[c'] kappa[p, c'] - log sum_c' w K[c'] where
    K[c'] multiplies component c' of every partition at ``offsets``.
    """
    logw = log_softmax(weight_logits) if normalize else weight_logits
    if offsets:
        nbr = neighbor_index(grid_shape, offsets)
        s = gather_neighbors(buffer, nbr, fill=0.0).sum(axis=-2)
    else:
        s = np.zeros_like(buffer)
    base = logw + s[..., None, :]
    num_terms = base + buffer[..., None, :]
    num = log_sum_exp(num_terms)
    den = log_sum_exp(base)
    out = num - den
    if return_cache:
        return out, (logw, base, num_terms, num, den)
    return out


def quotient_sum_layer_backward(buffer, cache, offsets, grid_shape, grad, normalize=True):
    logw, base, num_terms, num, den = cache
    g_num = log_sum_exp_backward(num_terms, num, grad)
    g_base = g_num + log_sum_exp_backward(base, den, -grad)
    g_buf = g_num.sum(axis=-2)
    g_s = g_base.sum(axis=-2)
    g_logw = g_base
    while g_logw.ndim > logw.ndim:
        g_logw = g_logw.sum(axis=0)
    if offsets:
        nbr = neighbor_index(grid_shape, offsets)
        g_taps = np.broadcast_to(g_s[..., None, :], g_s.shape[:-1] + (len(offsets), g_s.shape[-1]))
        g_buf = g_buf + scatter_neighbors(g_taps, nbr, buffer.shape[-2])
    g_logits = log_softmax_backward(logw, g_logw) if normalize else g_logw
    return g_buf, g_logits


# --------------------------------------------------------------------------
# model


class Model:
    """Parameter banks plus the structure they are laid over.

    With ``num_classes > 1`` the leaf layer (leaf distributions and leaf
    mixture) and the root mixture have one bank per class; every internal
    layer is shared.
    """

    def __init__(self, structure: CircuitStructure, leaf_mode: str = "categorical",
                 num_categories: int = 256, num_classes: int = 1, weight_depth: int = 1,
                 weight_input: str = "normalized", floor: float = DEFAULT_FLOOR, seed: int = 0):
        if leaf_mode not in LEAF_MODES:
            raise InvalidStructureError(f"unknown leaf mode {leaf_mode!r}")
        if leaf_mode == "two_input" and structure.num_leaf_components != 2:
            raise InvalidStructureError("two_input leaves require exactly 2 leaf components")
        if weight_depth not in (1, 2):
            raise InvalidStructureError(f"weight_depth must be 1 or 2, got {weight_depth}")
        if weight_input not in WEIGHT_INPUTS:
            raise InvalidStructureError(f"unknown weight input {weight_input!r}")
        if num_classes < 1 or num_categories < 1:
            raise InvalidStructureError("num_classes and num_categories must be >= 1")
        self.structure = structure
        self.leaf_mode = leaf_mode
        self.num_categories = num_categories if leaf_mode == "categorical" else 2
        self.num_classes = num_classes
        self.weight_depth = weight_depth
        self.weight_input = weight_input
        self.floor = floor
        # Test hook: when False, weight logits are used as log-weights directly.
        self.normalize_weights = True
        self.params = self._init_params(np.random.default_rng(seed))
        self._children = [lay.child_index() for lay in structure.layouts]

    # ---- parameters

    def _init_params(self, rng) -> dict[str, np.ndarray]:
        s = self.structure
        K, N, C, D = self.num_classes, s.num_variables, s.num_components, s.num_leaf_components
        p: dict[str, np.ndarray] = {}
        if self.leaf_mode == "categorical":
            p["leaf.logits"] = rng.uniform(-LEAF_INIT, LEAF_INIT,
                                           size=(K, N, D, self.num_categories))
        p["leaf.sum"] = rng.uniform(-SUM_INIT, SUM_INIT, size=(K, N, C, D))
        for i in s.internal_layers:
            lay = s.layouts[i]
            P = lay.num_partitions
            if s.layer_kind in ("plain", "quotient"):
                p[f"layer{i}.sum"] = rng.uniform(-SUM_INIT, SUM_INIT, size=(P, C, C))
                continue
            T = len(lay.offsets)
            widths = [C] + [C * C] * self.weight_depth
            for j in range(self.weight_depth):
                fan_in = max(T * widths[j], 1)
                bound = KERNEL_GAIN / np.sqrt(fan_in)
                last = j == self.weight_depth - 1
                suffix = "" if last else str(j)
                p[f"layer{i}.kernel{suffix}"] = rng.uniform(
                    -bound, bound, size=(T, widths[j + 1], widths[j]))
                if last:
                    p[f"layer{i}.bias"] = rng.uniform(-SUM_INIT, SUM_INIT, size=(P, C * C))
                else:
                    p[f"layer{i}.bias{suffix}"] = np.zeros(widths[j + 1])
        p["root.sum"] = rng.uniform(-SUM_INIT, SUM_INIT, size=(K, C))
        return p

    def kernels(self, i: int) -> list[HalfKernel]:
        offsets = self.structure.layouts[i].offsets
        out = []
        for j in range(self.weight_depth):
            suffix = "" if j == self.weight_depth - 1 else str(j)
            out.append(HalfKernel(offsets, self.params[f"layer{i}.kernel{suffix}"],
                                  self.params[f"layer{i}.bias{suffix}"]))
        return out

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def copy(self) -> "Model":
        m = copy.copy(self)
        m.params = {k: v.copy() for k, v in self.params.items()}
        return m

    def randomize(self, rng, scale: float = 1.0) -> "Model":
        """Overwrite every parameter with N(0, scale^2) draws (for tests and checks)."""
        for k, v in self.params.items():
            self.params[k] = rng.normal(0.0, scale, size=v.shape)
        return self

    # ---- evaluation

    def _logw(self, logits):
        return log_softmax(logits) if self.normalize_weights else logits

    def forward(self, x, marginalized=None, cls=None, keep_cache=False):
        """Log-density of each row of ``x`` with ``marginalized`` variables summed out.

        x: [B, N] integer values (categories, or 0-255 pixels in two_input
        mode). marginalized: boolean mask [N] or [B, N]. cls: [B] class ids.
        """
        s = self.structure
        x = np.atleast_2d(np.asarray(x))
        B = x.shape[0]
        cls = np.zeros(B, dtype=np.intp) if cls is None else np.broadcast_to(
            np.asarray(cls, dtype=np.intp), (B,))
        if np.any(cls < 0) or np.any(cls >= self.num_classes):
            raise DataError(f"class index out of range [0, {self.num_classes})")
        mask = None
        if marginalized is not None:
            mask = np.broadcast_to(np.asarray(marginalized, dtype=bool), x.shape)

        cache = {"x": x, "cls": cls, "mask": mask, "layers": []}
        leaf = init_leaves(self, x, mask, cls)
        logw_leaf = self._leaf_bank("leaf.sum", cls)
        buf = weighted_log_sum(leaf[..., None, :], logw_leaf)
        cache["leaf"] = (leaf, logw_leaf, buf)

        for i in range(1, s.num_layers):
            prod = product_layer(buf, self._children[i])
            if i == s.num_layers - 1:
                buf = prod
                break
            out, aux = self._sum_layer(i, prod)
            cache["layers"].append((i, prod, out, aux))
            buf = out

        logw_root = self._leaf_bank("root.sum", cls)
        logp = weighted_log_sum(buf[:, 0, :], logw_root)
        cache["root"] = (buf, logw_root, logp)
        if keep_cache:
            return logp, cache
        return logp

    def _leaf_bank(self, name, cls):
        logw = self._logw(self.params[name])
        if self.num_classes == 1:
            return logw[0]
        return logw[cls]

    def _sum_layer(self, i, buf):
        s = self.structure
        lay = s.layouts[i]
        if s.layer_kind == "plain":
            out = plain_sum_layer(buf, self.params[f"layer{i}.sum"], self.normalize_weights)
            return out, None
        if s.layer_kind == "quotient":
            return quotient_sum_layer(buf, self.params[f"layer{i}.sum"], lay.offsets,
                                      lay.grid_shape, self.normalize_weights, return_cache=True)
        return neural_sum_layer(buf, self.kernels(i), lay.grid_shape, self.floor,
                                self.weight_input == "normalized", self.normalize_weights,
                                return_cache=True)

    def backward(self, cache, grad_logp) -> dict[str, np.ndarray]:
        """Gradients of sum_b grad_logp[b] * logp[b] w.r.t. every parameter."""
        if cache is None:
            raise ValueError("backward needs the cache of a forward pass (keep_cache=True)")
        s = self.structure
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        cls = cache["cls"]

        buf, logw_root, logp = cache["root"]
        g_top, g_logw = weighted_log_sum_backward(buf[:, 0, :], logw_root, logp, grad_logp)
        self._bank_backward(grads, "root.sum", g_logw, cls)
        g = np.zeros_like(buf)
        g[:, 0, :] = g_top

        layers = {i: (prod, out, aux) for i, prod, out, aux in cache["layers"]}
        for i in range(s.num_layers - 1, 0, -1):
            if i != s.num_layers - 1:
                prod, out, aux = layers[i]
                g = self._sum_layer_backward(i, prod, out, aux, g, grads)
            n_in = s.layouts[i - 1].num_partitions
            g = product_layer_backward(g, self._children[i], n_in)

        leaf, logw_leaf, out = cache["leaf"]
        g_leaf, g_logw = weighted_log_sum_backward(leaf[..., None, :], logw_leaf, out, g)
        self._bank_backward(grads, "leaf.sum", g_logw, cls)
        if self.leaf_mode == "categorical":
            g_leaf = g_leaf[..., 0, :]
            if cache["mask"] is not None:
                g_leaf = np.where(cache["mask"][..., None], 0.0, g_leaf)
            grads["leaf.logits"] = _categorical_backward(
                self.params["leaf.logits"], cache["x"], cls, g_leaf)
        return grads

    def _bank_backward(self, grads, name, g_logw, cls):
        if self.num_classes == 1:
            g_logw = g_logw[None]
        else:
            acc = np.zeros_like(self.params[name])
            np.add.at(acc, cls, g_logw)
            g_logw = acc
        if self.normalize_weights:
            g_logw = log_softmax_backward(log_softmax(self.params[name]), g_logw)
        grads[name] += g_logw

    def _sum_layer_backward(self, i, prod, out, aux, g, grads):
        s = self.structure
        lay = s.layouts[i]
        name = f"layer{i}.sum"
        if s.layer_kind == "plain":
            g_in, g_logits = plain_sum_layer_backward(prod, self.params[name], out, g,
                                                      self.normalize_weights)
            grads[name] += g_logits
            return g_in
        if s.layer_kind == "quotient":
            g_in, g_logits = quotient_sum_layer_backward(prod, aux, lay.offsets, lay.grid_shape,
                                                         g, self.normalize_weights)
            grads[name] += g_logits
            return g_in
        kernels = self.kernels(i)
        g_in, kgrads = neural_sum_layer_backward(aux, kernels, lay.grid_shape, g, self.floor,
                                                 self.weight_input == "normalized",
                                                 self.normalize_weights)
        for j, (g_w, g_b) in enumerate(kgrads):
            suffix = "" if j == self.weight_depth - 1 else str(j)
            grads[f"layer{i}.kernel{suffix}"] += g_w
            grads[f"layer{i}.bias{suffix}"] += g_b
        return g_in


def init_leaves(model: Model, x, marginalized=None, cls=None) -> np.ndarray:
    """Leaf log-values [B, N, N_D]; marginalized variables get log 1 = 0."""
    x = np.atleast_2d(np.asarray(x))
    B, N = x.shape
    if N != model.structure.num_variables:
        raise DataError(f"expected {model.structure.num_variables} variables, got {N}")
    cls = np.zeros(B, dtype=np.intp) if cls is None else np.broadcast_to(
        np.asarray(cls, dtype=np.intp), (B,))
    mask = None if marginalized is None else np.broadcast_to(
        np.asarray(marginalized, dtype=bool), x.shape)
    if model.leaf_mode == "categorical":
        observed = x if mask is None else np.where(mask, 0, x)
        if not np.issubdtype(observed.dtype, np.integer):
            if not np.all(np.isfinite(observed)) or np.any(observed != np.round(observed)):
                raise DataError("categorical values must be integers")
        observed = observed.astype(np.intp)
        if np.any(observed < 0) or np.any(observed >= model.num_categories):
            raise DataError(f"values must be integers in [0, {model.num_categories})")
        logp = log_softmax(model.params["leaf.logits"])  # [K, N, D, cats]
        logp = np.moveaxis(logp, -1, -2)  # [K, N, cats, D]
        vals = logp[cls[:, None], np.arange(N)[None, :], observed]
    else:
        xf = np.asarray(x, dtype=np.float64)
        if mask is not None:
            xf = np.where(mask, 0.0, xf)
        if np.any(xf < 0) or np.any(xf > 255):
            raise DataError("pixel values must lie in [0, 255]")
        v = xf / 255.0
        with np.errstate(divide="ignore"):
            vals = np.stack([np.log(v), np.log1p(-v)], axis=-1)
        vals = np.maximum(vals, model.floor)  # pixel 0 or 255 gives log 0
    if mask is not None:
        vals = np.where(mask[..., None], 0.0, vals)
    return vals


def _categorical_backward(logits, x, cls, g_vals):
    K, N, D, cats = logits.shape
    xi = np.clip(np.asarray(x, dtype=np.intp), 0, cats - 1)
    G = np.zeros((K, N, cats, D))
    np.add.at(G, (cls[:, None], np.arange(N)[None, :], xi), g_vals)
    G = np.moveaxis(G, -2, -1)
    return log_softmax_backward(log_softmax(logits), G)
