"""Slow linear-space reference evaluator, written from the layer formulas.

It deliberately avoids pnc.numerics: probabilities are multiplied and added
directly with explicit loops, so agreement with the log-space engine is
evidence that both follow the same definitions.
"""

from __future__ import annotations

import math

import numpy as np


def softmax(v):
    m = max(v)
    e = [math.exp(a - m) for a in v]
    s = sum(e)
    return [a / s for a in e]


def _neighbors(grid_shape, offsets, p):
    H, W = grid_shape
    r, c = divmod(p, W)
    out = []
    for dr, dc in offsets:
        rr, cc = r + dr, c + dc
        out.append(rr * W + cc if 0 <= rr < H and 0 <= cc < W else None)
    return out


def plain_mix(kappa, logits):
    """out[c] = sum_c' softmax(logits[c])[c'] * kappa[c']."""
    C = len(kappa)
    return [sum(w * k for w, k in zip(softmax(logits[c]), kappa)) for c in range(C)]


def quotient_mix(kappa, logits, neighbor_values):
    """out[c] = sum_c' w[c,c'] K[c'] kappa[c'] / sum_c' w[c,c'] K[c'],
    K[c'] = product of component c' over the neighbor partitions."""
    C = len(kappa)
    K = [1.0] * C
    for vals in neighbor_values:
        for j in range(C):
            K[j] *= vals[j]
    out = []
    for c in range(C):
        w = softmax(logits[c])
        num = sum(w[j] * K[j] * kappa[j] for j in range(C))
        den = sum(w[j] * K[j] for j in range(C))
        out.append(num / den)
    return out


def neural_logits(layer_values, p, grid_shape, offsets, kernels, floor, normalized):
    """Weight-net logits of partition p: masked convolution(s) over earlier partitions."""
    C = len(layer_values[0])

    def features(q):
        v = layer_values[q]
        if normalized:
            s = sum(v)
            return [math.log(a / s) if a > 0 else -math.inf for a in v]
        return [math.log(a) if a > 0 else -math.inf for a in v]

    h_all = [features(q) for q in range(len(layer_values))]
    for j, (weight, bias) in enumerate(kernels):
        last = j == len(kernels) - 1
        nxt = []
        for q in range(len(layer_values)):
            b = bias[q] if np.ndim(bias) == 2 else bias
            a = list(b)
            for t, src in enumerate(_neighbors(grid_shape, offsets, q)):
                if src is None:
                    continue
                x = [max(v, floor) for v in h_all[src]]
                for o in range(len(a)):
                    a[o] += sum(weight[t][o][i] * x[i] for i in range(len(x)))
            nxt.append(a if last else [math.tanh(v) for v in a])
        h_all = nxt
    flat = h_all[p]
    return [flat[c * C:(c + 1) * C] for c in range(C)]


def density(model, x, marginalized=(), cls=0):
    """p(x_e) for one assignment, linear space."""
    s = model.structure
    p = model.params
    marg = set(marginalized)
    C, D = s.num_components, s.num_leaf_components
    values = []
    for n in range(s.num_variables):
        if n in marg:
            leaf = [1.0] * D
        elif model.leaf_mode == "categorical":
            leaf = [softmax(p["leaf.logits"][cls, n, d])[int(x[n])] for d in range(D)]
        else:
            v = x[n] / 255.0
            leaf = [v, 1.0 - v]
        values.append([sum(w * l for w, l in zip(softmax(p["leaf.sum"][cls, n, c]), leaf))
                       for c in range(C)])

    for i in range(1, s.num_layers):
        lay = s.layouts[i]
        prods = []
        for kids in lay.children:
            v = [1.0] * C
            for k in kids:
                v = [a * b for a, b in zip(v, values[k])]
            prods.append(v)
        if i == s.num_layers - 1:
            values = prods
            break
        out = []
        for q in range(lay.num_partitions):
            if s.layer_kind == "plain":
                out.append(plain_mix(prods[q], p[f"layer{i}.sum"][q]))
            elif s.layer_kind == "quotient":
                nb = [prods[src] for src in _neighbors(lay.grid_shape, lay.offsets, q)
                      if src is not None]
                out.append(quotient_mix(prods[q], p[f"layer{i}.sum"][q], nb))
            else:
                kernels = [(k.weight, k.bias) for k in model.kernels(i)]
                logits = neural_logits(prods, q, lay.grid_shape, lay.offsets, kernels,
                                       model.floor, model.weight_input == "normalized")
                out.append(plain_mix(prods[q], logits))
        values = out
    root = softmax(p["root.sum"][cls])
    return sum(w * v for w, v in zip(root, values[0]))
