from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pnc.model import Model  # noqa: E402
from pnc.structure import LAYER_KINDS, build_1d_structure, build_2d_structure  # noqa: E402

DATA = Path(__file__).parent / "data"
MNIST_IMAGES = DATA / "mnist5k-images-idx3-ubyte.gz"
MNIST_LABELS = DATA / "mnist5k-labels-idx1-ubyte.gz"


def chain_model(n=8, kind="neural", C=3, D=None, cats=2, seed=0, scale=1.0, **kw):
    """Seeded 1-D model with every parameter drawn from N(0, scale^2)."""
    s = build_1d_structure(n, C, D or C, nu=kw.pop("nu", 1), layer_kind=kind)
    m = Model(s, num_categories=cats, seed=seed, **kw)
    if scale:
        m.randomize(np.random.default_rng(seed), scale)
    return m


def grid_model(h=3, w=3, kind="neural", C=2, D=None, cats=2, seed=0, scale=1.0, **kw):
    s = build_2d_structure(h, w, C, D or C, layer_kind=kind, nu=kw.pop("nu", 1))
    m = Model(s, num_categories=cats, seed=seed, **kw)
    if scale:
        m.randomize(np.random.default_rng(seed), scale)
    return m


def all_assignments(n, cats=2):
    return np.indices((cats,) * n).reshape(n, -1).T


@pytest.fixture(params=LAYER_KINDS)
def kind(request):
    return request.param
