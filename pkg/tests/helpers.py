"""Shared test utilities: random graphs and a finite-difference oracle."""

import numpy as np
from hypothesis import strategies as st

from graphpose.nn import Dense, EdgeConv, EdgeReadout, GnnModel, Graph, MaxPoolGroups, Residual


def random_graph(rng, n, width, edge_dim=0, groups=None, p=0.3):
    src, dst = np.nonzero(rng.random((n, n)) < p)
    keep = src != dst
    edges = np.stack([src[keep], dst[keep]], axis=1)
    ef = rng.normal(size=(len(edges), edge_dim)) if edge_dim else None
    vg = coarse = None
    if groups:
        vg = np.concatenate([np.arange(groups), rng.integers(groups, size=n - groups)])
        coarse = Graph(np.zeros((groups, 0)), [[i, (i + 1) % groups] for i in range(groups)])
    return Graph(rng.normal(size=(n, width)), edges, ef, vg, coarse)


def _relative(a, b):
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return float(np.abs(a - b).max() / scale)


def gradient_errors(model: GnnModel, graph: Graph, rng, h=1e-5) -> float:
    """Largest relative error between analytic and central-difference
    gradients of ``sum(R * model(graph))`` over parameters and inputs."""
    out, cache = model.forward(graph)
    R = rng.normal(size=out.shape)
    grads, dx = model.backward(cache, R)

    def f(x=None):
        return float(np.sum(R * model.forward(graph, x)[0]))

    worst = 0.0
    for name, p in model.parameters():
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = f()
            p[idx] = old - h
            down = f()
            p[idx] = old
            num[idx] = (up - down) / (2 * h)
        worst = max(worst, _relative(grads[name], num))
    x = graph.vertex_features.copy()
    num = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        a, b = x.copy(), x.copy()
        a[idx] += h
        b[idx] -= h
        num[idx] = (f(a) - f(b)) / (2 * h)
    return max(worst, _relative(dx, num))


def layer_stack(kind, rng):
    if kind == "edgeconv":
        return [EdgeConv(4, [6, 5], rng=rng), Residual(EdgeConv(5, 5, rng=rng))], 0
    if kind == "edgeconv_e":
        return [EdgeConv(4, 5, edge_dim=2, rng=rng), Residual(EdgeConv(5, 5, edge_dim=2, rng=rng))], 2
    if kind == "maxpool":
        return [EdgeConv(4, 6, rng=rng), MaxPoolGroups(), Dense(6, 3, rng=rng)], 0
    if kind == "dense":
        return [Dense(4, 7, rng=rng, blocks=[(2, 3), (2, 4)]), Dense(7, 3, relu=False, rng=rng)], 0
    if kind == "readout":
        return [EdgeConv(4, 5, rng=rng), EdgeReadout(), Dense(10, 2, rng=rng)], 0
    raise ValueError(kind)


@st.composite
def prediction_sets(draw):
    seed = draw(st.integers(0, 2 ** 32 - 1))
    rng = np.random.default_rng(seed)
    n_gt = draw(st.integers(0, 5))
    n_pred = draw(st.integers(0, 7))
    gts = [rng.normal(0, 1000, (15, 3)) for _ in range(n_gt)]
    preds = []
    for _ in range(n_pred):
        if gts and rng.random() < 0.7:
            preds.append(gts[rng.integers(len(gts))] + rng.normal(0, rng.uniform(5, 120), (15, 3)))
        else:
            preds.append(rng.normal(0, 1000, (15, 3)))
    scores = rng.choice([0.1, 0.5, 0.9], size=n_pred) if rng.random() < 0.3 else rng.random(n_pred)
    return preds, scores, gts
