"""A small numpy graph-network engine with hand-written backpropagation.

Layers operate on a vertex-feature matrix together with the :class:`Graph`
that carries the connectivity. Each layer exposes ``forward(x, graph)``
returning ``(y, graph_out, cache)`` and ``backward(dy, cache)`` returning
``(dx, grads)``. :class:`GnnModel` chains them.

Neighbourhoods always include a self-loop (zero relative feature, zero edge
feature) unless a graph is built with ``self_loops=False``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ContractError, TrainingDivergedError

# ---------------------------------------------------------------------------
# Graph container
# ---------------------------------------------------------------------------


class Graph:
    """Attributed directed graph.

    Parameters
    ----------
    vertex_features : (V, F) array
    edges : (E, 2) int array of ``(src, dst)``; messages flow src -> dst
    edge_features : (E, Fe) array or None
    vertex_groups : (V,) int array of pooling labels ``0..G-1`` or None
    coarse : Graph or None
        Connectivity used after :class:`MaxPoolGroups`; its vertex count must
        equal the number of groups. Its ``vertex_features`` are ignored.
    """

    def __init__(self, vertex_features, edges=None, edge_features=None,
                 vertex_groups=None, coarse: Optional["Graph"] = None, self_loops: bool = True):
        x = np.asarray(vertex_features, dtype=np.float64)
        if x.ndim != 2:
            raise ContractError("vertex_features must be a 2-D array")
        V = x.shape[0]
        e = np.zeros((0, 2), dtype=np.int64) if edges is None else np.asarray(edges, dtype=np.int64)
        e = e.reshape(-1, 2)
        if len(e) and (e.min() < 0 or e.max() >= V):
            raise ContractError("edge endpoint out of range")
        if edge_features is not None:
            edge_features = np.asarray(edge_features, dtype=np.float64)
            if edge_features.ndim != 2 or len(edge_features) != len(e):
                edge_features = edge_features.reshape(len(e), -1)
        if vertex_groups is not None:
            vertex_groups = np.asarray(vertex_groups, dtype=np.int64).reshape(V)
        self.vertex_features = x
        self.edges = e
        self.edge_features = edge_features
        self.vertex_groups = vertex_groups
        self.coarse = coarse
        self.self_loops = self_loops
        self._agg = None
        self._pool = None

    @property
    def n_vertices(self) -> int:
        return self.vertex_features.shape[0]

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def with_features(self, x) -> "Graph":
        g = Graph.__new__(Graph)
        g.__dict__.update(self.__dict__)
        g.vertex_features = np.asarray(x, dtype=np.float64)
        return g

    def aggregation(self) -> "_Aggregation":
        if self._agg is None:
            self._agg = _Aggregation.build(self)
        return self._agg

    def pooling(self) -> "_Pooling":
        if self._pool is None:
            if self.vertex_groups is None:
                raise ContractError("graph has no vertex_groups to pool over")
            self._pool = _Pooling.build(self.vertex_groups)
        return self._pool

    @staticmethod
    def batch(graphs: Sequence["Graph"]) -> "Graph":
        """Disjoint union; edges, groups and coarse graphs are re-indexed."""
        if not graphs:
            raise ContractError("cannot batch zero graphs")
        if len(graphs) == 1:
            return graphs[0]
        offs = np.cumsum([0] + [g.n_vertices for g in graphs])
        edges = np.concatenate([g.edges + o for g, o in zip(graphs, offs)])
        has_ef = [g.edge_features is not None for g in graphs]
        if any(has_ef) and not all(has_ef):
            raise ContractError("mixed presence of edge features in batch")
        ef = np.concatenate([g.edge_features for g in graphs]) if all(has_ef) else None
        groups = coarse = None
        if all(g.vertex_groups is not None for g in graphs):
            goffs = np.cumsum([0] + [int(g.vertex_groups.max()) + 1 if g.n_vertices else 0 for g in graphs])
            groups = np.concatenate([g.vertex_groups + o for g, o in zip(graphs, goffs)])
            if all(g.coarse is not None for g in graphs):
                coarse = Graph.batch([g.coarse for g in graphs])
        return Graph(np.concatenate([g.vertex_features for g in graphs]), edges, ef, groups,
                     coarse, graphs[0].self_loops)


@dataclass
class _Aggregation:
    """Edge ordering and incidence operators for max aggregation."""

    src: np.ndarray          # sorted by (dst, src), self loops included
    dst: np.ndarray
    orig: np.ndarray         # index into graph.edges, -1 for self loops
    starts: np.ndarray       # segment start per vertex
    dst_op: sp.csr_matrix    # (V, E_all) sums edge rows into destinations
    src_op: sp.csr_matrix

    @classmethod
    def build(cls, g: Graph) -> "_Aggregation":
        V = g.n_vertices
        src, dst = g.edges[:, 0], g.edges[:, 1]
        orig = np.arange(len(src))
        if g.self_loops:
            loops = np.arange(V)
            src = np.concatenate([src, loops])
            dst = np.concatenate([dst, loops])
            orig = np.concatenate([orig, -np.ones(V, dtype=np.int64)])
        order = np.lexsort((src, dst))
        src, dst, orig = src[order], dst[order], orig[order]
        counts = np.bincount(dst, minlength=V)
        if V and counts.min() == 0:
            raise ContractError("vertex with empty neighbourhood; max aggregation undefined")
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
        E = len(src)
        ones = np.ones(E)
        dst_op = sp.csr_matrix((ones, (dst, np.arange(E))), shape=(V, E))
        src_op = sp.csr_matrix((ones, (src, np.arange(E))), shape=(V, E))
        return cls(src, dst, orig, starts, dst_op, src_op)

    def edge_features(self, g: Graph, width: int) -> np.ndarray:
        out = np.zeros((len(self.src), width))
        if width:
            real = self.orig >= 0
            out[real] = g.edge_features[self.orig[real]]
        return out


@dataclass
class _Pooling:
    order: np.ndarray
    starts: np.ndarray
    n_groups: int

    @classmethod
    def build(cls, groups: np.ndarray) -> "_Pooling":
        G = int(groups.max()) + 1 if len(groups) else 0
        counts = np.bincount(groups, minlength=G)
        if G and counts.min() == 0:
            raise ContractError("empty pooling group")
        order = np.argsort(groups, kind="stable")
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
        return cls(order, starts, G)


def _segment_argmax(values: np.ndarray, starts: np.ndarray):
    """Per-segment column max and the first row index attaining it."""
    out = np.maximum.reduceat(values, starts, axis=0)
    seg = np.repeat(np.arange(len(starts)), np.diff(np.append(starts, len(values))))
    rows = np.arange(len(values))[:, None]
    pos = np.where(values == out[seg], rows, len(values))
    arg = np.minimum.reduceat(pos, starts, axis=0)
    return out, arg


def _scatter_argmax(dy: np.ndarray, arg: np.ndarray, n_rows: int) -> np.ndarray:
    grad = np.zeros((n_rows, dy.shape[1]))
    cols = np.broadcast_to(np.arange(dy.shape[1]), arg.shape)
    grad[arg, cols] = dy
    return grad


def _relu(x):
    return np.maximum(x, 0.0)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def _init(rng, fan_in, fan_out):
    return rng.normal(0.0, np.sqrt(2.0 / max(fan_in, 1)), size=(fan_in, fan_out))


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}

    def describe(self) -> dict:
        return {"kind": self.kind}

    def forward(self, x, graph):
        raise NotImplementedError

    def backward(self, dy, cache):
        raise NotImplementedError


class Dense(Layer):
    """Row-wise affine map with optional ReLU.

    ``blocks`` makes the weight block-diagonal: a list of ``(in, out)`` widths
    whose input column ranges are mapped independently and concatenated.
    """

    kind = "dense"

    def __init__(self, n_in, n_out, relu=True, rng=None, blocks=None):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        self.n_in, self.n_out, self.relu = int(n_in), int(n_out), bool(relu)
        self.blocks = [tuple(map(int, b)) for b in blocks] if blocks else None
        W = _init(rng, self.n_in, self.n_out)
        self.mask = None
        if self.blocks:
            if sum(b[0] for b in self.blocks) != self.n_in or sum(b[1] for b in self.blocks) != self.n_out:
                raise ContractError("block widths do not sum to layer widths")
            mask = np.zeros((self.n_in, self.n_out))
            i = o = 0
            for bi, bo in self.blocks:
                mask[i:i + bi, o:o + bo] = 1.0
                W[i:i + bi, o:o + bo] = _init(rng, bi, bo)
                i, o = i + bi, o + bo
            self.mask = mask
            W *= mask
        self.params = {"W": W, "b": np.zeros(self.n_out)}

    def describe(self):
        return {"kind": self.kind, "n_in": self.n_in, "n_out": self.n_out, "relu": self.relu,
                "blocks": [list(b) for b in self.blocks] if self.blocks else None}

    def forward(self, x, graph):
        if x.shape[1] != self.n_in:
            raise ContractError(f"dense layer expects width {self.n_in}, got {x.shape[1]}")
        W = self.params["W"] if self.mask is None else self.params["W"] * self.mask
        pre = x @ W + self.params["b"]
        y = _relu(pre) if self.relu else pre
        return y, graph, (x, pre)

    def backward(self, dy, cache):
        x, pre = cache
        g = dy * (pre > 0) if self.relu else dy
        dW = x.T @ g
        W = self.params["W"]
        if self.mask is not None:
            dW *= self.mask
            W = W * self.mask
        return g @ W.T, {"W": dW, "b": g.sum(axis=0)}


class EdgeConv(Layer):
    """``x_v <- max_{v' in N(v)} h(concat(x_v, x_v' - x_v[, e_vv']))``.

    ``h`` is a stack of affine+ReLU layers with widths ``hidden``. With
    ``edge_dim > 0`` this is the edge-attributed variant (EdgeConv-E).
    """

    kind = "edgeconv"

    def __init__(self, n_in, hidden: Sequence[int] | int, edge_dim=0, rng=None):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        hidden = [int(hidden)] if np.isscalar(hidden) else [int(h) for h in hidden]
        self.n_in, self.edge_dim, self.hidden = int(n_in), int(edge_dim), hidden
        widths = [2 * self.n_in + self.edge_dim] + hidden
        for i in range(len(hidden)):
            self.params[f"W{i}"] = _init(rng, widths[i], widths[i + 1])
            self.params[f"b{i}"] = np.zeros(widths[i + 1])

    @property
    def n_out(self):
        return self.hidden[-1]

    def describe(self):
        return {"kind": self.kind, "n_in": self.n_in, "hidden": list(self.hidden),
                "edge_dim": self.edge_dim}

    def forward(self, x, graph: Graph):
        F = self.n_in
        if x.shape[1] != F:
            raise ContractError(f"edgeconv expects width {F}, got {x.shape[1]}")
        if self.edge_dim:
            if graph.edge_features is None:
                raise ContractError("EdgeConv-E layer needs edge_features")
            if graph.edge_features.shape[1] != self.edge_dim:
                raise ContractError("edge feature width mismatch")
        agg = graph.aggregation()
        W0 = self.params["W0"]
        Wa, Wb, We = W0[:F], W0[F:2 * F], W0[2 * F:]
        # concat(x_dst, x_src - x_dst) @ [Wa; Wb] == x_dst @ (Wa - Wb) + x_src @ Wb
        pre = (x @ (Wa - Wb))[agg.dst] + (x @ Wb)[agg.src] + self.params["b0"]
        e = None
        if self.edge_dim:
            e = agg.edge_features(graph, self.edge_dim)
            pre = pre + e @ We
        acts = [pre]
        h = _relu(pre)
        for i in range(1, len(self.hidden)):
            pre_i = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            acts.append(pre_i)
            h = _relu(pre_i)
        out, arg = _segment_argmax(h, agg.starts)
        return out, graph, (x, agg, e, acts, arg)

    def backward(self, dy, cache):
        x, agg, e, acts, arg = cache
        F = self.n_in
        grads = {}
        g = _scatter_argmax(dy, arg, len(agg.src))
        for i in range(len(self.hidden) - 1, 0, -1):
            g = g * (acts[i] > 0)
            h_prev = _relu(acts[i - 1])
            grads[f"W{i}"] = h_prev.T @ g
            grads[f"b{i}"] = g.sum(axis=0)
            g = g @ self.params[f"W{i}"].T
        g = g * (acts[0] > 0)
        G_dst = agg.dst_op @ g
        G_src = agg.src_op @ g
        W0 = self.params["W0"]
        Wa, Wb = W0[:F], W0[F:2 * F]
        dW0 = np.zeros_like(W0)
        dW0[:F] = x.T @ G_dst
        dW0[F:2 * F] = x.T @ (G_src - G_dst)
        if self.edge_dim:
            dW0[2 * F:] = e.T @ g
        grads["W0"] = dW0
        grads["b0"] = g.sum(axis=0)
        dx = G_dst @ (Wa - Wb).T + G_src @ Wb.T
        return dx, grads


class MaxPoolGroups(Layer):
    """Element-wise max over each vertex group; continues on ``graph.coarse``."""

    kind = "maxpool"

    def forward(self, x, graph: Graph):
        pool = graph.pooling()
        out, arg = _segment_argmax(x[pool.order], pool.starts)
        coarse = graph.coarse if graph.coarse is not None else Graph(np.zeros((pool.n_groups, 0)))
        return out, coarse, (x.shape[0], pool, arg)

    def backward(self, dy, cache):
        n, pool, arg = cache
        g_sorted = _scatter_argmax(dy, arg, n)
        dx = np.zeros_like(g_sorted)
        dx[pool.order] = g_sorted
        return dx, {}


class EdgeReadout(Layer):
    """Per-edge rows ``concat(x_dst, x_src - x_dst)`` over the graph's own
    (non-self-loop) edges, in ``graph.edges`` order."""

    kind = "edge_readout"

    def forward(self, x, graph: Graph):
        src, dst = graph.edges[:, 0], graph.edges[:, 1]
        y = np.hstack([x[dst], x[src] - x[dst]])
        return y, None, (x.shape, src, dst)

    def backward(self, dy, cache):
        shape, src, dst = cache
        F = shape[1]
        a, b = dy[:, :F], dy[:, F:]
        dx = np.zeros(shape)
        np.add.at(dx, dst, a - b)
        np.add.at(dx, src, b)
        return dx, {}


class Residual(Layer):
    """``y = inner(x) + x``; requires matching widths."""

    kind = "residual"

    def __init__(self, inner: Layer):
        super().__init__()
        self.inner = inner
        self.params = inner.params

    def describe(self):
        return {"kind": self.kind, "inner": self.inner.describe()}

    def forward(self, x, graph):
        y, g_out, cache = self.inner.forward(x, graph)
        if y.shape != x.shape:
            raise ContractError("residual connection needs equal input/output widths")
        return y + x, g_out, cache

    def backward(self, dy, cache):
        dx, grads = self.inner.backward(dy, cache)
        return dx + dy, grads


def layer_from_description(d: dict) -> Layer:
    kind = d["kind"]
    if kind == "dense":
        return Dense(d["n_in"], d["n_out"], d["relu"], blocks=d.get("blocks"))
    if kind == "edgeconv":
        return EdgeConv(d["n_in"], d["hidden"], d["edge_dim"])
    if kind == "maxpool":
        return MaxPoolGroups()
    if kind == "edge_readout":
        return EdgeReadout()
    if kind == "residual":
        return Residual(layer_from_description(d["inner"]))
    raise ContractError(f"unknown layer kind {kind!r}")


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


class GnnModel:
    """Ordered stack of layers applied to a graph's vertex features."""

    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)

    def describe(self) -> list[dict]:
        return [layer.describe() for layer in self.layers]

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        """Flat ``(name, array)`` list; arrays are the live parameter buffers."""
        out = []
        for i, layer in enumerate(self.layers):
            for name in sorted(layer.params):
                out.append((f"{i}.{name}", layer.params[name]))
        return out

    def n_parameters(self) -> int:
        return sum(p.size for _, p in self.parameters())

    def zero_(self) -> "GnnModel":
        for _, p in self.parameters():
            p[...] = 0.0
        return self

    def forward(self, graph: Graph, x=None):
        """Returns ``(output, cache)``; ``x`` overrides ``graph.vertex_features``."""
        h = graph.vertex_features if x is None else x
        g = graph
        caches = []
        for layer in self.layers:
            h, g, c = layer.forward(h, g)
            caches.append(c)
        return h, caches

    def backward(self, cache, output_grad) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Returns ``(gradients by parameter name, input gradient)``."""
        grads: dict[str, np.ndarray] = {}
        g = np.asarray(output_grad, dtype=np.float64)
        for i in range(len(self.layers) - 1, -1, -1):
            g, lg = self.layers[i].backward(g, cache[i])
            for name, val in lg.items():
                grads[f"{i}.{name}"] = val
        for name, p in self.parameters():
            if name not in grads:
                grads[name] = np.zeros_like(p)
            elif grads[name].shape != p.shape:
                raise ContractError(f"gradient shape mismatch for {name}")
        return grads, g

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.copy() for name, p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.parameters())
        if set(params) != set(state):
            raise ContractError("parameter names do not match architecture")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ContractError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p[...] = arr


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

BCE_EPS = 1e-7


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def bce(pred, target):
    """Mean binary cross-entropy on probabilities; returns ``(loss, dloss/dpred)``."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ContractError("bce shapes differ")
    pc = np.clip(p, BCE_EPS, 1 - BCE_EPS)
    n = p.size
    loss = -np.mean(t * np.log(pc) + (1 - t) * np.log(1 - pc))
    grad = (pc - t) / (pc * (1 - pc)) / n
    grad = np.where((p < BCE_EPS) | (p > 1 - BCE_EPS), 0.0, grad)
    return float(loss), grad


def l2(pred, target):
    """Mean squared error; returns ``(loss, grad)``."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ContractError("l2 shapes differ")
    diff = p - t
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


def l1(pred, target):
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ContractError("l1 shapes differ")
    diff = p - t
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


# ---------------------------------------------------------------------------
# Optimiser
# ---------------------------------------------------------------------------


@dataclass
class Adam:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: Sequence[tuple[str, np.ndarray]], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        adam_step(params, grads, self.t, self.m, self.v, self.lr, self.beta1, self.beta2, self.eps)


def adam_step(params, grads, t, m, v, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place bias-corrected Adam update of ``params`` (name, array) pairs.

    ``m`` and ``v`` are the moment dicts, updated in place.
    """
    if t < 1:
        raise ContractError("Adam step counter starts at 1")
    for name, _ in params:
        if not np.all(np.isfinite(grads[name])):
            raise TrainingDivergedError(f"non-finite gradient for {name}")
    for name, p in params:
        g = grads[name]
        m[name] = beta1 * m.get(name, 0.0) + (1 - beta1) * g
        v[name] = beta2 * v.get(name, 0.0) + (1 - beta2) * g * g
        m_hat = m[name] / (1 - beta1 ** t)
        v_hat = v[name] / (1 - beta2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
