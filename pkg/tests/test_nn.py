import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from graphpose.errors import ContractError, TrainingDivergedError
from graphpose.nn import (Adam, Dense, EdgeConv, EdgeReadout, GnnModel, Graph, MaxPoolGroups,
                          Residual, adam_step, bce, l1, l2, layer_from_description)

from .helpers import gradient_errors, layer_stack, random_graph


def _identity_edgeconv(F):
    layer = EdgeConv(F, 2 * F)
    layer.params["W0"][...] = np.eye(2 * F)
    layer.params["b0"][...] = 0.0
    return layer


class TestEdgeConv:
    def test_single_vertex_self_loop_returns_input(self):
        layer = EdgeConv(3, 3)
        layer.params["W0"][...] = np.vstack([np.eye(3), np.zeros((3, 3))])
        x = np.array([[1.0, 2.0, 0.5]])
        y, _, _ = layer.forward(x, Graph(x))
        assert np.array_equal(y, x)

    def test_two_vertex_difference_channel(self):
        layer = EdgeConv(2, 2)
        layer.params["W0"][...] = np.vstack([np.zeros((2, 2)), np.eye(2)])
        x = np.array([[1.0, 5.0], [3.0, 2.0]])
        y, _, _ = layer.forward(x, Graph(x, [[0, 1], [1, 0]]))
        expected = np.maximum(0, x[::-1] - x)
        assert np.array_equal(y, expected)

    def test_neighbour_order_is_irrelevant(self):
        rng = np.random.default_rng(0)
        g = random_graph(rng, 12, 4)
        layer = EdgeConv(4, 6, rng=rng)
        perm = rng.permutation(g.n_edges)
        y1, _, _ = layer.forward(g.vertex_features, g)
        y2, _, _ = layer.forward(g.vertex_features, Graph(g.vertex_features, g.edges[perm]))
        assert np.array_equal(y1, y2)

    def test_isolated_vertex_without_self_loops_rejected(self):
        x = np.zeros((2, 1))
        with pytest.raises(ContractError):
            EdgeConv(1, 1).forward(x, Graph(x, [[0, 1]], self_loops=False))

    def test_accepts_any_vertex_count(self):
        layer = EdgeConv(3, 4)
        for n in (1, 3, 17):
            x = np.ones((n, 3))
            y, _, _ = layer.forward(x, Graph(x, [[i, (i + 1) % n] for i in range(n)]))
            assert y.shape == (n, 4)


class TestEdgeConvE:
    def test_edge_channel_hand_evaluation(self):
        layer = EdgeConv(1, 1, edge_dim=1)
        layer.params["W0"][...] = np.array([[0.0], [0.0], [1.0]])
        x = np.zeros((3, 1))
        edges = [[1, 0], [2, 0], [0, 1]]
        e = np.array([[2.0], [5.0], [3.0]])
        y, _, _ = layer.forward(x, Graph(x, edges, e))
        # self loops carry a zero edge feature
        assert np.array_equal(y[:, 0], [5.0, 3.0, 0.0])

    def test_zero_width_matches_plain(self):
        rng = np.random.default_rng(1)
        g = random_graph(rng, 10, 3)
        plain = EdgeConv(3, 5, rng=np.random.default_rng(2))
        e0 = EdgeConv(3, 5, edge_dim=0, rng=np.random.default_rng(2))
        g0 = Graph(g.vertex_features, g.edges, np.zeros((g.n_edges, 0)))
        assert np.array_equal(plain.forward(g.vertex_features, g)[0],
                              e0.forward(g.vertex_features, g0)[0])

    def test_missing_edge_features_rejected(self):
        x = np.zeros((2, 1))
        with pytest.raises(ContractError):
            EdgeConv(1, 1, edge_dim=2).forward(x, Graph(x, [[0, 1]]))

    def test_consistent_edge_permutation(self):
        rng = np.random.default_rng(3)
        g = random_graph(rng, 9, 2, edge_dim=3)
        layer = EdgeConv(2, 4, edge_dim=3, rng=rng)
        perm = rng.permutation(g.n_edges)
        g2 = Graph(g.vertex_features, g.edges[perm], g.edge_features[perm])
        assert np.array_equal(layer.forward(g.vertex_features, g)[0],
                              layer.forward(g.vertex_features, g2)[0])


class TestMaxPool:
    def test_pair_example(self):
        x = np.array([[1.0, 5.0], [3.0, 2.0]])
        y, _, _ = MaxPoolGroups().forward(x, Graph(x, vertex_groups=[0, 0]))
        assert np.array_equal(y, [[3.0, 5.0]])

    def test_singleton_groups_identity(self):
        x = np.random.default_rng(0).normal(size=(5, 3))
        y, _, _ = MaxPoolGroups().forward(x, Graph(x, vertex_groups=[3, 1, 0, 4, 2]))
        assert np.array_equal(y[[3, 1, 0, 4, 2]], x)

    def test_switches_to_coarse_graph(self):
        x = np.zeros((4, 1))
        coarse = Graph(np.zeros((2, 0)), [[0, 1]])
        _, g, _ = MaxPoolGroups().forward(x, Graph(x, vertex_groups=[0, 1, 0, 1], coarse=coarse))
        assert g is coarse

    def test_empty_group_rejected(self):
        x = np.zeros((3, 1))
        with pytest.raises(ContractError):
            MaxPoolGroups().forward(x, Graph(x, vertex_groups=[0, 2, 2]))

    def test_tie_routes_gradient_to_lowest_index(self):
        x = np.array([[1.0], [1.0]])
        layer = MaxPoolGroups()
        _, _, cache = layer.forward(x, Graph(x, vertex_groups=[0, 0]))
        dx, _ = layer.backward(np.array([[1.0]]), cache)
        assert np.array_equal(dx[:, 0], [1.0, 0.0])


@pytest.mark.parametrize("kind", ["edgeconv", "edgeconv_e", "maxpool", "dense", "readout"])
def test_finite_difference_gradients(kind):
    rng = np.random.default_rng(11)
    layers, edge_dim = layer_stack(kind, rng)
    graph = random_graph(rng, 30, 4, edge_dim=edge_dim, groups=6)
    model = GnnModel(layers)
    # zero-initialised biases put dead-ReLU rows exactly on the kink
    for name, p in model.parameters():
        if ".b" in name:
            p[...] = rng.normal(0.0, 0.1, size=p.shape)
    worst = gradient_errors(model, graph, rng)
    assert worst < 1e-4, worst


@pytest.mark.parametrize("loss", [bce, l2, l1])
def test_loss_gradients(loss):
    rng = np.random.default_rng(5)
    p = rng.uniform(0.05, 0.95, size=(7, 3))
    t = rng.uniform(0, 1, size=(7, 3)) if loss is not l1 else p + rng.choice([-0.3, 0.3], size=p.shape)
    _, g = loss(p, t)
    h = 1e-6
    num = np.zeros_like(p)
    for idx in np.ndindex(p.shape):
        a, b = p.copy(), p.copy()
        a[idx] += h
        b[idx] -= h
        num[idx] = (loss(a, t)[0] - loss(b, t)[0]) / (2 * h)
    assert np.abs(num - g).max() / max(np.abs(num).max(), 1e-12) < 1e-4


class TestLosses:
    def test_bce_half(self):
        loss, _ = bce(np.array([0.5]), np.array([1.0]))
        assert loss == pytest.approx(math.log(2), abs=1e-12)

    def test_l2_identical(self):
        x = np.arange(4.0)
        loss, g = l2(x, x)
        assert loss == 0 and not g.any()

    def test_l1_gradient_is_sign_over_n(self):
        p, t = np.array([1.0, -2.0, 3.0, 0.5]), np.array([0.0, 0.0, 4.0, 0.5])
        _, g = l1(p, t)
        assert np.array_equal(g, np.sign(p - t) / 4)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            l2(np.zeros(2), np.zeros(3))


class TestBackward:
    def test_zero_output_grad(self):
        rng = np.random.default_rng(0)
        model = GnnModel([EdgeConv(4, 5, rng=rng), MaxPoolGroups(), Dense(5, 2, rng=rng)])
        g = random_graph(rng, 12, 4, groups=3)
        out, cache = model.forward(g)
        grads, dx = model.backward(cache, np.zeros_like(out))
        assert all(not v.any() for v in grads.values()) and not dx.any()

    def test_gradients_invariant_to_neighbour_order(self):
        rng = np.random.default_rng(4)
        g = random_graph(rng, 15, 4)
        model = GnnModel([EdgeConv(4, 6, rng=rng)])
        perm = rng.permutation(g.n_edges)
        g2 = Graph(g.vertex_features, g.edges[perm])
        o1, c1 = model.forward(g)
        o2, c2 = model.forward(g2)
        up = rng.normal(size=o1.shape)
        g1, _ = model.backward(c1, up)
        gp, _ = model.backward(c2, up)
        for k in g1:
            assert np.allclose(g1[k], gp[k], rtol=0, atol=1e-12)

    def test_round_trip_description(self):
        model = GnnModel([Dense(3, 4, blocks=[(1, 2), (2, 2)]), Residual(EdgeConv(4, 4, edge_dim=1)),
                          MaxPoolGroups(), EdgeReadout()])
        again = GnnModel([layer_from_description(d) for d in model.describe()])
        assert again.describe() == model.describe()
        again.load_state_dict(model.state_dict())
        for (n1, a), (n2, b) in zip(model.parameters(), again.parameters()):
            assert n1 == n2 and np.array_equal(a, b)

    def test_state_shape_mismatch(self):
        model = GnnModel([Dense(3, 4)])
        with pytest.raises(ContractError):
            model.load_state_dict({"0.W": np.zeros((4, 4)), "0.b": np.zeros(4)})


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 20), st.integers(0, 10_000))
def test_permutation_equivariance(n, seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, n, 3, edge_dim=2)
    model = GnnModel([EdgeConv(3, 4, edge_dim=2, rng=rng), Residual(EdgeConv(4, 4, edge_dim=2, rng=rng))])
    perm = rng.permutation(n)
    inv = np.argsort(perm)
    g2 = Graph(g.vertex_features[perm], inv[g.edges], g.edge_features)
    y1, _ = model.forward(g)
    y2, _ = model.forward(g2)
    assert np.allclose(y2, y1[perm], rtol=0, atol=1e-12)


class TestAdam:
    def test_first_step_magnitude(self):
        p = np.array([0.0])
        adam_step([("w", p)], {"w": np.array([1.0])}, 1, {}, {}, lr=0.1)
        assert p[0] == pytest.approx(-0.1, rel=1e-6)

    def test_zero_gradient_keeps_parameters(self):
        p = np.array([1.5, -2.0])
        opt = Adam(lr=0.1)
        for _ in range(3):
            opt.step([("w", p)], {"w": np.zeros(2)})
        assert np.array_equal(p, [1.5, -2.0])

    def test_non_finite_gradient_raises(self):
        p = np.zeros(1)
        with pytest.raises(TrainingDivergedError):
            adam_step([("w", p)], {"w": np.array([np.nan])}, 1, {}, {})
        assert p[0] == 0.0

    def test_step_counter_starts_at_one(self):
        with pytest.raises(ContractError):
            adam_step([], {}, 0, {}, {})

    def test_bit_identical_runs(self):
        def run():
            rng = np.random.default_rng(9)
            model = GnnModel([EdgeConv(3, 4, rng=rng), MaxPoolGroups(), Dense(4, 1, relu=False, rng=rng)])
            g = random_graph(np.random.default_rng(1), 10, 3, groups=2)
            opt = Adam(lr=1e-2)
            for _ in range(5):
                out, cache = model.forward(g)
                _, d = l2(out, np.ones_like(out))
                grads, _ = model.backward(cache, d)
                opt.step(model.parameters(), grads)
            return model.state_dict()
        a, b = run(), run()
        assert all(np.array_equal(a[k], b[k]) for k in a)
