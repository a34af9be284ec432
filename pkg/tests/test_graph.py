import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import tiny_config
from pick_kie import autodiff as ad
from pick_kie.autodiff import ParamStore, Value, backward
from pick_kie.data import BBox
from pick_kie.graph import (
    graph_forward,
    graph_learning_loss,
    init_graph_params,
    init_relation_embedding,
    learn_adjacency,
    node_update,
    relation_features,
    relation_update,
    triplet_hidden,
    uniform_adjacency,
)


def boxes_and_lengths(rng, n):
    boxes = [
        BBox(x=rng.uniform(0, 200), y=rng.uniform(0, 200), w=rng.uniform(5, 60), h=rng.uniform(4, 20))
        for _ in range(n)
    ]
    lengths = rng.integers(1, 9, size=n).tolist()
    return boxes, lengths


class TestLearnAdjacency:
    def test_identical_nodes_uniform(self):
        nodes = Value(np.ones((3, 4)))
        w = Value(np.random.default_rng(0).normal(size=4))
        a = learn_adjacency(nodes, w)
        np.testing.assert_allclose(a.data, np.full((3, 3), 1 / 3), atol=1e-12)

    def test_single_node(self):
        a = learn_adjacency(Value(np.random.default_rng(1).normal(size=(1, 5))), Value(np.ones(5)))
        np.testing.assert_allclose(a.data, [[1.0]])

    def test_two_node_hand_evaluation(self):
        # pair scores: row [0, 10] -> softmax ~ [4.54e-5, 0.99995]
        nodes = Value(np.array([[0.0], [10.0]]))
        a = learn_adjacency(nodes, Value(np.array([1.0])))
        expected = np.exp([0.0, 10.0]) / np.exp([0.0, 10.0]).sum()
        np.testing.assert_allclose(a.data[0], expected, rtol=1e-12)
        assert a.data[0, 1] == pytest.approx(0.9999546021312976, rel=1e-10)

    def test_rows_stochastic_randomized(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            n = int(rng.integers(1, 7))
            a = learn_adjacency(Value(rng.normal(size=(n, 8))), Value(rng.normal(size=8)))
            assert (a.data >= 0).all()
            np.testing.assert_allclose(a.data.sum(axis=1), 1.0, atol=1e-6)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_rows_stochastic_property(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 6))
        a = learn_adjacency(Value(rng.normal(size=(n, 4)) * 3), Value(rng.normal(size=4)))
        assert (a.data >= 0).all()
        np.testing.assert_allclose(a.data.sum(axis=1), 1.0, atol=1e-6)


class TestGraphLearningLoss:
    def test_closed_form_fixture(self):
        # two identical nodes, uniform adjacency: exp(0.5) + 0.4
        nodes = Value(np.ones((2, 3)))
        a = Value(np.full((2, 2), 0.5))
        loss = graph_learning_loss(a, nodes, eta=1.0, gamma=0.4)
        assert float(loss.data) == pytest.approx(math.exp(0.5) + 0.4, abs=1e-9)

    def test_zero_adjacency_identical_nodes(self):
        nodes = Value(np.ones((3, 4)))
        a = Value(np.zeros((3, 3)))
        loss = graph_learning_loss(a, nodes, eta=1.0, gamma=0.0)
        assert float(loss.data) == pytest.approx(1.0)

    def test_distance_monotonicity(self):
        a = Value(np.full((2, 2), 0.5))
        near = graph_learning_loss(a, Value(np.array([[0.0, 0.0], [1.0, 0.0]])), eta=1.0, gamma=0.0)
        far = graph_learning_loss(a, Value(np.array([[0.0, 0.0], [2.0, 0.0]])), eta=1.0, gamma=0.0)
        assert float(far.data) > float(near.data)

    def test_mass_on_near_pair_decreases_loss(self):
        # v1 == v2 close, v3 far; swapping adjacency mass from the far pair
        # (1,3) onto the near pair (1,2) keeps ||A||_F and lowers the loss
        nodes = Value(np.array([[0.0, 0.0], [0.0, 0.0], [4.0, 0.0]]))
        base = np.full((3, 3), 0.2)
        far_heavy = base.copy()
        far_heavy[0, 1], far_heavy[0, 2] = 0.2, 0.7
        near_heavy = base.copy()
        near_heavy[0, 1], near_heavy[0, 2] = 0.7, 0.2
        loss_far = graph_learning_loss(Value(far_heavy), nodes, eta=1.0, gamma=0.4)
        loss_near = graph_learning_loss(Value(near_heavy), nodes, eta=1.0, gamma=0.4)
        assert float(loss_near.data) < float(loss_far.data)

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(3)
        store = ParamStore()
        nodes = store.add("nodes", rng.normal(size=(3, 4)) * 0.5)
        w = store.add("w", rng.normal(size=4))

        def loss():
            a = learn_adjacency(nodes, w)
            return graph_learning_loss(a, nodes, eta=1.0, gamma=0.4)

        errors = ad.check_gradients(loss, store)
        assert max(errors.values()) <= 1e-4, errors


class TestRelationFeatures:
    def test_hand_evaluation(self):
        i = BBox(x=0, y=0, w=10, h=5)
        j = BBox(x=20, y=10, w=10, h=10)
        feats = relation_features([i, j], [4, 8])
        np.testing.assert_allclose(feats[0, 1], [4.0, 2.0, 2.0, 2.0, 2.0, 2.0])

    def test_self_pair(self):
        b = BBox(x=7, y=9, w=12, h=4)
        feats = relation_features([b], [5])
        np.testing.assert_allclose(feats[0, 0], [0.0, 0.0, 3.0, 1.0, 3.0, 1.0])

    def test_scale_invariance(self):
        rng = np.random.default_rng(4)
        boxes, lengths = boxes_and_lengths(rng, 4)
        feats = relation_features(boxes, lengths)
        s = 3.7
        scaled = [BBox(b.x * s, b.y * s, b.w * s, b.h * s) for b in boxes]
        np.testing.assert_allclose(relation_features(scaled, lengths), feats, rtol=1e-12)

    def test_nonpositive_height_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            relation_features([BBox(0, 0, 5, 0)], [1])


class TestRelationEmbedding:
    def test_zero_weight(self):
        feats = np.random.default_rng(5).normal(size=(2, 2, 6))
        out = init_relation_embedding(feats, Value(np.zeros((4, 6))))
        assert not out.data.any()

    def test_linearity(self):
        rng = np.random.default_rng(6)
        feats = rng.normal(size=(3, 3, 6))
        w = Value(rng.normal(size=(5, 6)))
        np.testing.assert_allclose(
            init_relation_embedding(2.0 * feats, w).data,
            2.0 * init_relation_embedding(feats, w).data,
            rtol=1e-12,
        )

    def test_basis_extraction(self):
        w = Value(np.random.default_rng(7).normal(size=(4, 6)))
        feats = np.zeros((1, 1, 6))
        feats[0, 0, 0] = 1.0
        out = init_relation_embedding(feats, w)
        np.testing.assert_allclose(out.data[0, 0], w.data[:, 0])


class TestConvolutionOracles:
    """Straight-line duplicate implementations as the oracle."""

    def setup_method(self):
        rng = np.random.default_rng(8)
        self.rng = rng
        self.n, self.d = 4, 6
        self.nodes = rng.normal(size=(self.n, self.d))
        self.alpha = rng.normal(size=(self.n, self.n, self.d))
        self.w_self = rng.normal(size=(self.d, self.d))
        self.w_other = rng.normal(size=(self.d, self.d))
        self.w_node = rng.normal(size=(self.d, self.d))
        self.w_rel = rng.normal(size=(self.d, self.d))
        self.bias = rng.normal(size=self.d)

    def hidden_oracle(self):
        h = np.zeros((self.n, self.n, self.d))
        for i in range(self.n):
            for j in range(self.n):
                pre = (
                    self.w_self @ self.nodes[i]
                    + self.w_other @ self.nodes[j]
                    + self.alpha[i, j]
                    + self.bias
                )
                h[i, j] = np.maximum(pre, 0.0)
        return h

    def make_store(self):
        store = ParamStore()
        store.add("graph.layer0.w_self", self.w_self)
        store.add("graph.layer0.w_other", self.w_other)
        store.add("graph.layer0.w_node", self.w_node)
        store.add("graph.layer0.w_rel", self.w_rel)
        store.add("graph.layer0.bias", self.bias)
        return store

    def test_triplet_hidden_zero_case(self):
        store = ParamStore()
        store.add("graph.layer0.w_self", np.zeros((3, 3)))
        store.add("graph.layer0.w_other", np.zeros((3, 3)))
        store.add("graph.layer0.bias", np.zeros(3))
        out = triplet_hidden(Value(np.zeros((2, 3))), Value(np.zeros((2, 2, 3))), store, 0)
        assert not out.data.any()

    def test_triplet_hidden_negative_bias_clips(self):
        store = ParamStore()
        store.add("graph.layer0.w_self", np.zeros((3, 3)))
        store.add("graph.layer0.w_other", np.zeros((3, 3)))
        store.add("graph.layer0.bias", -np.ones(3))
        out = triplet_hidden(Value(np.zeros((2, 3))), Value(np.zeros((2, 2, 3))), store, 0)
        assert not out.data.any()

    def test_triplet_hidden_vs_oracle(self):
        store = self.make_store()
        out = triplet_hidden(Value(self.nodes), Value(self.alpha), store, 0)
        np.testing.assert_allclose(out.data, self.hidden_oracle(), atol=1e-12)

    def test_node_update_identity_adjacency(self):
        h = self.hidden_oracle()
        out = node_update(Value(np.eye(self.n)), Value(h), Value(self.w_node))
        expected = np.maximum(np.stack([h[i, i] @ self.w_node for i in range(self.n)]), 0.0)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_node_update_constant_rows_convexity(self):
        rng = np.random.default_rng(9)
        a = rng.dirichlet(np.ones(self.n), size=self.n)
        row = rng.normal(size=self.d)
        h = np.tile(row, (self.n, self.n, 1))
        out = node_update(Value(a), Value(h), Value(self.w_node))
        expected = np.maximum(row @ self.w_node, 0.0)
        for i in range(self.n):
            np.testing.assert_allclose(out.data[i], expected, atol=1e-12)

    def test_node_update_vs_oracle(self):
        rng = np.random.default_rng(10)
        a = rng.dirichlet(np.ones(self.n), size=self.n)
        h = self.hidden_oracle()
        out = node_update(Value(a), Value(h), Value(self.w_node))
        expected = np.zeros((self.n, self.d))
        for i in range(self.n):
            mix = sum(a[i, j] * h[i, j] for j in range(self.n))
            expected[i] = np.maximum(mix @ self.w_node, 0.0)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_relation_update_zero_weight(self):
        out = relation_update(Value(self.hidden_oracle()), Value(np.zeros((self.d, self.d))))
        assert not out.data.any()

    def test_relation_update_identity_on_nonnegative(self):
        h = self.hidden_oracle()  # rectified, so nonnegative
        out = relation_update(Value(h), Value(np.eye(self.d)))
        np.testing.assert_allclose(out.data, h, atol=1e-12)

    def test_relation_update_vs_oracle(self):
        h = self.hidden_oracle()
        out = relation_update(Value(h), Value(self.w_rel))
        expected = np.zeros_like(h)
        for i in range(self.n):
            for j in range(self.n):
                expected[i, j] = np.maximum(self.w_rel @ h[i, j], 0.0)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)


class TestGraphForward:
    def make(self, n=4, seed=11, layers=1):
        cfg = tiny_config(layers=layers)
        rng = np.random.default_rng(seed)
        store = ParamStore()
        init_graph_params(store, cfg, rng)
        x0 = Value(rng.normal(size=(n, cfg.d_model)) * 0.5, requires_grad=True)
        boxes, lengths = boxes_and_lengths(rng, n)
        return cfg, store, x0, boxes, lengths

    def test_composition_matches_manual_chaining(self):
        cfg, store, x0, boxes, lengths = self.make()
        nodes, adjacency, reg = graph_forward(x0, boxes, lengths, store, cfg)

        manual_a = learn_adjacency(x0, store["graph.w"])
        feats = relation_features(boxes, lengths)
        alpha = init_relation_embedding(feats, store["graph.rel0"])
        hidden = triplet_hidden(x0, alpha, store, 0)
        manual_nodes = node_update(manual_a, hidden, store["graph.layer0.w_node"])
        manual_reg = graph_learning_loss(manual_a, x0, cfg.eta, cfg.gamma)

        np.testing.assert_array_equal(nodes.data, manual_nodes.data)
        np.testing.assert_array_equal(adjacency.data, manual_a.data)
        np.testing.assert_array_equal(reg.data, manual_reg.data)

    def test_single_node_document(self):
        cfg, store, _, _, _ = self.make()
        x0 = Value(np.random.default_rng(0).normal(size=(1, cfg.d_model)))
        nodes, adjacency, _ = graph_forward(x0, [BBox(0, 0, 10, 5)], [3], store, cfg)
        np.testing.assert_allclose(adjacency.data, [[1.0]])
        assert nodes.shape == (1, cfg.d_model)

    def test_gradients_of_regularizer_wrt_w_and_inputs(self):
        cfg, store_params, x0, boxes, lengths = self.make()
        store = ParamStore()
        store.add("x0", x0.data.copy())
        store.add("w", store_params["graph.w"].data.copy())

        def loss():
            a = learn_adjacency(store["x0"], store["w"])
            return graph_learning_loss(a, store["x0"], cfg.eta, cfg.gamma)

        errors = ad.check_gradients(loss, store)
        assert max(errors.values()) <= 1e-4, errors

    def test_full_gradients_vs_finite_differences(self):
        cfg, store, x0, boxes, lengths = self.make()
        probe = np.random.default_rng(12).normal(size=(4, cfg.d_model))

        def loss():
            nodes, _, reg = graph_forward(x0, boxes, lengths, store, cfg)
            return ad.reduce_sum(nodes * Value(probe)) + reg

        errors = ad.check_gradients(loss, store)
        assert max(errors.values()) <= 1e-4, errors

    def test_permutation_equivariance(self):
        cfg, store, x0, boxes, lengths = self.make(n=5)
        nodes, adjacency, reg = graph_forward(x0, boxes, lengths, store, cfg)
        perm = np.random.default_rng(13).permutation(5)
        x0p = Value(x0.data[perm])
        nodes_p, adjacency_p, reg_p = graph_forward(
            x0p, [boxes[i] for i in perm], [lengths[i] for i in perm], store, cfg
        )
        assert np.abs(nodes_p.data - nodes.data[perm]).max() <= 1e-10
        assert np.abs(adjacency_p.data - adjacency.data[np.ix_(perm, perm)]).max() <= 1e-10
        assert abs(float(reg_p.data) - float(reg.data)) <= 1e-10

    def test_two_layers_run(self):
        cfg, store, x0, boxes, lengths = self.make(layers=2)
        nodes, _, _ = graph_forward(x0, boxes, lengths, store, cfg)
        assert nodes.shape == x0.shape
        assert np.isfinite(nodes.data).all()

    def test_ablated_graph_learning_uniform(self):
        cfg, store, x0, boxes, lengths = self.make()
        cfg.ablate_graph_learning = True
        nodes, adjacency, reg = graph_forward(x0, boxes, lengths, store, cfg)
        np.testing.assert_allclose(adjacency.data, uniform_adjacency(4).data)
        assert float(reg.data) == 0.0

    def test_relearn_adjacency_flag_changes_result(self):
        cfg, store, x0, boxes, lengths = self.make(layers=2)
        nodes_fixed, _, _ = graph_forward(x0, boxes, lengths, store, cfg)
        cfg.relearn_adjacency = True
        nodes_relearn, _, _ = graph_forward(x0, boxes, lengths, store, cfg)
        assert np.abs(nodes_fixed.data - nodes_relearn.data).max() > 0
