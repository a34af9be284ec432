"""Soft graph over segments: learned row-stochastic adjacency, a sparsity/
distance regularizer, and edge-conditioned convolution over
(node, relation, node) triplets.

Pairwise geometry enters through six scale-free features per ordered pair;
everything else is learned.  All pair computations are vectorized over the
full NxN grid, diagonal included.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Value
from .config import ModelConfig
from .data import BBox
from .encoding import xavier_uniform

LEAKY_SLOPE = 0.01  # fixed negative slope of the adjacency scorer


def init_graph_params(store: ParamStore, cfg: ModelConfig, rng: np.random.Generator) -> None:
    d = cfg.d_model
    store.add("graph.w", xavier_uniform(rng, (d,), d, 1))
    store.add("graph.rel0", xavier_uniform(rng, (d, 6), 6, d))
    for layer in range(cfg.layers):
        p = f"graph.layer{layer}"
        store.add(f"{p}.w_self", xavier_uniform(rng, (d, d), d, d))
        store.add(f"{p}.w_other", xavier_uniform(rng, (d, d), d, d))
        store.add(f"{p}.w_node", xavier_uniform(rng, (d, d), d, d))
        store.add(f"{p}.w_rel", xavier_uniform(rng, (d, d), d, d))
        store.add(f"{p}.bias", np.zeros(d))


def learn_adjacency(nodes: Value, w: Value) -> Value:
    """Row-stochastic NxN adjacency from pairwise feature distances.

    Pair score is a leaky-rectified projection of |v_i - v_j|; each row is
    then softmaxed, so every row sums to one with nonnegative entries.
    """
    n, d = nodes.shape
    diffs = ad.absval(ad.reshape(nodes, (n, 1, d)) - ad.reshape(nodes, (1, n, d)))
    scores = ad.reshape(diffs @ ad.reshape(w, (d, 1)), (n, n))
    return ad.softmax(ad.leaky_relu(scores, LEAKY_SLOPE), axis=-1)


def graph_learning_loss(adjacency: Value, nodes: Value, eta: float, gamma: float) -> Value:
    """Mean of exp(A_ij + eta * ||v_i - v_j||^2) plus gamma * ||A||_F^2."""
    n, d = nodes.shape
    diffs = ad.reshape(nodes, (n, 1, d)) - ad.reshape(nodes, (1, n, d))
    sq_dist = (diffs * diffs).sum(axis=2)
    penalty = ad.exp(adjacency + sq_dist * eta).mean()
    return penalty + ad.sum_squares(adjacency) * gamma


def relation_features(boxes: list[BBox], lengths) -> np.ndarray:
    """Six geometry/length features per ordered pair, [N, N, 6].

    Offsets and sizes are normalized by the source box height, so uniform
    scaling of all geometry leaves the features unchanged.
    """
    n = len(boxes)
    lengths = np.asarray(lengths, dtype=np.float64)
    if len(lengths) != n:
        raise ValueError(f"{n} boxes vs {len(lengths)} lengths")
    x = np.array([b.x for b in boxes])
    y = np.array([b.y for b in boxes])
    w = np.array([b.w for b in boxes])
    h = np.array([b.h for b in boxes])
    if (h <= 0).any() or (w <= 0).any():
        raise ValueError("relation_features: boxes must have positive width and height")
    if (lengths < 1).any():
        raise ValueError("relation_features: segment lengths must be >= 1")
    h_i = h[:, None]
    feats = np.empty((n, n, 6))
    feats[:, :, 0] = (x[None, :] - x[:, None]) / h_i
    feats[:, :, 1] = (y[None, :] - y[:, None]) / h_i
    feats[:, :, 2] = np.broadcast_to((w / h)[:, None], (n, n))
    feats[:, :, 3] = h[None, :] / h_i
    feats[:, :, 4] = w[None, :] / h_i
    feats[:, :, 5] = lengths[None, :] / lengths[:, None]
    return feats


def init_relation_embedding(feats: np.ndarray, w_rel0: Value) -> Value:
    """Linear map of each pair's 6-vector into d_model, [N, N, d_model]."""
    n = feats.shape[0]
    flat = Value(feats.reshape(n * n, 6))
    return ad.reshape(flat @ ad.transpose(w_rel0), (n, n, -1))


def triplet_hidden(nodes: Value, relations: Value, store: ParamStore, layer: int) -> Value:
    """Rectified pair features from (v_i, relation_ij, v_j), [N, N, d_model]."""
    n, d = nodes.shape
    p = f"graph.layer{layer}"
    from_self = ad.reshape(nodes @ ad.transpose(store[f"{p}.w_self"]), (n, 1, d))
    from_other = ad.reshape(nodes @ ad.transpose(store[f"{p}.w_other"]), (1, n, d))
    bias = ad.reshape(store[f"{p}.bias"], (1, 1, d))
    return ad.relu(from_self + from_other + relations + bias)


def node_update(adjacency: Value, hidden: Value, w_node: Value) -> Value:
    """Adjacency-weighted mix of pair features, then a rectified linear map."""
    n = hidden.shape[0]
    mixed = (ad.reshape(adjacency, (n, n, 1)) * hidden).sum(axis=1)
    return ad.relu(mixed @ w_node)


def relation_update(hidden: Value, w_rel: Value) -> Value:
    """Next-layer relation embeddings: per-pair rectified linear map."""
    n, _, d = hidden.shape
    flat = ad.reshape(hidden, (n * n, d))
    return ad.reshape(ad.relu(flat @ ad.transpose(w_rel)), (n, n, d))


def uniform_adjacency(n: int) -> Value:
    return Value(np.full((n, n), 1.0 / n))


def graph_forward(
    x0: Value,
    boxes: list[BBox],
    lengths,
    store: ParamStore,
    cfg: ModelConfig,
) -> tuple[Value, Value, Value]:
    """Compose adjacency learning with ``cfg.layers`` rounds of convolution.

    Returns (final node embeddings, adjacency, regularizer loss).  The
    adjacency is learned once from the input nodes and reused across layers
    unless ``cfg.relearn_adjacency`` is set.  With graph learning ablated the
    adjacency is the uniform 1/N matrix and the regularizer is dropped.
    """
    n = x0.shape[0]
    feats = relation_features(boxes, lengths)
    relations = init_relation_embedding(feats, store["graph.rel0"])
    nodes = x0
    if cfg.ablate_graph_learning:
        adjacency = uniform_adjacency(n)
        reg_loss = Value(0.0)
    else:
        adjacency = learn_adjacency(nodes, store["graph.w"])
        reg_loss = graph_learning_loss(adjacency, nodes, cfg.eta, cfg.gamma)
    first_adjacency = adjacency
    for layer in range(cfg.layers):
        if layer > 0 and cfg.relearn_adjacency and not cfg.ablate_graph_learning:
            adjacency = learn_adjacency(nodes, store["graph.w"])
        hidden = triplet_hidden(nodes, relations, store, layer)
        nodes = node_update(adjacency, hidden, store[f"graph.layer{layer}.w_node"])
        relations = relation_update(hidden, store[f"graph.layer{layer}.w_rel"])
    return nodes, first_adjacency, reg_loss
