"""Union packing, BiLSTM emissions, and linear-chain CRF scoring/decoding.

All segments' characters are packed into one document-level sequence in
reading order, each timestep carrying its character feature concatenated
with its segment's node embedding.  A bidirectional LSTM produces per-tag
emission scores; a CRF over tags plus virtual start/end states supplies the
training loss and the decoded tag path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Value
from .config import ModelConfig
from .encoding import maybe_dropout, xavier_uniform


@dataclass
class PackedSequence:
    """features: [(N*T), d_in]; the valid prefix is the packed document."""

    features: Value
    mask: np.ndarray  # bool per timestep
    seg_of: np.ndarray  # segment index per timestep, -1 at padding
    lengths: list[int]

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())


@dataclass
class Emissions:
    """scores: [(N*T), K]; rows beyond n_valid are zero padding."""

    scores: Value
    n_valid: int


class TransitionMatrix:
    """(K+2)x(K+2) transition scores with virtual start/end states.

    The last two indices are the start and end states; transitions into
    start and out of end are masked to a large negative constant.
    """

    def __init__(self, param: Value, n_tags: int):
        if param.shape != (n_tags + 2, n_tags + 2):
            raise ad.ShapeError(
                f"transition matrix shape {param.shape} != ({n_tags + 2}, {n_tags + 2})"
            )
        self.param = param
        self.n_tags = n_tags
        self.sos = n_tags
        self.eos = n_tags + 1

    def _mask(self) -> np.ndarray:
        m = np.zeros((self.n_tags + 2, self.n_tags + 2))
        m[:, self.sos] = ad.neg_inf()
        m[self.eos, :] = ad.neg_inf()
        return m

    def scores(self) -> Value:
        return self.param + Value(self._mask())

    def matrix(self) -> np.ndarray:
        return self.param.data + self._mask()


def init_decoder_params(store: ParamStore, cfg: ModelConfig, n_tags: int, rng: np.random.Generator) -> None:
    h = cfg.d_hidden
    d_in = 2 * cfg.d_model
    for layer in range(cfg.lstm_layers):
        for direction in ("fwd", "bwd"):
            p = f"decoder.lstm{layer}.{direction}"
            store.add(f"{p}.w_in", xavier_uniform(rng, (d_in, 4 * h), d_in, 4 * h))
            store.add(f"{p}.w_rec", xavier_uniform(rng, (h, 4 * h), h, 4 * h))
            store.add(f"{p}.bias", np.zeros(4 * h))
        d_in = 2 * h
    store.add("decoder.w_out", xavier_uniform(rng, (2 * h, n_tags), 2 * h, n_tags))
    store.add("decoder.transitions", np.zeros((n_tags + 2, n_tags + 2)))


def pack(x: Value, node_embeddings: Value, lengths) -> PackedSequence:
    """Concatenate valid character rows in reading order, each joined with
    its segment's node embedding; padding rows sit at the tail, mask false."""
    n, t, d = x.shape
    lengths = [int(l) for l in lengths]
    if any(l > t or l < 1 for l in lengths):
        raise ad.ShapeError(f"pack: lengths {lengths} out of range for T={t}")
    seg_idx = np.concatenate([np.full(l, i, dtype=np.int64) for i, l in enumerate(lengths)])
    pos_idx = np.concatenate([np.arange(l, dtype=np.int64) for l in lengths])
    m = seg_idx.size
    total = n * t
    char_rows = ad.take(ad.reshape(x, (total, d)), seg_idx * t + pos_idx)
    node_rows = ad.take(node_embeddings, seg_idx)
    feats = ad.concat([char_rows, node_rows], axis=1)
    if total > m:
        feats = ad.concat([feats, Value(np.zeros((total - m, feats.shape[1])))], axis=0)
    mask = np.arange(total) < m
    seg_of = np.concatenate([seg_idx, np.full(total - m, -1, dtype=np.int64)])
    return PackedSequence(features=feats, mask=mask, seg_of=seg_of, lengths=lengths)


def _lstm_direction(xs: Value, store: ParamStore, prefix: str, h_size: int, reverse: bool) -> list[Value]:
    m = xs.shape[0]
    w_in = store[f"{prefix}.w_in"]
    w_rec = store[f"{prefix}.w_rec"]
    bias = store[f"{prefix}.bias"]
    h = Value(np.zeros((1, h_size)))
    c = Value(np.zeros((1, h_size)))
    outputs: list[Value | None] = [None] * m
    order = range(m - 1, -1, -1) if reverse else range(m)
    for t in order:
        gates = xs[t : t + 1] @ w_in + h @ w_rec + bias
        i_gate = ad.sigmoid(gates[:, :h_size])
        f_gate = ad.sigmoid(gates[:, h_size : 2 * h_size])
        g_cell = ad.tanh(gates[:, 2 * h_size : 3 * h_size])
        o_gate = ad.sigmoid(gates[:, 3 * h_size :])
        c = f_gate * c + i_gate * g_cell
        h = o_gate * ad.tanh(c)
        outputs[t] = h
    return outputs  # type: ignore[return-value]


def bilstm_emissions(
    packed: PackedSequence,
    store: ParamStore,
    cfg: ModelConfig,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> Emissions:
    """Per-tag scores for every valid timestep, zero rows at the pad tail.

    Both recurrences start from zero states and run over the valid prefix
    only, so trailing padding never influences the emissions.
    """
    m = packed.n_valid
    total = packed.features.shape[0]
    x = packed.features[:m] if m < total else packed.features
    x = maybe_dropout(x, cfg.dropout, train_mode, rng)
    h = cfg.d_hidden
    for layer in range(cfg.lstm_layers):
        fwd = _lstm_direction(x, store, f"decoder.lstm{layer}.fwd", h, reverse=False)
        bwd = _lstm_direction(x, store, f"decoder.lstm{layer}.bwd", h, reverse=True)
        x = ad.concat([ad.concat([f, b], axis=1) for f, b in zip(fwd, bwd)], axis=0)
    scores = x @ store["decoder.w_out"]
    if total > m:
        scores = ad.concat([scores, Value(np.zeros((total - m, scores.shape[1])))], axis=0)
    return Emissions(scores=scores, n_valid=m)


# -- CRF ---------------------------------------------------------------------------


def _check_tags(tags: np.ndarray, n_tags: int, n_valid: int) -> np.ndarray:
    tags = np.asarray(tags, dtype=np.int64)
    if tags.shape != (n_valid,):
        raise ValueError(f"tag sequence length {tags.shape} != valid timesteps ({n_valid},)")
    if tags.size and (tags.min() < 0 or tags.max() >= n_tags):
        raise ValueError(f"tag id out of range [0, {n_tags})")
    return tags


def crf_score(emissions: Emissions, trans: TransitionMatrix, tags: np.ndarray) -> Value:
    """Path score: start->tags transitions plus per-step emissions plus tags->end."""
    k = trans.n_tags
    m = emissions.n_valid
    tags = _check_tags(tags, k, m)
    z_flat = ad.reshape(emissions.scores[:m], (m * k,))
    emit = ad.take(z_flat, np.arange(m) * k + tags).sum()
    seq = np.concatenate([[trans.sos], tags, [trans.eos]])
    t_flat = ad.reshape(trans.scores(), ((k + 2) * (k + 2),))
    trans_sum = ad.take(t_flat, seq[:-1] * (k + 2) + seq[1:]).sum()
    return emit + trans_sum


def _logsumexp(v: Value, axis: int | None = None) -> Value:
    if axis is None:
        shift = float(v.data.max())
        return ad.log(ad.exp(v - shift).sum()) + shift
    shift = Value(v.data.max(axis=axis, keepdims=True))
    return ad.log(ad.exp(v - shift).sum(axis=axis)) + Value(np.squeeze(shift.data, axis=axis))


def crf_log_partition(emissions: Emissions, trans: TransitionMatrix) -> Value:
    """Log of the sum of exp path scores over all tag sequences, by the
    forward algorithm in log space."""
    k = trans.n_tags
    m = emissions.n_valid
    if m < 1:
        raise ValueError("crf_log_partition: need at least one valid timestep")
    t_scores = trans.scores()
    t_tags = t_scores[:k, :k]
    alpha = t_scores[trans.sos, :k] + emissions.scores[0]
    for step in range(1, m):
        grid = ad.reshape(alpha, (k, 1)) + t_tags + ad.reshape(emissions.scores[step], (1, k))
        alpha = _logsumexp(grid, axis=0)
    return _logsumexp(alpha + t_scores[:k, trans.eos])


def crf_nll(emissions: Emissions, trans: TransitionMatrix, tags: np.ndarray) -> Value:
    """Negative log-likelihood of the gold path; nonnegative up to float error."""
    return crf_log_partition(emissions, trans) - crf_score(emissions, trans, tags)


def viterbi_decode(emissions: Emissions, trans: TransitionMatrix) -> np.ndarray:
    """Highest-scoring tag sequence over the valid timesteps.

    Ties break toward the lowest label index at every decision, which yields
    the optimal path whose reversed label sequence is lexicographically
    smallest.
    """
    k = trans.n_tags
    m = emissions.n_valid
    if m < 1:
        raise ValueError("viterbi_decode: need at least one valid timestep")
    z = emissions.scores.data[:m]
    t = trans.matrix()
    delta = t[trans.sos, :k] + z[0]
    back = np.zeros((m, k), dtype=np.int64)
    for step in range(1, m):
        cand = delta[:, None] + t[:k, :k]
        back[step] = np.argmax(cand, axis=0)
        delta = cand[back[step], np.arange(k)] + z[step]
    final = delta + t[:k, trans.eos]
    path = np.zeros(m, dtype=np.int64)
    path[-1] = int(np.argmax(final))
    for step in range(m - 1, 0, -1):
        path[step - 1] = back[step, path[step]]
    return path
