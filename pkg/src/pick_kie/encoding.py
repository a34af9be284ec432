"""Fused node features from text and image segments.

Per-segment character transcripts run through a small transformer encoder;
image crops run through a three-block convolutional stack whose output grid
is flattened and aligned to the character axis.  The two streams are fused by
elementwise addition, then mean-pooled per segment into node vectors for the
graph stage.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Value
from .config import ModelConfig

# The conv stack downsamples 2x three times: a 32x32 crop becomes a 4x4 grid,
# flattened to IMAGE_ROWS feature rows that are truncated/tiled to the
# segment's character count.
CONV_INPUT = 32
IMAGE_ROWS = 16
LN_EPS = 1e-5


class Vocabulary:
    """Character-to-id map with reserved PAD (0) and UNK (1) slots."""

    PAD = 0
    UNK = 1

    def __init__(self, char_to_id: dict[str, int]):
        self.char_to_id = dict(char_to_id)

    @classmethod
    def build(cls, texts) -> "Vocabulary":
        chars = sorted({ch for text in texts for ch in text})
        return cls({ch: i + 2 for i, ch in enumerate(chars)})

    @property
    def size(self) -> int:
        return len(self.char_to_id) + 2

    def encode(self, text: str) -> np.ndarray:
        """Ids for a transcript; unseen characters map to UNK, never an error."""
        return np.array([self.char_to_id.get(ch, self.UNK) for ch in text], dtype=np.int64)

    def to_json(self) -> dict[str, int]:
        return dict(sorted(self.char_to_id.items()))

    @classmethod
    def from_json(cls, raw: dict[str, int]) -> "Vocabulary":
        return cls({str(k): int(v) for k, v in raw.items()})

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), ensure_ascii=False), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    """Fixed sin/cos position table, [length, dim]."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2.0 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain bilinear resample of an HxWxC array (inputs, not parameters)."""
    h, w = image.shape[:2]
    if h < 2 or w < 2:
        raise ad.ShapeError(f"encode_image: degenerate crop {image.shape}, need at least 2x2")
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = image[y0][:, x0] * (1 - wx) + image[y0][:, x1] * wx
    bot = image[y1][:, x0] * (1 - wx) + image[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def maybe_dropout(x: Value, rate: float, train_mode: bool, rng: np.random.Generator | None) -> Value:
    """Inverted dropout as a constant mask; identity outside training."""
    if not train_mode or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * Value(mask)


def valid_mask(lengths, T: int) -> np.ndarray:
    """[N, T] float mask, 1 at real characters and 0 at padding."""
    lengths = np.asarray(lengths)
    return (np.arange(T)[None, :] < lengths[:, None]).astype(np.float64)


# -- parameters -------------------------------------------------------------------


def init_encoder_params(store: ParamStore, cfg: ModelConfig, vocab_size: int, rng: np.random.Generator) -> None:
    d = cfg.d_model
    d_ff = 4 * d
    store.add("encoder.embed", xavier_uniform(rng, (vocab_size, d), vocab_size, d))
    for b in range(cfg.blocks):
        p = f"encoder.block{b}"
        for name in ("wq", "wk", "wv", "wo"):
            store.add(f"{p}.attn.{name}", xavier_uniform(rng, (d, d), d, d))
            if name != "wk":
                # a key bias shifts every score in a row equally, which the
                # row softmax cancels; it would be an untrainable direction
                store.add(f"{p}.attn.b{name[1]}", np.zeros(d))
        store.add(f"{p}.ln1.gain", np.ones(d))
        store.add(f"{p}.ln1.bias", np.zeros(d))
        store.add(f"{p}.ln2.gain", np.ones(d))
        store.add(f"{p}.ln2.bias", np.zeros(d))
        store.add(f"{p}.ffn.w1", xavier_uniform(rng, (d, d_ff), d, d_ff))
        store.add(f"{p}.ffn.b1", np.zeros(d_ff))
        store.add(f"{p}.ffn.w2", xavier_uniform(rng, (d_ff, d), d_ff, d))
        store.add(f"{p}.ffn.b2", np.zeros(d))
    channels = [3, cfg.conv_channels[0], cfg.conv_channels[1], d]
    for i in range(3):
        c_in, c_out = channels[i], channels[i + 1]
        store.add(
            f"encoder.conv{i}.kernel",
            xavier_uniform(rng, (3, 3, c_in, c_out), 9 * c_in, 9 * c_out),
        )
        store.add(f"encoder.conv{i}.bias", np.zeros(c_out))


# -- text branch ------------------------------------------------------------------


def _layer_norm(x: Value, gain: Value, bias: Value) -> Value:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = (var + LN_EPS) ** -0.5
    return centered * inv * gain + bias


def _attention(x: Value, prefix: str, store: ParamStore, cfg: ModelConfig, key_bias: np.ndarray) -> Value:
    N, T, d = x.shape
    h = cfg.heads
    dk = d // h
    flat = ad.reshape(x, (N * T, d))

    def heads_of(name: str) -> Value:
        proj = flat @ store[f"{prefix}.attn.w{name}"]
        if name != "k":
            proj = proj + store[f"{prefix}.attn.b{name}"]
        return ad.transpose(ad.reshape(proj, (N, T, h, dk)), (0, 2, 1, 3))

    q, k, v = heads_of("q"), heads_of("k"), heads_of("v")
    scores = (q @ ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dk))
    scores = scores + Value(key_bias)  # [N, 1, 1, T] masks padded keys
    ctx = ad.softmax(scores, axis=-1) @ v
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (N * T, d))
    out = ctx @ store[f"{prefix}.attn.wo"] + store[f"{prefix}.attn.bo"]
    return ad.reshape(out, (N, T, d))


def _feed_forward(x: Value, prefix: str, store: ParamStore) -> Value:
    N, T, d = x.shape
    flat = ad.reshape(x, (N * T, d))
    hidden = ad.relu(flat @ store[f"{prefix}.ffn.w1"] + store[f"{prefix}.ffn.b1"])
    out = hidden @ store[f"{prefix}.ffn.w2"] + store[f"{prefix}.ffn.b2"]
    return ad.reshape(out, (N, T, d))


def encode_text(
    ids: np.ndarray,
    lengths,
    store: ParamStore,
    cfg: ModelConfig,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> Value:
    """Per-character contextual embeddings, [N, T, d_model], pad rows zeroed.

    Segments are encoded independently: attention only ever sees keys within
    the segment's own valid characters.
    """
    N, T = ids.shape
    d = cfg.d_model
    mask = valid_mask(lengths, T)
    key_bias = np.where(mask[:, None, None, :] > 0, 0.0, ad.neg_inf())

    x = ad.take(store["encoder.embed"], ids.reshape(-1))
    x = ad.reshape(x, (N, T, d)) * math.sqrt(d)
    x = x + Value(sinusoidal_positions(T, d))
    x = maybe_dropout(x, cfg.dropout, train_mode, rng)
    for b in range(cfg.blocks):
        prefix = f"encoder.block{b}"
        attended = _attention(x, prefix, store, cfg, key_bias)
        attended = maybe_dropout(attended, cfg.dropout, train_mode, rng)
        x = _layer_norm(x + attended, store[f"{prefix}.ln1.gain"], store[f"{prefix}.ln1.bias"])
        ff = _feed_forward(x, prefix, store)
        ff = maybe_dropout(ff, cfg.dropout, train_mode, rng)
        x = _layer_norm(x + ff, store[f"{prefix}.ln2.gain"], store[f"{prefix}.ln2.bias"])
    return x * Value(mask[:, :, None])


# -- image branch -----------------------------------------------------------------


def encode_image(crops, lengths, T: int, store: ParamStore, cfg: ModelConfig) -> Value:
    """Conv features per crop aligned to the character axis, [N, T, d_model].

    Crops are bilinearly resized to a fixed square, convolved down to a
    4x4xd_model grid, flattened to IMAGE_ROWS rows, then truncated or tiled
    cyclically to each segment's character count.
    """
    N = len(crops)
    stacked = np.stack([resize_bilinear(np.asarray(c, dtype=np.float64), CONV_INPUT, CONV_INPUT) for c in crops])
    x = Value(stacked)
    for i in range(3):
        x = ad.relu(
            ad.conv2d(x, store[f"encoder.conv{i}.kernel"], store[f"encoder.conv{i}.bias"], stride=2, padding=1)
        )
    x = ad.reshape(x, (N * IMAGE_ROWS, cfg.d_model))
    rows = np.arange(T) % IMAGE_ROWS
    flat_idx = (np.arange(N)[:, None] * IMAGE_ROWS + rows[None, :]).reshape(-1)
    out = ad.reshape(ad.take(x, flat_idx), (N, T, cfg.d_model))
    return out * Value(valid_mask(lengths, T)[:, :, None])


# -- fusion and pooling -----------------------------------------------------------


def fuse(te: Value, ie: Value) -> Value:
    """Elementwise addition of the two streams; shapes must match exactly."""
    if te.shape != ie.shape:
        raise ad.ShapeError(f"fuse: text {te.shape} vs image {ie.shape}")
    return te + ie


def pool_nodes(x: Value, lengths, mode: str = "mean") -> Value:
    """Per-segment pooling over valid characters: [N, T, d] -> [N, d]."""
    N, T, d = x.shape
    lengths = np.asarray(lengths)
    if mode == "mean":
        # pad rows are already zero, so a sum over T divided by length is a masked mean
        total = x.sum(axis=1)
        return total * Value((1.0 / lengths)[:, None])
    if mode == "max":
        masked = np.where(valid_mask(lengths, T)[:, :, None] > 0, x.data, -np.inf)
        t_choice = masked.argmax(axis=1)  # [N, d]
        flat_idx = (
            np.arange(N)[:, None] * (T * d) + t_choice * d + np.arange(d)[None, :]
        ).reshape(-1)
        return ad.reshape(ad.take(ad.reshape(x, (N * T * d,)), flat_idx), (N, d))
    raise ValueError(f"unknown pooling mode {mode!r}")
