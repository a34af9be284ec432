"""Shared test oracles: brute-force CRF path enumeration and tiny fixtures."""

import numpy as np

from pick_kie.config import ModelConfig
from pick_kie.data import BBox, Document, Segment


def all_paths(n_steps: int, n_tags: int) -> np.ndarray:
    """Every tag sequence, [K^M, M], in lexicographic order."""
    grids = np.meshgrid(*([np.arange(n_tags)] * n_steps), indexing="ij")
    return np.stack([g.reshape(-1) for g in grids], axis=1)


def brute_force_path_scores(z: np.ndarray, t: np.ndarray, sos: int, eos: int) -> tuple[np.ndarray, np.ndarray]:
    """Scores of every path under emissions z [M,K] and transitions t."""
    m, k = z.shape
    paths = all_paths(m, k)
    scores = z[np.arange(m)[None, :], paths].sum(axis=1)
    scores = scores + t[sos, paths[:, 0]] + t[paths[:, -1], eos]
    if m > 1:
        scores = scores + t[paths[:, :-1], paths[:, 1:]].sum(axis=1)
    return paths, scores


def brute_force_log_partition(z: np.ndarray, t: np.ndarray, sos: int, eos: int) -> float:
    _, scores = brute_force_path_scores(z, t, sos, eos)
    shift = scores.max()
    return float(shift + np.log(np.exp(scores - shift).sum()))


def brute_force_viterbi(z: np.ndarray, t: np.ndarray, sos: int, eos: int) -> np.ndarray:
    """Best path; among ties, the one whose reversed sequence is lexicographically
    smallest (the documented tie-break of the dynamic-programming decoder)."""
    paths, scores = brute_force_path_scores(z, t, sos, eos)
    best = scores.max()
    candidates = np.flatnonzero(scores == best)
    pick = min(candidates, key=lambda i: tuple(paths[i][::-1]))
    return paths[pick]


def tiny_config(**overrides) -> ModelConfig:
    base = dict(d_model=8, d_hidden=8, blocks=2, heads=2, conv_channels=(4, 4), dropout=0.0)
    base.update(overrides)
    return ModelConfig(**base)


def tiny_document(seed: int = 0, texts=("ab1", "cd", "x0y2z")) -> Document:
    rng = np.random.default_rng(seed)
    segments = []
    for i, text in enumerate(texts):
        bbox = BBox(x=10.0 * i + rng.uniform(0, 4), y=18.0 * i + rng.uniform(0, 4), w=28.0, h=9.0)
        crop = rng.uniform(0.0, 1.0, size=(7, 11, 3))
        segments.append(Segment(chars=text, bbox=bbox, image=crop))
    return Document(segments=segments, id=f"tiny-{seed}")
