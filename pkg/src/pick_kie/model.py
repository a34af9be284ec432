"""End-to-end assembly: encoder -> graph -> decoder, the joint objective,
Adam training, prediction, and checkpoint persistence.

Training is single-threaded and deterministic for a given config/seed; a
loaded checkpoint may serve inference from many threads because parameters
are never mutated outside training.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Value, backward
from .config import ConfigError, ModelConfig
from .data import DataError, Document, EntitySpan, decode_iob, tag_names, to_iob
from .decoding import (
    Emissions,
    TransitionMatrix,
    bilstm_emissions,
    crf_nll,
    init_decoder_params,
    pack,
    viterbi_decode,
)
from .encoding import Vocabulary, encode_image, encode_text, fuse, init_encoder_params, pool_nodes
from .graph import graph_forward, init_graph_params

CHECKPOINT_FORMAT = "pick-kie-checkpoint/1"
CHECKPOINT_MAGIC = b"PKC1"


class NumericsError(RuntimeError):
    """Non-finite loss or a failed numeric verification."""


@dataclass
class ForwardResult:
    emissions: Emissions
    adjacency: Value
    graph_loss: Value
    packed: "object"
    lengths: list[int]


@dataclass
class AdamState:
    """First/second moment estimates per parameter plus the step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_store(cls, store: ParamStore) -> "AdamState":
        return cls(
            m={name: np.zeros_like(p.data) for name, p in store.items()},
            v={name: np.zeros_like(p.data) for name, p in store.items()},
            t=0,
        )

    def step(
        self,
        store: ParamStore,
        lr: float,
        grad_scale: float = 1.0,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.t += 1
        for name, p in store.items():
            g = p.grad * grad_scale if p.grad is not None else np.zeros_like(p.data)
            self.m[name] = beta1 * self.m[name] + (1 - beta1) * g
            self.v[name] = beta2 * self.v[name] + (1 - beta2) * (g * g)
            m_hat = self.m[name] / (1 - beta1**self.t)
            v_hat = self.v[name] / (1 - beta2**self.t)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class Checkpoint:
    config: ModelConfig
    vocab: Vocabulary
    tags: list[str]
    params: ParamStore
    opt: AdamState | None = None
    step: int = 0


def init_params(cfg: ModelConfig, vocab: Vocabulary, tags: list[str]) -> ParamStore:
    """All trainable tensors, created in a fixed order from cfg.seed."""
    cfg.validate()
    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    store = ParamStore()
    init_encoder_params(store, cfg, vocab.size, rng)
    init_graph_params(store, cfg, rng)
    init_decoder_params(store, cfg, len(tags), rng)
    return store


def forward(
    doc: Document,
    params: ParamStore,
    cfg: ModelConfig,
    vocab: Vocabulary,
    tags: list[str],
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> ForwardResult:
    """Emissions, adjacency, and the graph regularizer for one document.

    Deterministic with dropout disabled; in training mode dropout is applied
    to the transformer sublayers and the BiLSTM input.
    """
    doc.validate()
    segments = doc.segments
    n = len(segments)
    lengths = [len(s.chars) for s in segments]
    t_max = max(lengths)

    ids = np.full((n, t_max), Vocabulary.PAD, dtype=np.int64)
    for i, seg in enumerate(segments):
        ids[i, : lengths[i]] = vocab.encode(seg.chars)

    text_emb = encode_text(ids, lengths, params, cfg, train_mode, rng)
    if cfg.ablate_image:
        image_emb = Value(np.zeros(text_emb.shape))
    else:
        image_emb = encode_image([s.crop() for s in segments], lengths, t_max, params, cfg)
    fused = fuse(text_emb, image_emb)
    node_inputs = pool_nodes(fused, lengths, mode=cfg.pooling)
    node_out, adjacency, graph_loss = graph_forward(
        node_inputs, [s.bbox for s in segments], lengths, params, cfg
    )
    packed = pack(fused, node_out, lengths)
    emissions = bilstm_emissions(packed, params, cfg, train_mode, rng)
    return ForwardResult(
        emissions=emissions,
        adjacency=adjacency,
        graph_loss=graph_loss,
        packed=packed,
        lengths=lengths,
    )


def gold_tag_ids(doc: Document, tags: list[str]) -> np.ndarray:
    """Packed gold tag indices over the document's valid timesteps."""
    index = {name: i for i, name in enumerate(tags)}
    out: list[int] = []
    for seg in doc.segments:
        for name in to_iob(seg):
            if name not in index:
                raise DataError(f"tag {name!r} not in the model's tag set {tags}")
            out.append(index[name])
    return np.array(out, dtype=np.int64)


def total_loss(
    doc: Document,
    gold: np.ndarray,
    params: ParamStore,
    cfg: ModelConfig,
    vocab: Vocabulary,
    tags: list[str],
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Value, Value, Value]:
    """Joint objective: tagging NLL plus lam * graph regularizer.

    Returns (total, tagging loss, graph loss); lam = 0 reduces the total
    exactly to the tagging loss.
    """
    result = forward(doc, params, cfg, vocab, tags, train_mode, rng)
    trans = TransitionMatrix(params["decoder.transitions"], len(tags))
    tagging = crf_nll(result.emissions, trans, gold)
    if cfg.lam == 0.0:
        return tagging, tagging, result.graph_loss
    total = tagging + result.graph_loss * cfg.lam
    return total, tagging, result.graph_loss


def predict(doc: Document, ckpt: Checkpoint) -> list[EntitySpan]:
    """Decode entity spans for a document with a trained checkpoint."""
    expected = ckpt.vocab.size
    actual = ckpt.params["encoder.embed"].shape[0]
    if expected != actual:
        raise DataError(
            f"vocabulary mismatch: checkpoint embeds {actual} ids but vocabulary has {expected}"
        )
    result = forward(doc, ckpt.params, ckpt.config, ckpt.vocab, ckpt.tags, train_mode=False)
    trans = TransitionMatrix(ckpt.params["decoder.transitions"], len(ckpt.tags))
    path = viterbi_decode(result.emissions, trans)
    spans: list[EntitySpan] = []
    offset = 0
    for i, seg in enumerate(doc.segments):
        length = result.lengths[i]
        seg_tags = [ckpt.tags[k] for k in path[offset : offset + length]]
        offset += length
        spans.extend(decode_iob(seg_tags, seg.chars, segment_index=i))
    return spans


def entity_schema(docs: list[Document]) -> list[str]:
    entities = sorted({s.entity for d in docs for s in d.segments if s.entity is not None})
    return entities


def evaluate(docs: list[Document], ckpt: Checkpoint):
    from .data import compute_metrics

    predicted = [predict(doc, ckpt) for doc in docs]
    gold = [doc.gold_spans() for doc in docs]
    return compute_metrics(predicted, gold)


def train(
    dataset: list[Document],
    cfg: ModelConfig,
    val_docs: list[Document] | None = None,
    metrics_path: str | Path | None = None,
) -> Checkpoint:
    """Adam (beta1=0.9, beta2=0.999, eps=1e-8) over per-epoch shuffled docs.

    Emits one JSON metrics line per epoch: mean losses plus entity F1 on the
    validation docs.  When no validation split is given, the last 10% of the
    dataset is held out for monitoring (datasets under 10 docs are monitored
    on themselves).  Aborts with a diagnostic on a non-finite loss.
    """
    cfg.validate()
    if not dataset:
        raise DataError("train: empty dataset")
    ad.set_precision(cfg.precision)

    if val_docs is None:
        if len(dataset) >= 10:
            n_val = max(1, round(0.1 * len(dataset)))
            train_docs, val_docs = dataset[:-n_val], dataset[-n_val:]
        else:
            train_docs, val_docs = dataset, list(dataset)
    else:
        train_docs = dataset

    vocab = Vocabulary.build([s.chars for d in train_docs for s in d.segments])
    tags = tag_names(entity_schema(train_docs))
    params = init_params(cfg, vocab, tags)
    opt = AdamState.for_store(params)
    ckpt = Checkpoint(config=cfg, vocab=vocab, tags=tags, params=params, opt=opt, step=0)

    gold = [gold_tag_ids(d, tags) for d in train_docs]
    drop_rng = np.random.default_rng(np.random.PCG64(np.random.SeedSequence((cfg.seed, 0xD0))))

    log_lines: list[str] = []
    step = 0
    for epoch in range(cfg.epochs):
        order_rng = np.random.default_rng(np.random.PCG64(np.random.SeedSequence((cfg.seed, epoch))))
        order = order_rng.permutation(len(train_docs))
        sums = np.zeros(3)
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            ad.zero_grads(params)
            for doc_i in batch:
                doc = train_docs[doc_i]
                total, tagging, reg = total_loss(
                    doc, gold[doc_i], params, cfg, vocab, tags, train_mode=True, rng=drop_rng
                )
                if not np.isfinite(total.data):
                    raise NumericsError(
                        f"non-finite loss on document {doc.id!r} "
                        f"(tagging={float(tagging.data)}, graph={float(reg.data)}, "
                        f"epoch={epoch}, step={step})"
                    )
                backward(total)
                sums += (float(total.data), float(tagging.data), float(reg.data))
            opt.step(params, cfg.lr, grad_scale=1.0 / len(batch))
            step += 1
        n_docs = len(train_docs)
        val_mef = evaluate(val_docs, ckpt).overall_micro.mEF
        line = json.dumps(
            {
                "epoch": epoch,
                "step": step,
                "loss": sums[0] / n_docs,
                "l_crf": sums[1] / n_docs,
                "l_gl": sums[2] / n_docs,
                "val_mEF": val_mef,
            }
        )
        log_lines.append(line)
    ckpt.step = opt.t
    if metrics_path is not None:
        Path(metrics_path).write_text("\n".join(log_lines) + ("\n" if log_lines else ""), encoding="utf-8")
    return ckpt


# -- checkpoint persistence ---------------------------------------------------------


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Binary checkpoint: JSON header + little-endian blocks + payload checksum."""
    arrays: list[tuple[str, np.ndarray]] = [(name, p.data) for name, p in ckpt.params.items()]
    if ckpt.opt is not None:
        for name in sorted(ckpt.opt.m):
            arrays.append((f"opt.m.{name}", ckpt.opt.m[name]))
        for name in sorted(ckpt.opt.v):
            arrays.append((f"opt.v.{name}", ckpt.opt.v[name]))

    payload = bytearray()
    entries = []
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = le.tobytes()
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.str.replace(">", "<"),
                "shape": list(arr.shape),
                "offset": len(payload),
                "nbytes": len(blob),
            }
        )
        payload.extend(blob)

    header = {
        "format": CHECKPOINT_FORMAT,
        "config": ckpt.config.as_dict(),
        "vocab": ckpt.vocab.to_json(),
        "tags": ckpt.tags,
        "step": ckpt.step,
        "has_optimizer": ckpt.opt is not None,
        "opt_t": ckpt.opt.t if ckpt.opt is not None else 0,
        "arrays": entries,
        "payload_sha256": hashlib.sha256(bytes(payload)).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(len(header_bytes).to_bytes(8, "little"))
        f.write(header_bytes)
        f.write(bytes(payload))


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Bit-exact restore; refuses version mismatches and corrupt payloads."""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    header_len = int.from_bytes(raw[4:12], "little")
    try:
        header = json.loads(raw[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: corrupt checkpoint header ({e})") from None
    if header.get("format") != CHECKPOINT_FORMAT:
        raise DataError(
            f"{path}: checkpoint format {header.get('format')!r} != {CHECKPOINT_FORMAT!r}"
        )
    payload = raw[12 + header_len :]
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header["payload_sha256"]:
        raise DataError(f"{path}: checksum mismatch, checkpoint is corrupt")

    cfg = ModelConfig.from_dict(header["config"])
    vocab = Vocabulary.from_json(header["vocab"])
    tags = [str(t) for t in header["tags"]]

    blocks: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(payload[start : start + nbytes], dtype=np.dtype(entry["dtype"]))
        blocks[entry["name"]] = arr.reshape(entry["shape"]).copy()

    params = ParamStore()
    opt = AdamState(t=int(header.get("opt_t", 0))) if header.get("has_optimizer") else None
    for name, arr in blocks.items():
        if name.startswith("opt.m."):
            if opt is not None:
                opt.m[name[len("opt.m.") :]] = arr
        elif name.startswith("opt.v."):
            if opt is not None:
                opt.v[name[len("opt.v.") :]] = arr
        else:
            value = params.add(name, np.zeros(arr.shape))
            value.data = arr  # keep the stored dtype bit-exact
    return Checkpoint(config=cfg, vocab=vocab, tags=tags, params=params, opt=opt, step=int(header["step"]))


# -- gradient verification ------------------------------------------------------------


def gradcheck(
    cfg: ModelConfig | None = None,
    samples_per_param: int | None = 25,
    seed: int = 0,
    eps: float = 1e-5,
) -> dict[str, float]:
    """Full-model finite-difference check on a tiny constructed document.

    Returns the norm-relative error per parameter group for the joint
    objective (dropout disabled, 64-bit).  Parameters are jittered to a
    generic point first: at the exact zero-bias init some rectifier
    pre-activations sit exactly on their kink, where one-sided subgradients
    make finite differences ill-posed.
    """
    from .data import BBox, Segment

    ad.set_precision("f64")
    if cfg is None:
        cfg = ModelConfig(d_model=8, d_hidden=8, blocks=1, heads=2, conv_channels=(4, 4), dropout=0.0)
    cfg.validate()
    rng = np.random.default_rng(np.random.PCG64(seed))

    texts = ["ab1", "cd", "x0y2z"]
    segments = []
    for i, text in enumerate(texts):
        bbox = BBox(x=10.0 * i + rng.uniform(0, 4), y=20.0 * i + rng.uniform(0, 4), w=30.0, h=10.0)
        crop = rng.uniform(0.0, 1.0, size=(8, 12, 3))
        segments.append(Segment(chars=text, bbox=bbox, image=crop))
    doc = Document(segments=segments, id="gradcheck")

    vocab = Vocabulary.build(texts)
    tags = ["O", "B-X", "I-X", "B-Y"]
    params = init_params(cfg, vocab, tags)
    for _, p in params.items():
        p.data = p.data + rng.uniform(-0.05, 0.05, size=p.data.shape)
    n_steps = sum(len(t) for t in texts)
    gold = rng.integers(0, len(tags), size=n_steps)

    def loss_fn() -> Value:
        total, _, _ = total_loss(doc, gold, params, cfg, vocab, tags, train_mode=False)
        return total

    return ad.check_gradients(
        loss_fn, params, eps=eps, samples_per_param=samples_per_param, rng=rng
    )
