"""Command-line interface: train, eval, predict, gen-synth, gradcheck.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure
(non-finite loss or a failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import autodiff as ad
from .config import ConfigError, ModelConfig, _FIELD_TYPES, build_config
from .data import (
    DataError,
    EntitySpan,
    SynthConfig,
    compute_metrics,
    generate_synthetic,
    load_dir,
    load_document,
    save_document,
)
from .model import (
    NumericsError,
    evaluate,
    gradcheck,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)

GRADCHECK_TOLERANCE = 1e-3


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    """One flag per ModelConfig field, same names."""
    for name, ftype in _FIELD_TYPES.items():
        if ftype is bool:
            parser.add_argument(f"--{name}", choices=["true", "false"], default=None)
        else:
            parser.add_argument(f"--{name}", type=str, default=None)


def _config_from_args(args: argparse.Namespace) -> ModelConfig:
    # precedence: flags > config file > PICK_KIE_PRECISION env > defaults
    overrides = {}
    for name in _FIELD_TYPES:
        value = getattr(args, name, None)
        if value is None:
            continue
        if name == "layers" and "," in str(value):
            continue  # sweep list, resolved per run by cmd_train
        overrides[name] = value
    if getattr(args, "ablate", None) == "image":
        overrides["ablate_image"] = "true"
    elif getattr(args, "ablate", None) == "graph-learning":
        overrides["ablate_graph_learning"] = "true"
    env = os.environ.get("PICK_KIE_PRECISION")
    file_path = getattr(args, "config", None)
    cfg = build_config(file_path, overrides, env_precision=env)
    return cfg


def _split_dataset(data_dir: Path):
    train_dir = data_dir / "train"
    val_dir = data_dir / "val"
    if train_dir.is_dir():
        train_docs = load_dir(train_dir)
        val_docs = load_dir(val_dir) if val_dir.is_dir() else None
        return train_docs, val_docs
    return load_dir(data_dir), None


def _layer_values(raw: str | None) -> list[int]:
    if not raw:
        return []
    try:
        return [int(p) for p in raw.split(",") if p.strip()]
    except ValueError:
        raise ConfigError(f"--layers: expected comma-separated integers, got {raw!r}") from None


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_docs, val_docs = _split_dataset(Path(args.data))

    sweep = _layer_values(args.layers)
    if len(sweep) <= 1:
        if sweep:
            cfg.layers = sweep[0]
            cfg.validate()
        ckpt = train(train_docs, cfg, val_docs=val_docs, metrics_path=out_dir / "metrics.jsonl")
        save_checkpoint(ckpt, out_dir / "checkpoint.pkk")
        ckpt.vocab.save(out_dir / "vocab.json")
        print(f"trained {cfg.epochs} epochs on {len(train_docs)} documents -> {out_dir}")
        return 0

    results = {}
    for n_layers in sweep:
        run_cfg = ModelConfig(**{**cfg.as_dict(), "layers": n_layers, "conv_channels": cfg.conv_channels})
        run_cfg.validate()
        metrics_path = out_dir / f"metrics_L{n_layers}.jsonl"
        ckpt = train(train_docs, run_cfg, val_docs=val_docs, metrics_path=metrics_path)
        save_checkpoint(ckpt, out_dir / f"checkpoint_L{n_layers}.pkk")
        last = json.loads(metrics_path.read_text().splitlines()[-1]) if run_cfg.epochs else {}
        results[str(n_layers)] = {
            "loss": last.get("loss"),
            "l_crf": last.get("l_crf"),
            "val_mEF": last.get("val_mEF"),
        }
    (out_dir / "sweep_results.json").write_text(json.dumps({"format": "pick-kie-sweep/1", "layers": results}, indent=2))
    print(f"{'L':>3} {'loss':>12} {'l_crf':>12} {'val_mEF':>8}")
    for n_layers, row in results.items():
        print(f"{n_layers:>3} {row['loss']:>12.4f} {row['l_crf']:>12.4f} {row['val_mEF']:>8.4f}")
    return 0


def _load_predictions(path: Path) -> dict[str, list[EntitySpan]]:
    files = sorted(path.glob("*.json")) if path.is_dir() else [path]
    out: dict[str, list[EntitySpan]] = {}
    for f in files:
        raw = json.loads(f.read_text(encoding="utf-8"))
        if raw.get("format") != "pick-kie/1" or "spans" not in raw:
            raise DataError(f"{f}: not a predictions file")
        out[str(raw.get("document_id", f.stem))] = [
            EntitySpan(s["entity"], s["text"], int(s["segment_index"])) for s in raw["spans"]
        ]
    return out


def cmd_eval(args: argparse.Namespace) -> int:
    docs = load_dir(Path(args.data))
    if args.predictions:
        by_id = _load_predictions(Path(args.predictions))
        predicted = [by_id.get(doc.id, []) for doc in docs]
        report = compute_metrics(predicted, [doc.gold_spans() for doc in docs])
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint or --predictions")
        ckpt = load_checkpoint(args.checkpoint)
        ad.set_precision(ckpt.config.precision)
        report = evaluate(docs, ckpt)
    print(json.dumps(report.as_dict(), indent=2))
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    ad.set_precision(ckpt.config.precision)
    doc = load_document(args.data)
    spans = predict(doc, ckpt)
    payload = {
        "format": "pick-kie/1",
        "document_id": doc.id,
        "spans": [
            {"entity": s.entity, "text": s.text, "segment_index": s.segment_index} for s in spans
        ],
    }
    out = json.dumps(payload, ensure_ascii=False, indent=2)
    if args.out:
        Path(args.out).write_text(out, encoding="utf-8")
    else:
        print(out)
    return 0


def cmd_gen_synth(args: argparse.Namespace) -> int:
    entities = tuple(p for p in args.entities.split(",") if p) if args.entities else None
    kwargs = dict(
        mode=args.mode,
        count=args.count,
        render_glyphs=not args.no_glyphs,
        ambiguity_probe=args.probe,
    )
    if entities:
        kwargs["entities"] = entities
    if args.distractors:
        lo, _, hi = args.distractors.partition(",")
        kwargs["distractors"] = (int(lo), int(hi or lo))
    cfg = SynthConfig(**kwargs)
    docs = generate_synthetic(cfg, seed=args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for doc in docs:
        save_document(doc, out_dir / f"{doc.id}.json")
    print(f"wrote {len(docs)} documents to {out_dir}")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    cfg = None
    if args.config:
        cfg = _config_from_args(args)
        cfg.dropout = 0.0
    errors = gradcheck(cfg=cfg, samples_per_param=args.samples, seed=args.seed or 0)
    worst_name = max(errors, key=errors.get)
    print(f"{'parameter group':<40} {'max rel error':>14}")
    for name in sorted(errors):
        print(f"{name:<40} {errors[name]:>14.3e}")
    print(f"worst: {worst_name} {errors[worst_name]:.3e} (tolerance {GRADCHECK_TOLERANCE:.0e})")
    if errors[worst_name] > GRADCHECK_TOLERANCE:
        raise NumericsError(f"gradient check failed: {worst_name} at {errors[worst_name]:.3e}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pick-kie", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model on a document directory")
    p_train.add_argument("--config", type=str, default=None)
    p_train.add_argument("--data", type=str, required=True)
    p_train.add_argument("--out", type=str, required=True)
    p_train.add_argument("--ablate", choices=["image", "graph-learning"], default=None)
    p_train.add_argument("--layers", dest="layers", type=str, default=None,
                         help="graph layers; a comma list runs a sweep")
    for name in _FIELD_TYPES:
        if name == "layers":
            continue
        p_train.add_argument(f"--{name}", type=str, default=None)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="score a checkpoint or a predictions file")
    p_eval.add_argument("--checkpoint", type=str, default=None)
    p_eval.add_argument("--predictions", type=str, default=None)
    p_eval.add_argument("--data", type=str, required=True)
    p_eval.set_defaults(func=cmd_eval)

    p_pred = sub.add_parser("predict", help="predict entity spans for one document")
    p_pred.add_argument("--checkpoint", type=str, required=True)
    p_pred.add_argument("--data", type=str, required=True)
    p_pred.add_argument("--out", type=str, default=None)
    p_pred.set_defaults(func=cmd_predict)

    p_gen = sub.add_parser("gen-synth", help="generate a synthetic corpus")
    p_gen.add_argument("--mode", choices=["fixed", "variable"], default="fixed")
    p_gen.add_argument("--count", type=int, required=True)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--out", type=str, required=True)
    p_gen.add_argument("--entities", type=str, default=None)
    p_gen.add_argument("--probe", action="store_true")
    p_gen.add_argument("--no-glyphs", action="store_true")
    p_gen.add_argument("--distractors", type=str, default=None)
    p_gen.set_defaults(func=cmd_gen_synth)

    p_grad = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p_grad.add_argument("--config", type=str, default=None)
    p_grad.add_argument("--samples", type=int, default=25)
    p_grad.add_argument("--seed", type=int, default=0)
    for name in _FIELD_TYPES:
        if name != "seed":
            p_grad.add_argument(f"--{name}", type=str, default=None)
    p_grad.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    ad.precision_from_env()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericsError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
