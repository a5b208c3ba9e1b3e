"""Command-line entry point: synth, gridify, w2v, train, predict, extract, eval, viz.

Exit codes: 0 success, 2 usage/config/validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .doc_model import DocumentError, load_document, parse_ground_truth
from .embedder import EmbeddingError, train_word2vec
from .extract_eval import evaluate, extract, oracle_outputs
from .grid_builder import GridError, GridTensor, GridSpec, load_grid, save_grid, save_png
from .network import (
    NetworkError,
    NumericalError,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)
from .pipeline import ConfigError, Pipeline, PipelineConfig
from .preprocess import Vocab, build_vocab, tokenize_document
from .synth import GenerationError, SynthConfig, generate, write_corpus

logger = logging.getLogger("bertgrid")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(getattr(args, "config", None))
    over = {
        "representation": getattr(args, "repr", None),
        "grid": list(args.grid) if getattr(args, "grid", None) else None,
        "train.epochs": getattr(args, "epochs", None),
        "train.lr": getattr(args, "lr", None),
    }
    if args.seed is not None:
        for key in ("train.seed", "network.seed", "word2vec.seed", "embedder.seed"):
            over[key] = args.seed
    return cfg.override(over)


def _load_split(corpus: str | Path, split: str):
    root = Path(corpus)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise UsageError(f"{root}: no manifest.json (generate a corpus with `bertgrid synth`)")
    manifest = json.loads(manifest_path.read_text())
    if split not in manifest["splits"]:
        raise UsageError(f"unknown split {split!r}; manifest has {sorted(manifest['splits'])}")
    out = []
    for doc_id in manifest["splits"][split]:
        doc = load_document(root / "docs" / f"{doc_id}.json")
        gt = parse_ground_truth((root / "labels" / f"{doc_id}.json").read_bytes(), doc)
        out.append((doc, gt))
    return out


def _restore(checkpoint: str | Path):
    params, net_cfg, extra = load_checkpoint(checkpoint)
    if "pipeline" not in extra:
        raise UsageError(f"{checkpoint}: checkpoint carries no pipeline config")
    cfg = PipelineConfig.from_dict(extra["pipeline"])
    vocab = Vocab(extra["vocab"]) if extra.get("vocab") else None
    pipe = Pipeline(cfg, vocab)
    if cfg["embedder"]["kind"] == "word2vec":
        pipe.fit([])
    if cfg.network_config().input_depths != net_cfg.input_depths:
        raise UsageError(f"{checkpoint}: network inputs do not match the stored pipeline config")
    return pipe, params, net_cfg


def _check_compatible(args, pipe: Pipeline, net_cfg) -> None:
    """With --config, the config's grid and network must match the checkpoint."""
    if getattr(args, "config", None) is None:
        return
    cfg = PipelineConfig.load(args.config)
    if cfg.hw != pipe.cfg.hw or cfg.network_config() != net_cfg:
        raise UsageError(
            f"config grid {cfg.hw} / network {cfg.network_config()} does not match checkpoint "
            f"grid {pipe.cfg.hw} / network {net_cfg}"
        )


def _emit(obj, as_json: bool, text: str) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True) if as_json else text)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    if args.count <= 0:
        raise UsageError("--count must be positive")
    overrides = json.loads(Path(args.config).read_text()) if args.config else {}
    cfg = SynthConfig.from_dict({**overrides, "seed": args.seed if args.seed is not None else overrides.get("seed", 0)})
    manifest = write_corpus(args.out, generate(cfg, args.count), cfg, tuple(args.split))
    sizes = {k: len(v) for k, v in manifest["splits"].items()}
    print(f"wrote {args.count} documents to {args.out} (splits {sizes})")
    return EXIT_OK


def cmd_gridify(args) -> int:
    doc = load_document(args.doc)
    cfg = _config(args)
    vocab = Vocab.load(args.vocab) if args.vocab else None
    pipe = Pipeline(cfg, vocab).fit([doc])
    grids = pipe.inputs(doc)
    out = Path(args.out)
    if cfg.representation == "combined":
        targets = [out.with_name(out.name + ".char"), out.with_name(out.name + ".dense")]
    else:
        targets = [out]
    for values, path in zip(grids, targets):
        t = GridTensor(GridSpec(*values.shape), values)
        save_grid(t, path)
        if args.png:
            save_png(t, path.with_name(path.name + ".png"))
        print(f"wrote {path} ({values.shape[0]}x{values.shape[1]}x{values.shape[2]})")
    return EXIT_OK


def cmd_w2v(args) -> int:
    docs = [d for d, _ in _load_split(args.corpus, args.split)]
    if not docs:
        raise UsageError("empty corpus")
    vocab = Vocab.load(args.vocab) if args.vocab else build_vocab(docs, args.max_size, args.min_freq)
    seqs = [tokenize_document(d, vocab) for d in docs]
    seed = args.seed if args.seed is not None else 0
    table = train_word2vec(seqs, len(vocab), args.dim, args.window, args.negatives, args.epochs, args.lr, seed)
    table.save(args.out)
    vocab_out = args.vocab_out or args.out + ".vocab"
    vocab.save(vocab_out)
    for i, l in enumerate(table.losses):
        logger.info("w2v epoch %d loss %.4f", i + 1, l)
    print(f"wrote {args.out} ({len(table)}x{table.dim}) and {vocab_out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    train_docs = _load_split(args.corpus, "train")
    val_docs = _load_split(args.corpus, "val")
    if not train_docs:
        raise UsageError("training split is empty")
    pipe = Pipeline(cfg).fit([d for d, _ in train_docs])
    out = Path(args.out)
    if pipe.table is not None and not cfg["embedder"]["table"]:
        # persist an inline-trained table next to the checkpoint
        table_path = out.with_name(out.name + ".embd")
        pipe.table.save(table_path)
        cfg = cfg.override({"embedder.table": str(table_path.resolve())})
    net_cfg = cfg.network_config()
    samples = [pipe.sample(d, g) for d, g in train_docs]
    val = [pipe.sample(d, g) for d, g in val_docs]
    log_path = args.log or str(out) + ".csv"
    result = train(samples, net_cfg, cfg.train_config(), val, log_path=log_path)
    extra = {"pipeline": cfg.to_dict(), "vocab": pipe.vocab.pieces if pipe.vocab is not None else None}
    save_checkpoint(out, result.params, net_cfg, extra)
    final = result.log[-1] if result.log else None
    print(f"wrote {out} and {log_path}")
    if final is not None:
        print(f"final train loss {final.train_loss:.4f} val loss {final.val_loss:.4f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    pipe, params, net_cfg = _restore(args.checkpoint)
    doc = load_document(args.doc)
    out = predict(pipe.inputs(doc), params, net_cfg)
    seg = out.seg_logits[0]
    save_grid(GridTensor(GridSpec(*seg.shape), seg), args.out)
    box = out.box_preds[0]
    box_path = args.out + ".box"
    save_grid(GridTensor(GridSpec(*box.shape), box), box_path)
    print(f"wrote {args.out} (segmentation logits) and {box_path} (box offsets)")
    return EXIT_OK


def cmd_extract(args) -> int:
    pipe, params, net_cfg = _restore(args.checkpoint)
    results = [pipe.extract(load_document(p), params, net_cfg).to_dict() for p in args.docs]
    text = "\n".join(json.dumps(r, sort_keys=True) for r in results)
    _emit(results, args.json, text)
    return EXIT_OK


def cmd_eval(args) -> int:
    data = _load_split(args.corpus, args.split)
    if args.oracle:
        cfg = _config(args)
        pipe = Pipeline(cfg).fit([d for d, _ in data])
        results = []
        for doc, gt in data:
            seq = pipe.sequence(doc, gt)
            seg, box = oracle_outputs(seq, doc, gt, cfg.hw)
            results.append(extract(seg, box, seq, doc, cfg["iou_threshold"]))
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint (or --oracle)")
        pipe, params, net_cfg = _restore(args.checkpoint)
        _check_compatible(args, pipe, net_cfg)
        results = [pipe.extract(doc, params, net_cfg) for doc, _ in data]
    report = evaluate(results, data)
    _emit(report.to_dict(), args.json, report.table())
    return EXIT_OK


def cmd_viz(args) -> int:
    t = load_grid(args.grid_file)
    save_png(t, args.out, scale=args.scale)
    print(f"wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bertgrid", description="2D document representation and field extraction pipeline")
    p.add_argument("--seed", type=int, default=None, help="global seed overriding every seed in the config")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    # --seed is accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="global seed overriding every seed in the config")
    sub = p.add_subparsers(dest="command", required=True)
    add = lambda name, **kw: sub.add_parser(name, parents=[common], **kw)

    def with_config(sp, repr_flag=True):
        sp.add_argument("--config", help="pipeline config JSON (unknown keys are rejected)")
        if repr_flag:
            sp.add_argument("--repr", choices=["chargrid", "wordgrid", "bertgrid", "combined"], help="override config 'representation'")
            sp.add_argument("--grid", type=int, nargs=2, metavar=("H", "W"), help="override config 'grid'")

    s = add("synth", help="generate a synthetic labelled corpus")
    s.add_argument("--count", type=int, required=True, help="number of documents")
    s.add_argument("--out", required=True, help="output directory (docs/, labels/, manifest.json)")
    s.add_argument("--config", help="JSON with SynthConfig fields")
    s.add_argument("--split", type=float, nargs=3, default=[0.8, 0.1, 0.1], metavar=("TRAIN", "VAL", "TEST"), help="split fractions")
    s.set_defaults(func=cmd_synth)

    s = add("gridify", help="build the input grid(s) of one document")
    s.add_argument("doc", help="document JSON")
    s.add_argument("--out", required=True, help="GRID output; combined writes <out>.char and <out>.dense")
    s.add_argument("--vocab", help="vocab file (default: built from the document itself)")
    s.add_argument("--png", action="store_true", help="also write <grid>.png visualizations")
    with_config(s)
    s.set_defaults(func=cmd_gridify)

    s = add("w2v", help="train static word-piece embeddings (skip-gram, negative sampling)")
    s.add_argument("corpus", help="corpus directory with manifest.json")
    s.add_argument("--out", required=True, help="EMBD output")
    s.add_argument("--vocab", help="existing vocab file (default: built from the split)")
    s.add_argument("--vocab-out", help="where to write the vocab (default <out>.vocab)")
    s.add_argument("--split", default="train", help="manifest split to train on")
    s.add_argument("--dim", type=int, default=32)
    s.add_argument("--window", type=int, default=2)
    s.add_argument("--negatives", type=int, default=5)
    s.add_argument("--epochs", type=int, default=5)
    s.add_argument("--lr", type=float, default=0.05)
    s.add_argument("--max-size", type=int, default=2000, help="max multi-character vocab entries")
    s.add_argument("--min-freq", type=int, default=2)
    s.set_defaults(func=cmd_w2v)

    s = add("train", help="train the network on a corpus' train split")
    s.add_argument("corpus", help="corpus directory with manifest.json")
    s.add_argument("--out", required=True, help="checkpoint output (GNET)")
    s.add_argument("--log", help="CSV log path (default <out>.csv)")
    s.add_argument("--epochs", type=int, help="override train.epochs")
    s.add_argument("--lr", type=float, help="override train.lr")
    with_config(s)
    s.set_defaults(func=cmd_train)

    s = add("predict", help="write raw network outputs for one document")
    s.add_argument("doc")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True, help="GRID of segmentation logits; box offsets go to <out>.box")
    s.set_defaults(func=cmd_predict)

    s = add("extract", help="extract header fields and line items from documents")
    s.add_argument("docs", nargs="+")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--json", action="store_true", help="one JSON array instead of JSON lines")
    s.set_defaults(func=cmd_extract)

    s = add("eval", help="score extractions on a corpus split")
    s.add_argument("corpus")
    s.add_argument("--checkpoint")
    s.add_argument("--split", default="test")
    s.add_argument("--oracle", action="store_true", help="use ground-truth outputs instead of a model")
    s.add_argument("--json", action="store_true", help="machine-readable report")
    with_config(s)
    s.set_defaults(func=cmd_eval)

    s = add("viz", help="render a GRID file as PNG")
    s.add_argument("grid_file")
    s.add_argument("--out", required=True)
    s.add_argument("--scale", type=int, default=4, help="pixels per grid cell")
    s.set_defaults(func=cmd_viz)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error: {exc} (batch {exc.batch_index})", file=sys.stderr)
        return EXIT_NUMERIC
    except DocumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for v in exc.violations:
            print(f"  {v}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, ConfigError, GenerationError, GridError, NetworkError, EmbeddingError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
