"""Command-line interface: train, eval, retrieve, encode, mine.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
failure. Diagnostics go to stderr; primary output (tables, rankings,
per-epoch loss lines) goes to stdout and is byte-stable for identical
inputs and seeds.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dataio, evalret, mining, trainer
from .errors import (
    ConfigError,
    DataFormatError,
    EmptyTextError,
    MiningError,
    NumericError,
    TextVisualError,
)
from .textenc import encode, tokenize


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise _UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="textvisual", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train an encoder into a fixed image-feature space")
    p.add_argument("--config", required=True, help="key = value training config file")
    p.add_argument("--captions", required=True, help="caption pairs TSV (<image_id>\\t<text>)")
    p.add_argument("--clicks", help="click pairs TSV; enables multi-task training")
    p.add_argument("--features", required=True, help="image feature store (binary or TSV)")
    p.add_argument("--wordvecs", required=True, help="word vector text file")
    p.add_argument("--stopwords", help="stop word list (default: vendored English list)")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("eval", help="retrieval evaluation of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--labels", help="id<TAB>label map, enables mAP")
    p.add_argument("--direction", required=True, choices=[evalret.DIRECTION_T2I, evalret.DIRECTION_I2T])
    p.add_argument("--k", default="1,10,20", help="comma-separated recall cutoffs")
    p.add_argument("--map-r", type=int, default=50, dest="map_r")
    p.add_argument("--out", help="also write the table to this TSV file")

    p = sub.add_parser("retrieve", help="rank stored images for one text query")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--top", type=int, default=10)

    p = sub.add_parser("encode", help="embed texts and write them as a feature file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--texts", required=True, help="one text per line")
    p.add_argument("--out", required=True)

    p = sub.add_parser("mine", help="dump mined hard negatives for one shuffled epoch")
    p.add_argument("--features", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--batch-size", type=int, default=512, dest="batch_size")
    p.add_argument("--n", type=int, default=3)
    p.add_argument("--mode", choices=["any", "all"], default="any")
    p.add_argument("--seed", type=int, default=0)
    return parser


def _cmd_train(args) -> int:
    table = dataio.load_word_vectors(args.wordvecs)
    store = dataio.load_features(args.features)
    cfg = trainer.load_train_config(
        args.config, default_word_dim=table.dim, default_output_dim=store.dim
    )
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    caption_ds = dataio.load_pairs(args.captions, "caption")
    click_ds = dataio.load_pairs(args.clicks, "click") if args.clicks else None
    stop_words = dataio.load_stopwords(args.stopwords)

    def log(epoch, loss, lr):
        print(f"{epoch}\t{loss!r}\t{lr!r}")
        sys.stdout.flush()

    trainer.train(
        caption_ds,
        click_ds,
        store,
        table,
        cfg,
        out_path=args.out,
        stop_words=stop_words,
        log_fn=log,
    )
    return 0


def _report_lines(report: evalret.EvalReport) -> list[str]:
    header = ["dataset", "direction"]
    header.extend(f"R@{k}" for k in sorted(report.recall))
    header.append(f"mAP@{report.config.get('map_r')}")
    return ["\t".join(header), "\t".join(report.cells())]


def _cmd_eval(args) -> int:
    ckpt = dataio.load_checkpoint(args.ckpt)
    pairs = dataio.load_pairs(args.pairs, "caption")
    store = dataio.load_features(args.features)
    labels = dataio.load_labels(args.labels) if args.labels else None
    try:
        ks = [int(k) for k in args.k.split(",") if k.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse --k value {args.k!r}") from None
    report = evalret.evaluate(
        ckpt,
        pairs,
        store,
        labels=labels,
        direction=args.direction,
        ks=ks,
        map_r=args.map_r,
        dataset_name=Path(args.pairs).stem,
    )
    lines = _report_lines(report)
    print("\n".join(lines))
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


def _cmd_retrieve(args) -> int:
    ckpt = dataio.load_checkpoint(args.ckpt)
    store = dataio.load_features(args.features)
    if ckpt.encoder.output_dim != store.dim:
        raise ConfigError(
            f"checkpoint output_dim {ckpt.encoder.output_dim} != feature dim {store.dim}"
        )
    params = ckpt.encoder_params()
    seq = tokenize(args.query, ckpt.encoder.max_seq_len)
    query = encode(seq, params, ckpt.encoder, training=False)
    ids, matrix = store.as_index()
    index = evalret.RetrievalIndex(ids, matrix)
    for image_id, dist in evalret.retrieve_topk(query, index, args.top):
        print(f"{image_id}\t{dist!r}")
    return 0


def _cmd_encode(args) -> int:
    ckpt = dataio.load_checkpoint(args.ckpt)
    params = ckpt.encoder_params()
    texts = [
        line
        for line in Path(args.texts).read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    if not texts:
        raise DataFormatError("no texts to encode", args.texts)
    out_store = dataio.FeatureStore(dim=ckpt.encoder.output_dim)
    for i, text in enumerate(texts):
        seq = tokenize(text, ckpt.encoder.max_seq_len)
        out_store.add(f"t{i}", encode(seq, params, ckpt.encoder, training=False))
    dataio.write_features(out_store, args.out)
    return 0


def _cmd_mine(args) -> int:
    store = dataio.load_features(args.features)
    pairs = dataio.load_pairs(args.pairs, "caption")
    stop_words = dataio.load_stopwords()
    if args.batch_size < 2:
        raise ConfigError(f"--batch-size must be >= 2, got {args.batch_size}")
    if args.n < 1:
        raise ConfigError(f"--n must be >= 1, got {args.n}")
    rng = np.random.default_rng(args.seed)
    index_batches = trainer.make_epoch_index_batches(len(pairs.samples), args.batch_size, rng)
    for chunk in index_batches:
        batch = []
        for local, ds_idx in enumerate(chunk):
            text, image_id = pairs.samples[ds_idx]
            seq = tokenize(text, 18, stop_words)
            batch.append(mining.BatchSample(local, image_id, store.vector(image_id), seq.content_words))
        mined = mining.mine_negatives(batch, args.n, args.mode)
        for entry in mined.entries:
            pos_idx = int(chunk[entry.positive_index])
            for neg_local, dist in entry.negatives:
                print(f"{pos_idx}\t{int(chunk[neg_local])}\t{dist!r}\t{entry.filter_mode_used}")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "retrieve": _cmd_retrieve,
    "encode": _cmd_encode,
    "mine": _cmd_mine,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except _UsageError:
        return 1
    try:
        return _COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"textvisual: numeric failure: {exc}", file=sys.stderr)
        return 3
    except (DataFormatError, ConfigError, EmptyTextError, MiningError) as exc:
        print(f"textvisual: error: {exc}", file=sys.stderr)
        return 2
    except TextVisualError as exc:
        print(f"textvisual: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"textvisual: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
