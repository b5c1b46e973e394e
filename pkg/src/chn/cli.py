"""Command-line entry point: ``chn <subcommand> ...``.

Exit status: 0 success, 1 usage error, 2 data/parse error, 3 numerical
failure (divergence or a failed verification).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import checks
from .data import generate_synthetic, load_dataset, make_split, save_dataset
from .errors import (ConfigError, DivergenceError, InputError, ParseError, ShapeError,
                     UndefinedMetricError, VerificationError)
from .hashing import (all_codes, hamming_matrix, load_codes, random_codes, rank_by_distance,
                      save_codes, verify_identities)
from .metrics import (format_metrics, map_at_r, precision_at_top_r, precision_recall_curve,
                      relevance_matrix)
from .net import load_model, save_model
from .training import encode, load_config, sweep, train

log = logging.getLogger("chn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
IMAGE_MODEL, TEXT_MODEL = "image.chnm", "text.chnm"
IMAGE_CODES, TEXT_CODES = "image.chnb", "text.chnb"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from None
    if value <= 0:
        raise argparse.ArgumentTypeError(f"{text!r} must be positive")
    return value


def _float_list(text):
    try:
        return [float(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a list of numbers") from None


def _int_list(text):
    try:
        return tuple(int(t) for t in text.replace(",", " ").split())
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a list of integers") from None


def _add_train_flags(p):
    p.add_argument("--data", required=True, help="dataset directory written by gen-data")
    p.add_argument("--config", help="key = value config file; flags override it")
    p.add_argument("--bits", type=_positive_int, help="hash code length b")
    p.add_argument("--epochs", type=int, help="training epochs (required here or in --config)")
    p.add_argument("--lambda", dest="lam", type=float, help="within-modal loss weight")
    p.add_argument("--gamma", type=float, help="quantization loss weight")
    p.add_argument("--lr", dest="learning_rate", type=float, help="SGD learning rate")
    p.add_argument("--momentum", type=float, help="SGD momentum")
    p.add_argument("--batch-size", type=int, help="objects per mini-batch")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--variant", choices=["chn", "chn-w", "chn-c", "chn-q"], help="objective variant")
    p.add_argument("--image-layers", dest="image_layer_dims", type=_int_list,
                   help="hidden sizes of the image network, e.g. 128 or 256,128")
    p.add_argument("--text-layers", dest="text_layer_dims", type=_int_list,
                   help="hidden sizes of the text network")
    p.add_argument("--image-dropout", type=float, help="dropout on image hidden layers")
    p.add_argument("--text-dropout", type=float, help="dropout on text hidden layers")
    p.add_argument("--fch-lr-mult", type=float, help="learning-rate multiplier for the hash layer")
    p.add_argument("--lr-decay-every", type=int, help="multiply lr by --lr-decay-factor every k epochs (0 = off)")
    p.add_argument("--lr-decay-factor", type=float, help="step decay factor")
    p.add_argument("--eval-every", type=int, help="log validation MAP@50 every k epochs (0 = off)")


_TRAIN_KEYS = ("bits", "epochs", "lam", "gamma", "learning_rate", "momentum", "batch_size", "seed",
               "variant", "image_layer_dims", "text_layer_dims", "image_dropout", "text_dropout",
               "fch_lr_mult", "lr_decay_every", "lr_decay_factor", "eval_every")


def _config_from_args(args):
    overrides = {k: getattr(args, k) for k in _TRAIN_KEYS if hasattr(args, k)}
    return load_config(args.config, overrides)


def _load_data(directory):
    ds, split = load_dataset(directory)
    if split is None:
        raise ParseError("dataset has no split.txt", str(directory))
    return ds, split


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="chn", description="Correlation hashing networks for cross-modal retrieval.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="write a synthetic bimodal dataset")
    p.add_argument("--n", type=_positive_int, default=500, help="number of items")
    p.add_argument("--dx", type=_positive_int, default=64, help="image feature dimension")
    p.add_argument("--dy", type=_positive_int, default=128, help="text feature dimension")
    p.add_argument("--classes", type=int, default=5, help="number of classes (>= 2)")
    p.add_argument("--noise", type=float, default=0.1, help="image feature noise scale")
    p.add_argument("--multi-label-prob", type=float, default=0.2, help="chance of a second label")
    p.add_argument("--query", type=int, default=100, help="query split size")
    p.add_argument("--val", type=int, default=100, help="validation split size")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="train both networks")
    _add_train_flags(p)
    p.add_argument("--out", help="output directory for models and history (default: <data>/model)")

    p = sub.add_parser("encode", help="write bit-packed codes for a split")
    p.add_argument("--model", required=True, help="directory holding image.chnm and text.chnm")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", choices=["all", "train", "query", "val"], default="all", help="items to encode")
    p.add_argument("--out", required=True, help="output directory for image.chnb, text.chnb and items.txt")

    p = sub.add_parser("search", help="rank a database of codes for each query code")
    p.add_argument("--db", required=True, help="database .chnb file")
    p.add_argument("--queries", required=True, help="query .chnb file")
    p.add_argument("--R", type=_positive_int, default=50, help="results per query")
    p.add_argument("--out", required=True, help="results TSV")

    p = sub.add_parser("eval", help="MAP@R, precision-recall and precision@top-R")
    p.add_argument("--model", required=True, help="directory holding image.chnm and text.chnm")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--queries", choices=["query", "val"], default="query", help="split used as queries")
    p.add_argument("--R", type=_positive_int, default=50, help="MAP cutoff")
    p.add_argument("--grid", type=_int_list, default=(1, 5, 10, 20, 50, 100),
                   help="R values for the precision@top-R curve")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("sweep", help="grid search lambda and gamma on validation MAP@50")
    _add_train_flags(p)
    p.add_argument("--lambdas", type=_float_list, required=True, help="comma-separated lambda grid")
    p.add_argument("--gammas", type=_float_list, required=True, help="comma-separated gamma grid")
    p.add_argument("--out", required=True, help="output TSV")

    p = sub.add_parser("grad-check", help="finite-difference check of the analytic gradients")
    p.add_argument("--configs", type=_positive_int, default=100, help="random configurations")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--step", type=float, default=1e-5, help="finite-difference step")
    p.add_argument("--tol", type=float, default=1e-4, help="failure threshold on max relative error")

    p = sub.add_parser("verify-bound", help="ITQ error against the cosine quantization bound")
    p.add_argument("--bits", type=_positive_int, default=8, help="embedding dimension")
    p.add_argument("--samples", type=_positive_int, default=10000, help="uniform interior samples")
    p.add_argument("--no-vertices", action="store_true", help="skip the 2**bits hypercube vertices")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--out", required=True, help="per-item report CSV")

    p = sub.add_parser("verify-identities", help="check the Hamming / inner-product / cosine identities")
    p.add_argument("--codes", default="random", help="'random' or a .chnb file")
    p.add_argument("--bits", type=_positive_int, default=8, help="code length for random codes")
    p.add_argument("--n", type=_positive_int, default=1000, help="number of random codes")
    p.add_argument("--exhaustive", action="store_true",
                   help="check every pair; with random codes this enumerates all 2**bits codes")
    p.add_argument("--pairs", type=_positive_int, default=100000, help="sampled pairs when not exhaustive")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    return parser


# -- subcommands ------------------------------------------------------------------

def cmd_gen_data(args):
    ds = generate_synthetic(args.n, args.dx, args.dy, args.classes, args.noise, args.seed,
                            args.multi_label_prob)
    split = make_split(args.n, args.query, args.val, args.seed)
    save_dataset(args.out, ds, split)
    print(f"wrote {args.n} items to {args.out}")


def cmd_train(args):
    cfg = _config_from_args(args)
    ds, split = _load_data(args.data)
    out = Path(args.out) if args.out else Path(args.data) / "model"
    out.mkdir(parents=True, exist_ok=True)
    try:
        image_net, text_net, history = train(ds, split, cfg)
    except DivergenceError as exc:
        if exc.checkpoint is not None:
            save_model(out / IMAGE_MODEL, exc.checkpoint[0])
            save_model(out / TEXT_MODEL, exc.checkpoint[1])
            log.error("saved last finite parameters to %s", out)
        raise
    save_model(out / IMAGE_MODEL, image_net)
    save_model(out / TEXT_MODEL, text_net)
    (out / "history.csv").write_text(history.to_csv(), encoding="utf-8")
    for rec in history.epochs:
        print(f"epoch {rec.epoch} total={rec.loss.total:.6f}")
    print(f"wrote models to {out}")


def _split_indices(split, n, which):
    if which == "all":
        return np.arange(n)
    return getattr(split, which)


def _load_models(directory):
    d = Path(directory)
    return load_model(d / IMAGE_MODEL), load_model(d / TEXT_MODEL)


def cmd_encode(args):
    image_net, text_net = _load_models(args.model)
    ds, split = load_dataset(args.data)
    if split is None and args.split != "all":
        raise ParseError("dataset has no split.txt", args.data)
    idx = _split_indices(split, ds.n, args.split)
    if len(idx) == 0:
        raise ConfigError(f"split {args.split!r} is empty")
    _, image_codes = encode(image_net, ds.image_features[idx])
    _, text_codes = encode(text_net, ds.text_features[idx])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_codes(out / IMAGE_CODES, image_codes)
    save_codes(out / TEXT_CODES, text_codes)
    (out / "items.txt").write_text("".join(f"{int(i)}\n" for i in idx), encoding="utf-8")
    print(f"encoded {len(idx)} items ({image_codes.b} bits) to {out}")


def search_tsv(db, queries, R: int) -> str:
    dist = hamming_matrix(queries, db)
    order = rank_by_distance(dist)[:, :R]
    lines = ["query_index\trank\tdb_index\tdistance"]
    for q in range(queries.n):
        for rank, k in enumerate(order[q], start=1):
            lines.append(f"{q}\t{rank}\t{int(k)}\t{int(dist[q, k])}")
    return "\n".join(lines) + "\n"


def cmd_search(args):
    db = load_codes(args.db)
    queries = load_codes(args.queries)
    if db.b != queries.b:
        raise ShapeError(f"database has {db.b}-bit codes, queries have {queries.b}")
    Path(args.out).write_text(search_tsv(db, queries, args.R), encoding="utf-8")
    print(f"ranked {queries.n} queries against {db.n} items")


def cmd_eval(args):
    image_net, text_net = _load_models(args.model)
    ds, split = _load_data(args.data)
    q_idx = getattr(split, args.queries)
    db_idx = split.train
    if len(q_idx) == 0:
        raise ConfigError(f"split {args.queries!r} is empty")
    _, img_q = encode(image_net, ds.image_features[q_idx])
    _, txt_q = encode(text_net, ds.text_features[q_idx])
    _, img_db = encode(image_net, ds.image_features[db_idx])
    _, txt_db = encode(text_net, ds.text_features[db_idx])
    rel = relevance_matrix(ds.labels[q_idx], ds.labels[db_idx])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics = {}
    for name, (q, d) in {"i2t": (img_q, txt_db), "t2i": (txt_q, img_db)}.items():
        dist = hamming_matrix(q, d)
        metrics[f"{name}.map@{args.R}"] = map_at_r(dist, rel, args.R)
        precision_recall_curve(dist, rel, q.b).save_csv(out / f"pr_{name}.csv", ("recall", "precision"))
        precision_at_top_r(dist, rel, args.grid).save_csv(out / f"topr_{name}.csv", ("R", "precision"))
    metrics["queries"] = len(q_idx)
    metrics["eligible_queries"] = int(rel.any(axis=1).sum())
    text = format_metrics(metrics)
    (out / "metrics.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def cmd_sweep(args):
    cfg = _config_from_args(args)
    ds, split = _load_data(args.data)
    result = sweep(ds, split, cfg, args.lambdas, args.gammas)
    Path(args.out).write_text(result.to_tsv(), encoding="utf-8")
    lam, gam, score = result.best
    print(f"best lambda={lam} gamma={gam} val_map@50={score:.4f}")


def cmd_grad_check(args):
    errors = checks.gradient_suite(args.configs, args.seed, args.step)
    worst = max(errors)
    print(f"configs={len(errors)} max_relative_error={worst:.3e}")
    if worst > args.tol:
        print(f"FAIL: exceeds tolerance {args.tol:g}")
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_verify_bound(args):
    U = checks.sample_embeddings(args.bits, args.samples, args.seed, with_vertices=not args.no_vertices)
    report = checks.quantization_bound_report(U)
    Path(args.out).write_text(checks.bound_report_csv(report), encoding="utf-8")
    n_vertex = 0 if args.no_vertices else 2 ** args.bits
    interior = report.violated[: args.samples]
    vertex = report.violated[args.samples:]
    print(f"items={len(report.violated)} violations={int(report.violated.sum())} "
          f"violation_rate={report.violation_rate:.4f}")
    print(f"interior_violation_rate={float(np.mean(interior)):.4f}")
    if n_vertex:
        print(f"vertex_violations={int(vertex.sum())} of {n_vertex}")
    print("identities=ok")


def cmd_verify_identities(args):
    if args.codes == "random":
        codes = all_codes(args.bits) if args.exhaustive else random_codes(args.n, args.bits, args.seed)
    else:
        codes = load_codes(args.codes)
    report = verify_identities(codes, args.pairs, args.seed, exhaustive=args.exhaustive)
    print(f"pairs={report.pairs_checked} inner_product_violations={report.inner_product_violations} "
          f"max_cosine_deviation={report.max_cosine_deviation:.3e}")
    if not report.ok:
        print("FAIL")
        return EXIT_NUMERIC
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "encode": cmd_encode, "search": cmd_search,
    "eval": cmd_eval, "sweep": cmd_sweep, "grad-check": cmd_grad_check,
    "verify-bound": cmd_verify_bound, "verify-identities": cmd_verify_identities,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        status = COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"chn {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ParseError, ShapeError, InputError, FileNotFoundError, IsADirectoryError,
            NotADirectoryError, IndexError) as exc:
        print(f"chn {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, VerificationError, UndefinedMetricError) as exc:
        print(f"chn {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK if status is None else status


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
