"""Command-line entry point: ``rbfsnt <verb> [flags]``.

Exit codes: 0 success, 1 usage, 2 data, 3 numeric failure. Failures print a
single JSON line on stderr.
"""
import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .errors import ConfigError, DataError, NonFiniteError, RbfsntError, ShapeError

log = logging.getLogger("rbfsnt")

VERBS = ("train", "eval", "attack", "detect", "retrieve", "export-maps", "export-embeddings")
EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p):
    g = p.add_argument_group("run")
    g.add_argument("--seed", type=int, default=None,
                   help="seed for every stochastic step (falls back to $RBFSNT_SEED, then 0)")
    g.add_argument("--threads", type=int, default=1, help="worker threads (default 1)")
    g.add_argument("--config", help="key=value file; flags given on the command line win")
    g.add_argument("--log-level", default="WARNING")


def _data(p):
    g = p.add_argument_group("dataset")
    g.add_argument("--mnist-dir", help="directory holding the MNIST IDX files")
    g.add_argument("--split", choices=("train", "test"), default="test")
    g.add_argument("--images", help="IDX image file (instead of --mnist-dir)")
    g.add_argument("--labels", help="IDX label file")
    g.add_argument("--blobs", type=int, metavar="N_PER_CLASS",
                   help="synthetic Gaussian blobs instead of files")
    g.add_argument("--blob-classes", type=int, default=3)
    g.add_argument("--blob-dim", type=int, default=2)
    g.add_argument("--blob-spread", type=float, default=0.05)
    g.add_argument("--offset", type=int, default=0, help="skip the first N samples")
    g.add_argument("--limit", type=int, help="use at most N samples")


def _checkpoint(p):
    p.add_argument("--checkpoint", required=True, help="model checkpoint to read")


def _attack_flags(p, default="fgsm"):
    g = p.add_argument_group("attack")
    g.add_argument("--attack", choices=("fgsm", "gradient", "deepfool"), default=default)
    g.add_argument("--strength", "--eps", type=float, default=None,
                   help="epsilon (fgsm), step (gradient) or overshoot (deepfool)")
    g.add_argument("--max-iter", type=int, default=50, help="deepfool iterations")
    g.add_argument("--only-correct", action="store_true",
                   help="attack only samples the model classifies correctly")


def build_parser():
    parser = _Parser(prog="rbfsnt", description="RBF-headed CNN toolkit: training, attacks, "
                     "entropy-based attack detection, retrieval.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="verb", metavar="VERB", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _data(p)
    g = p.add_argument_group("evaluation data")
    g.add_argument("--test-images")
    g.add_argument("--test-labels")
    g.add_argument("--test-limit", type=int)
    g.add_argument("--no-test", action="store_true", help="skip per-epoch test evaluation")
    g = p.add_argument_group("model")
    g.add_argument("--arch", choices=("cnn", "mlp"), help="default: cnn for images, mlp for blobs")
    g.add_argument("--widths", default="16,32,64,64", help="conv widths (cnn) or hidden sizes (mlp)")
    g.add_argument("--embed-dim", type=int, default=64)
    g.add_argument("--centers", type=int, default=10)
    g.add_argument("--kernel", default="quadratic")
    g.add_argument("--metric", choices=("euclidean", "diagonal", "full"), default="full")
    g.add_argument("--per-cluster-sigma", action="store_true")
    g.add_argument("--head", choices=("rbf", "fc"), default="rbf")
    g = p.add_argument_group("optimization")
    g.add_argument("--epochs", type=int, default=5)
    g.add_argument("--batch-size", type=int, default=64)
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--weight-decay", type=float, default=0.0)
    g.add_argument("--lam", type=float, default=0.5, help="weight of the clustering term")
    g.add_argument("--optimizer", choices=("sgd", "sgd_decoupled_wd", "adamw"), default="adamw")
    g.add_argument("--precision", choices=("float32", "float64"), default="float32")
    g.add_argument("--output-init", choices=("gradient", "lstsq"), default="gradient")
    g.add_argument("--plain-unsup", action="store_true",
                   help="clustering term uses the plain euclidean norm")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--report", help="per-epoch CSV")
    p.add_argument("--no-timing", action="store_true",
                   help="write 0 for epoch durations so reruns are byte-identical")
    _common(p)

    p = sub.add_parser("eval", help="accuracy and loss of a checkpoint")
    _checkpoint(p)
    _data(p)
    p.add_argument("--out", help="JSON summary path (stdout otherwise)")
    _common(p)

    p = sub.add_parser("attack", help="run an attack over a dataset and write a CSV")
    _checkpoint(p)
    _data(p)
    _attack_flags(p)
    p.add_argument("--out", required=True, help="attack CSV path")
    _common(p)

    p = sub.add_parser("detect", help="attack, score with average local entropy, build the ROC")
    _checkpoint(p)
    _data(p)
    _attack_flags(p)
    g = p.add_argument_group("detector")
    g.add_argument("--tau", type=float, help="fixed threshold (default: percentile policy)")
    g.add_argument("--tau-percentile", type=float, default=99.0,
                   help="percentile of clean scores used as the threshold")
    g.add_argument("--patch", type=int, default=3)
    g.add_argument("--entropy-method", choices=("histogram", "intensity"), default="histogram")
    p.add_argument("--scores", required=True, help="per-sample scores CSV")
    p.add_argument("--roc", help="ROC curve CSV")
    p.add_argument("--summary", help="JSON summary path (stdout otherwise)")
    _common(p)

    p = sub.add_parser("retrieve", help="nearest and farthest samples under the learned metric")
    _checkpoint(p)
    _data(p)
    p.add_argument("--query", type=int, default=0, help="index of the query inside the dataset")
    p.add_argument("--top", type=int, default=5)
    p.add_argument("--out", required=True, help="CSV of ranked neighbors")
    _common(p)

    p = sub.add_parser("export-maps", help="write guided-backprop and entropy maps as PGM")
    _checkpoint(p)
    _data(p)
    _attack_flags(p, default=None)
    p.add_argument("--patch", type=int, default=3)
    p.add_argument("--entropy-method", choices=("histogram", "intensity"), default="histogram")
    p.add_argument("--out-dir", required=True)
    _common(p)

    p = sub.add_parser("export-embeddings", help="write embeddings, labels and cluster ids")
    _checkpoint(p)
    _data(p)
    p.add_argument("--out", required=True, help="embeddings CSV")
    p.add_argument("--centers-out", help="centers CSV")
    _common(p)
    return parser


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def read_config(path):
    """``key = value`` lines; ``#`` starts a comment; quotes around values are dropped."""
    out = {}
    try:
        with open(path) as f:
            lines = f.read().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line or line.startswith("["):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
            value = value[1:-1]
        out[key.replace("-", "_")] = value
    return out


def _subparser(parser, verb):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[verb]
    raise UsageError(f"unknown verb {verb}")


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = _subparser(parser, args.verb)
        actions = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, value in read_config(args.config).items():
            action = actions.get(key)
            if action is None or key in ("config", "help"):
                raise UsageError(f"unknown config key {key!r} for {args.verb}")
            if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
                defaults[key] = _bool(value)
            else:
                defaults[key] = value  # argparse converts string defaults with the flag's type
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    if args.seed is None:
        env = os.environ.get("RBFSNT_SEED")
        try:
            args.seed = int(env) if env not in (None, "") else 0
        except ValueError:
            raise UsageError(f"RBFSNT_SEED must be an integer, got {env!r}") from None
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    return args


def load_dataset(args, split=None, images=None, labels=None, limit=None, offset=None):
    from .data import load_idx, load_mnist, make_blobs
    split = split or args.split
    images = images if images is not None else args.images
    labels = labels if labels is not None else args.labels
    if args.blobs is not None:
        # the test split draws fresh points around the same centers
        rng = np.random.default_rng([args.seed, 0])
        ds = make_blobs(args.blobs, args.blob_classes, args.blob_dim, args.blob_spread, rng)
        if split == "test":
            noise = np.random.default_rng([args.seed, 1]).standard_normal(ds.images.shape)
            ds.images = np.clip(ds.centers[ds.labels][:, None, None, :]
                                + args.blob_spread * noise, 0, 1)
        ds.split = split
    elif images or labels:
        if not (images and labels):
            raise UsageError("--images and --labels go together")
        ds = load_idx(images, labels, split=split)
    elif args.mnist_dir:
        ds = load_mnist(args.mnist_dir, split)
    else:
        raise UsageError("no dataset: give --mnist-dir, --images/--labels, or --blobs")
    offset = args.offset if offset is None else offset
    limit = args.limit if limit is None else limit
    end = len(ds) if limit is None else min(len(ds), offset + limit)
    if offset or end < len(ds):
        ds = ds.subset(np.arange(min(offset, len(ds)), end))
    return ds


def _widths(text):
    try:
        return tuple(int(w) for w in text.split(",") if w.strip())
    except ValueError:
        raise UsageError(f"--widths must be comma-separated integers, got {text!r}") from None


def cmd_train(args):
    from .checkpoint import save_checkpoint
    from .model import build_cnn_rbf, build_mlp_rbf
    from .trainer import TrainConfig, _rngs, train

    train_set = load_dataset(args, split="train")
    test_set = None
    if not args.no_test:
        if args.test_images or args.test_labels:
            test_set = load_dataset(args, "test", args.test_images, args.test_labels,
                                    args.test_limit, 0)
        elif args.mnist_dir or args.blobs is not None:
            test_set = load_dataset(args, "test", "", "", args.test_limit, 0)
    config = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                         weight_decay=args.weight_decay, lam=args.lam, optimizer=args.optimizer,
                         seed=args.seed, precision=args.precision, output_init=args.output_init,
                         plain_unsup=args.plain_unsup, timing=not args.no_timing)
    init_rng = _rngs(args.seed)[0]
    shape = train_set.images.shape[1:]
    arch = args.arch or ("mlp" if args.blobs is not None else "cnn")
    common = dict(n_classes=train_set.n_classes, kernel=args.kernel, metric_mode=args.metric,
                  per_cluster_sigma=args.per_cluster_sigma, head=args.head,
                  dtype=args.precision)
    if arch == "cnn":
        model = build_cnn_rbf(init_rng, shape, n_centers=args.centers,
                              widths=_widths(args.widths), embed_dim=args.embed_dim, **common)
    else:
        model = build_mlp_rbf(init_rng, shape, n_centers=args.centers,
                              hidden=_widths(args.widths) if args.arch == "mlp" else (),
                              embed_dim=args.embed_dim if args.arch == "mlp" else None, **common)
    report = train(model, train_set, config, test_set)
    save_checkpoint(model, args.out, {"seed": args.seed, "best_epoch": report.best_epoch})
    if args.report:
        report.to_csv(args.report)
    print(json.dumps({"best_epoch": report.best_epoch, "best_acc": report.best_test_acc,
                      "checkpoint": args.out}, sort_keys=True))


def _model(args):
    from .checkpoint import load_checkpoint
    model, _ = load_checkpoint(args.checkpoint)
    return model


def _emit(obj, path):
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    if path:
        with open(path, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def cmd_eval(args):
    from .trainer import evaluate
    model = _model(args)
    res = evaluate(model, load_dataset(args), threads=args.threads)
    _emit(res.to_dict(), args.out)


def _attack_set(args, model):
    ds = load_dataset(args)
    ids = np.arange(args.offset, args.offset + len(ds))
    if args.only_correct and len(ds):
        keep = model.predict(ds.images) == ds.labels
        ds, ids = ds.subset(np.flatnonzero(keep)), ids[keep]
    return ds, ids


def cmd_attack(args):
    from .attacks import attack_many, write_attack_csv
    model = _model(args)
    ds, ids = _attack_set(args, model)
    results = attack_many(model, ds.images, ds.labels, args.attack, args.strength,
                          args.max_iter, args.threads)
    write_attack_csv(args.out, results, ids)
    rate = float(np.mean([r.success for r in results])) if results else float("nan")
    print(json.dumps({"n": len(results), "success_rate": rate}, sort_keys=True))


def cmd_detect(args):
    from .detect import AttackConfig, TauPolicy, detection_pipeline
    model = _model(args)
    ds, ids = _attack_set(args, model)
    report = detection_pipeline(
        model, ds.images, ds.labels,
        AttackConfig(args.attack, args.strength if args.strength is not None else
                     {"fgsm": 0.25, "gradient": 1.0, "deepfool": 0.02}[args.attack], args.max_iter),
        TauPolicy(args.tau, args.tau_percentile), args.threads, args.patch,
        args.entropy_method, ids)
    report.write_scores_csv(args.scores)
    if args.roc and report.roc is not None:
        report.roc.to_csv(args.roc)
    summary = report.summary()
    if len(report.ok()) > 1:
        summary["welch_t"], summary["welch_p"] = report.welch()
    _emit(summary, args.summary)


def cmd_retrieve(args):
    from .csvio import write_csv
    from .rbf.cluster import similarity_query
    model = _model(args)
    if model.head is None:
        raise ConfigError("retrieval needs a checkpoint with an RBF head")
    ds = load_dataset(args)
    if not 0 <= args.query < len(ds):
        raise UsageError(f"--query {args.query} outside the dataset (size {len(ds)})")
    emb = model.embed(ds.images).astype(np.float64)
    head = model.head.astype("float64") if model.dtype != "float64" else model.head
    near, far = similarity_query(head, emb[args.query], emb, args.top)
    rows = []
    for kind, items in (("near", near), ("far", far)):
        for rank, nb in enumerate(items, 1):
            rows.append([kind, rank, nb.index + args.offset, nb.distance_sq,
                         int(ds.labels[nb.index])])
    write_csv(args.out, ("kind", "rank", "sample_id", "distance_sq", "label"), rows)


def cmd_export_maps(args):
    from .attacks import run_attack
    from .csvio import write_pgm
    from .explain import feature_response
    model = _model(args)
    ds, ids = _attack_set(args, model)
    os.makedirs(args.out_dir, exist_ok=True)
    for i, sid in enumerate(ids):
        variants = [("clean", ds.images[i])]
        if args.attack:
            res = run_attack(model, ds.images[i], int(ds.labels[i]), args.attack, args.strength,
                             args.max_iter)
            variants.append(("adv", res.adversarial))
        for tag, img in variants:
            fr = feature_response(model, img, args.patch, args.entropy_method)
            base = os.path.join(args.out_dir, f"{int(sid):06d}_{tag}")
            write_pgm(base + "_gray.pgm", fr.grayscale)
            write_pgm(base + "_entropy.pgm", fr.entropy_map / np.log2(args.patch ** 2))


def cmd_export_embeddings(args):
    from .csvio import write_vectors_csv
    model = _model(args)
    ds = load_dataset(args)
    ids = np.arange(args.offset, args.offset + len(ds))
    dim = model.head.dim if model.head is not None else model.backbone.output_shape[-1]
    if len(ds):
        emb = model.embed(ds.images).astype(np.float64)
        cluster = (model.head.assign(emb.astype(model.head.centers.dtype))
                   if model.head is not None else np.full(len(ds), -1))
    else:
        emb, cluster = np.zeros((0, dim)), np.zeros(0, dtype=np.int64)
    write_vectors_csv(args.out, emb.reshape(len(ds), dim), "e",
                      {"sample_id": ids, "label": ds.labels, "cluster": cluster})
    if args.centers_out and model.head is not None:
        c = model.head.centers.astype(np.float64)
        write_vectors_csv(args.centers_out, c, "e", {"cluster": np.arange(len(c))})


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "attack": cmd_attack, "detect": cmd_detect,
            "retrieve": cmd_retrieve, "export-maps": cmd_export_maps,
            "export-embeddings": cmd_export_embeddings}


def _fail(kind, code, exc):
    msg = " ".join(str(exc).split()) or type(exc).__name__
    sys.stderr.write(json.dumps({"error": kind, "exit": code, "message": msg}) + "\n")
    return code


def run_cli(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, exc)
    except SystemExit as exc:  # --help and --version
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        from threadpoolctl import threadpool_limits
        # non-finite values are checked explicitly, so numpy's warnings would only add noise
        with threadpool_limits(args.threads), np.errstate(all="ignore"):
            COMMANDS[args.verb](args)
    except (UsageError, ConfigError) as exc:
        return _fail("usage", EXIT_USAGE, exc)
    except (DataError, ShapeError, OSError) as exc:
        return _fail("data", EXIT_DATA, exc)
    except (NonFiniteError, FloatingPointError) as exc:
        return _fail("numeric", EXIT_NUMERIC, exc)
    except RbfsntError as exc:
        return _fail("usage", EXIT_USAGE, exc)
    return 0


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
