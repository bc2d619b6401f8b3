"""Mini-batch training, evaluation, and run reports."""
import copy
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .checkpoint import save_checkpoint
from .csvio import write_csv
from .errors import ConfigError, DataError, DivergenceError, NonFiniteError
from .nn.functional import log_softmax
from .rbf.cluster import kmeans

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "sgd_decoupled_wd", "adamw")


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    lam: float = 0.5
    optimizer: str = "adamw"
    seed: int = 0
    precision: str = "float32"
    warmup_samples: int = 10_000
    kmeans_iter: int = 100
    plain_unsup: bool = False
    output_init: str = "gradient"  # or "lstsq"
    timing: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate < 0 or self.weight_decay < 0 or self.lam < 0:
            raise ConfigError("learning rate, weight decay and lambda must be >= 0")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision must be float32 or float64")
        if self.output_init not in ("gradient", "lstsq"):
            raise ConfigError("output_init must be 'gradient' or 'lstsq'")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    sup_loss: float
    unsup_loss: float
    train_acc: float
    test_acc: float
    seconds: float


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    best_test_acc: float = float("nan")
    diverged: bool = False

    def to_csv(self, path):
        cols = [f.name for f in fields(EpochRecord)]
        write_csv(path, cols, [[getattr(r, c) for c in cols] for r in self.epochs])


def sgd_step(params, grads, lr, wd=0.0):
    """``p - lr * g - lr * wd * p`` for every named parameter; decay bypasses the loss."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}; step aborted")
    return {name: p - lr * grads[name] - lr * wd * p if name in grads else p
            for name, p in params.items()}


class SGD:
    def __init__(self, lr, weight_decay=0.0):
        self.lr = lr
        self.weight_decay = weight_decay

    def step(self, model, grads):
        params = model.parameters_dict()
        new = sgd_step({k: params[k] for k in grads}, grads, self.lr, self.weight_decay)
        for name, value in new.items():
            params[name][...] = value
        model.touch()


class AdamW:
    """Adam with weight decay decoupled from the gradient moments."""

    def __init__(self, lr, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, model, grads):
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for {name}; step aborted")
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        params = model.parameters_dict()
        for name, g in grads.items():
            p = params[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p
            p -= (self.lr * update).astype(p.dtype, copy=False)
        model.touch()


def make_optimizer(config):
    if config.optimizer == "sgd":
        return SGD(config.learning_rate, 0.0)
    if config.optimizer == "sgd_decoupled_wd":
        return SGD(config.learning_rate, config.weight_decay)
    return AdamW(config.learning_rate, config.weight_decay)


@dataclass
class EvalResult:
    accuracy: float
    mean_loss: float
    confusion: np.ndarray  # rows: true class, cols: predicted

    def to_dict(self):
        d = asdict(self)
        d["confusion"] = self.confusion.tolist()
        return d


def evaluate(model, dataset, batch_size=512, threads=1):
    """Accuracy, mean cross-entropy and confusion counts under argmax of the logits."""
    n = len(dataset)
    if n == 0:
        raise DataError("cannot evaluate on an empty dataset")
    k = model.n_classes
    starts = list(range(0, n, batch_size))

    def run(start):
        x = dataset.images[start:start + batch_size]
        y = dataset.labels[start:start + batch_size]
        logits = model.logits(x, batch_size)
        nll = -log_softmax(logits.astype(np.float64))[np.arange(len(y)), y]
        conf = np.zeros((k, k), dtype=np.int64)
        np.add.at(conf, (y, logits.argmax(axis=1)), 1)
        return float(nll.sum()), conf

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    # fixed-order reduction keeps the result independent of thread scheduling
    loss = 0.0
    confusion = np.zeros((k, k), dtype=np.int64)
    for part_loss, conf in parts:
        loss += part_loss
        confusion += conf
    return EvalResult(float(np.trace(confusion) / n), loss / n, confusion)


def _rngs(seed):
    ss = np.random.SeedSequence(seed)
    init, shuffle, dropout, warm = ss.spawn(4)
    return (np.random.default_rng(init), np.random.default_rng(shuffle),
            np.random.default_rng(dropout), np.random.default_rng(warm))


def warm_start(model, dataset, config, rng):
    """k-means centers on the embeddings of a frozen-backbone pass; sigma from the spread."""
    head = model.head
    n = len(dataset)
    take = min(n, config.warmup_samples)
    idx = np.sort(rng.permutation(n)[:take]) if take < n else np.arange(n)
    emb = model.embed(dataset.images[idx]).astype(np.float64)
    if take < head.n_centers:
        raise DataError(f"need at least {head.n_centers} samples to seed the centers")
    res = kmeans(emb, head.n_centers, rng, max_iter=config.kmeans_iter)
    ft = head.centers.dtype
    head.params["centers"] = res.centers.astype(ft)
    d2 = ((emb - res.centers[res.assignments]) ** 2).sum(axis=1)
    sigma = float(np.sqrt(d2.mean()))
    if not sigma > 0:
        sigma = 1.0
    head.params["sigma"] = np.full(head.sigma.shape, sigma, dtype=ft)
    if config.output_init == "lstsq":
        from .rbf.cluster import one_hot, solve_output_weights
        h, _, _ = head.forward(emb.astype(ft), remember=False)
        w = solve_output_weights(h, one_hot(dataset.labels[idx], head.n_classes), 1e-6)
        head.params["weight"] = w.astype(ft)
    head.touch()
    return res


def _snapshot(model):
    return {name: v.copy() for name, v in model.named_parameters()}


def _restore(model, snap):
    for name, v in model.named_parameters():
        v[...] = snap[name]
    model.touch()


def train(model, train_set, config, test_set=None, checkpoint_path=None, on_epoch=None):
    """Train ``model`` in place; the best epoch (by test accuracy) is kept.

    Returns the :class:`TrainReport`. A non-finite loss raises
    :class:`DivergenceError` carrying the report so far.
    """
    if len(train_set) == 0:
        raise DataError("training set is empty")
    if model.dtype != config.precision:
        model.astype(config.precision)
    _, shuffle_rng, dropout_rng, warm_rng = _rngs(config.seed)
    if model.head is not None:
        warm_start(model, train_set, config, warm_rng)

    report = TrainReport()
    optimizer = make_optimizer(config)
    best = _snapshot(model)
    meta = {"seed": config.seed, "epoch": 0}
    if checkpoint_path:
        save_checkpoint(model, checkpoint_path, meta)

    n = len(train_set)
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(n)
        tot = sup = unsup = 0.0
        correct = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            x, y = train_set.images[idx], train_set.labels[idx]
            losses, grads, logits = model.loss_and_grads(
                x, y, config.lam, training=True, rng=dropout_rng, plain_unsup=config.plain_unsup)
            if not np.isfinite(losses.total):
                report.diverged = True
                raise DivergenceError(f"loss became non-finite in epoch {epoch}", report)
            try:
                optimizer.step(model, grads)
            except NonFiniteError as exc:
                report.diverged = True
                raise DivergenceError(str(exc), report) from None
            m = len(idx)
            tot += losses.total * m
            sup += losses.supervised * m
            unsup += losses.unsupervised * m
            correct += int((logits.argmax(axis=1) == y).sum())
        test_acc = evaluate(model, test_set).accuracy if test_set is not None and len(test_set) else float("nan")
        seconds = time.perf_counter() - t0 if config.timing else 0.0
        rec = EpochRecord(epoch, tot / n, sup / n, unsup / n, correct / n, test_acc, seconds)
        report.epochs.append(rec)
        log.info("epoch %d loss %.4f (sup %.4f unsup %.4f) train %.4f test %.4f %.1fs",
                 epoch, rec.train_loss, rec.sup_loss, rec.unsup_loss, rec.train_acc,
                 rec.test_acc, seconds)
        score = test_acc if not np.isnan(test_acc) else rec.train_acc
        if report.best_epoch == 0 or score > report.best_test_acc:
            report.best_epoch, report.best_test_acc = epoch, score
            best = _snapshot(model)
            if checkpoint_path:
                save_checkpoint(model, checkpoint_path, {"seed": config.seed, "epoch": epoch})
        if on_epoch is not None:
            on_epoch(rec)
    _restore(model, best)
    return report


def clone(model):
    return copy.deepcopy(model)
