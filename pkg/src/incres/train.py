"""Optimizers, the epoch loop, fine-tuning and the runs x folds driver."""

import concurrent.futures as cf
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import weights
from .arch import ModelConfig, apply_freeze, build_model, reset_head
from .data import DataError, stratified_kfold
from .errors import ConfigError, NonFiniteError
from .metrics import aggregate, evaluate, is_defined
from .nn import functional as F

OPTIMIZERS = ("adam", "sgd_momentum")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 8
    trainable_layers: int = None  # None = every layer
    epochs: int = 30
    optimizer: str = "adam"
    seed: int = 0
    dropout_rate: float = None  # overrides the model's when set
    record_wall_time: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not (isinstance(self.learning_rate, (int, float)) and self.learning_rate > 0
                and math.isfinite(self.learning_rate)):
            raise ConfigError(f"train.learning_rate must be > 0, got {self.learning_rate}",
                              key="train.learning_rate")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}",
                              key="train.batch_size")
        if self.trainable_layers is not None and self.trainable_layers < 0:
            raise ConfigError("train.trainable_layers must be >= 0", key="train.trainable_layers")
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ConfigError(f"train.epochs must be >= 1, got {self.epochs}", key="train.epochs")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"train.optimizer must be one of {OPTIMIZERS}", key="train.optimizer")
        if self.dropout_rate is not None and not 0 <= self.dropout_rate < 1:
            raise ConfigError("train.dropout_rate must be in [0, 1)", key="train.dropout_rate")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("train.seed must be an unsigned 64-bit integer", key="train.seed")

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------- optimizers

def _check_finite(params):
    for p in params:
        if p.trainable and not np.isfinite(p.grad).all():
            raise NonFiniteError(f"non-finite gradient in {p.name}", param=p.name)


def adam_step(params, state, lr, t, beta1=0.9, beta2=0.999, eps=1e-7):
    """Bias-corrected Adam update of every trainable parameter, in place.

    ``state`` maps parameter name to (m, v) and is updated in place. All
    gradients are validated before any parameter moves.
    """
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    _check_finite(params)
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    for p in params:
        if not p.trainable:
            continue
        m, v = state.get(p.name, (np.zeros_like(p.value), np.zeros_like(p.value)))
        g = p.grad.astype(p.value.dtype, copy=False)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        state[p.name] = (m, v)
        p.value = (p.value - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.value.dtype)


def sgd_momentum_step(params, state, lr, momentum=0.9):
    _check_finite(params)
    for p in params:
        if not p.trainable:
            continue
        vel = momentum * state.get(p.name, np.zeros_like(p.value)) - lr * p.grad
        state[p.name] = vel
        p.value = (p.value + vel).astype(p.value.dtype)


# ---------------------------------------------------------------- records

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    train_acc: float
    val_acc: float
    val_auc: object  # float, or None when undefined
    wall_seconds: float = None


@dataclass
class RunRecord:
    config: dict
    model_config: dict
    run: int = 0
    fold: int = 0
    curve: list = field(default_factory=list)
    metrics: dict = None
    confusion: dict = None
    checkpoint_digest: str = None
    status: str = "ok"
    failure: dict = None
    load_report: dict = None

    @property
    def ok(self):
        return self.status == "ok"

    def to_dict(self):
        d = asdict(self)
        for rec in d["curve"]:
            if rec["wall_seconds"] is None:
                del rec["wall_seconds"]
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["curve"] = [EpochRecord(**{"wall_seconds": None, **c}) for c in d.get("curve", [])]
        return cls(**d)


def write_records(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_records(path):
    with open(path, encoding="utf-8") as fh:
        return [RunRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


# ---------------------------------------------------------------- training

def _plan_batches(n, batch_size, rng):
    """Shuffled index batches; a trailing batch of one joins the previous one
    because train-mode batchnorm on a 1x1 map needs two values per channel."""
    order = rng.permutation(n)
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    return chunks


def _set_dropout(model, rate):
    for node in model.nodes:
        if hasattr(node, "rate"):
            node.rate = rate


# divergence is detected from the non-finite loss/gradient itself, so the
# overflow warnings numpy emits on the way there are noise
@np.errstate(over="ignore", invalid="ignore")
def fit(model, train, val, cfg, run=0, fold=0, on_epoch=None):
    """Train ``model`` in place for ``cfg.epochs`` epochs; returns a RunRecord.

    A non-finite loss or gradient stops training; the record then carries
    ``status="diverged"`` and the epoch/batch where it happened.
    """
    cfg.validate()
    if not train or not val:
        raise DataError("fit needs non-empty train and validation sets")
    leaked = {s.id for s in train} & {s.id for s in val}
    if leaked:
        raise DataError(f"{len(leaked)} sample ids appear in both train and validation")
    if cfg.dropout_rate is not None:
        _set_dropout(model, cfg.dropout_rate)
    apply_freeze(model, cfg.trainable_layers)

    record = RunRecord(cfg.to_dict(), model.cfg.to_dict(), run, fold)
    images = np.stack([s.image for s in train]).astype(model.dtype)
    labels = np.array([s.label for s in train], dtype=np.int64)
    state, step = {}, 0
    trainable = [p for p in model.params if p.trainable]
    root = np.random.SeedSequence(cfg.seed)
    shuffle_seq, dropout_seq = root.spawn(2)

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        shuffle_rng = np.random.default_rng(shuffle_seq.spawn(1)[0])
        drop_rng = np.random.default_rng(dropout_seq.spawn(1)[0])
        loss_sum, correct = 0.0, 0
        for b, idx in enumerate(_plan_batches(len(train), cfg.batch_size, shuffle_rng), start=1):
            x, y = images[idx], labels[idx]
            logits = model.forward(x, "train", drop_rng)
            loss, dlogits = F.softmax_cross_entropy(logits, y)
            try:
                if not math.isfinite(loss):
                    raise NonFiniteError("non-finite training loss")
                if trainable:
                    model.backward(dlogits)
                    step += 1
                    if cfg.optimizer == "adam":
                        adam_step(trainable, state, cfg.learning_rate, step)
                    else:
                        sgd_momentum_step(trainable, state, cfg.learning_rate)
            except NonFiniteError as exc:
                record.status = "diverged"
                record.failure = {"epoch": epoch, "batch": b, "param": exc.param,
                                  "message": str(exc)}
                return record
            loss_sum += loss * len(idx)
            correct += int(((logits[:, 1] > logits[:, 0]).astype(np.int64) == y).sum())
        ev = evaluate(model, val, cfg.batch_size)
        if not math.isfinite(ev.report.loss):
            record.status = "diverged"
            record.failure = {"epoch": epoch, "batch": None, "param": None,
                              "message": "non-finite validation loss"}
            return record
        rec = EpochRecord(epoch, loss_sum / len(train), ev.report.loss, correct / len(train),
                          ev.report.acc,
                          ev.report.auc if is_defined(ev.report.auc) else None,
                          time.perf_counter() - t0 if cfg.record_wall_time else None)
        record.curve.append(rec)
        if on_epoch is not None and on_epoch(rec) is False:
            break

    record.metrics = ev.report.to_dict()
    record.confusion = asdict(ev.confusion)
    record.checkpoint_digest = weights.digest(weights.checkpoint_from_model(model))
    return record


def epochs_to_reach(record, threshold):
    """First epoch whose validation accuracy is >= threshold, else None."""
    return next((r.epoch for r in record.curve if r.val_acc >= threshold), None)


def finetune(base, model_cfg, cfg, train, val, run=0, fold=0, on_epoch=None):
    """Transfer: load matching base weights, fresh head, freeze, train.

    ``base`` is a checkpoint path or a loaded :class:`weights.Checkpoint`.
    Returns (model, RunRecord) with the load report attached.
    """
    ckpt = base if isinstance(base, weights.Checkpoint) else weights.load(base)
    model = build_model(model_cfg)
    report = weights.load_partial(model, ckpt, "skip_mismatched")
    reset_head(model, model_cfg.num_classes, seed=cfg.seed)
    record = fit(model, train, val, cfg, run, fold, on_epoch)
    record.load_report = report.to_dict()
    return model, record


# ---------------------------------------------------------------- cross-validation

def fold_seed(seed_base, run, fold, k):
    return seed_base + run * k + fold


def _run_fold(args):
    samples, folds, fold, run, model_cfg, cfg, k = args
    seed = fold_seed(cfg.seed, run, fold, k)
    val_ids = set(folds[fold])
    val = [s for s in samples if s.id in val_ids]
    train = [s for s in samples if s.id not in val_ids]
    mcfg = ModelConfig(**{**model_cfg.to_dict(), "seed": seed})
    tcfg = TrainConfig(**{**cfg.to_dict(), "seed": seed})
    try:
        return fit(build_model(mcfg), train, val, tcfg, run, fold)
    except (NonFiniteError, FloatingPointError) as exc:
        return RunRecord(tcfg.to_dict(), mcfg.to_dict(), run, fold, status="failed",
                         failure={"message": str(exc)})


@dataclass
class CrossvalResult:
    records: list
    aggregate: object  # metrics.Aggregate, or None when every fold failed
    failed: int


def crossval(samples, model_cfg, cfg, k=5, runs=10, workers=1, on_record=None):
    """``runs`` independent k-fold cross-validations.

    Run r splits with seed ``cfg.seed + r``; its fold f trains with seed
    ``cfg.seed + r*k + f``. Records come back ordered by (run, fold)
    whatever ``workers`` is, and the aggregate is the plain mean over
    the successful folds.
    """
    if k < 2 or runs < 1:
        raise ConfigError("crossval needs k >= 2 and runs >= 1", key="train.k")
    jobs = []
    for run in range(runs):
        folds = stratified_kfold(samples, k, seed=cfg.seed + run)
        jobs += [(samples, folds, f, run, model_cfg, cfg, k) for f in range(k)]
    if workers > 1:
        with cf.ProcessPoolExecutor(workers) as pool:
            records = list(pool.map(_run_fold, jobs))
        if on_record is not None:
            for r in records:
                on_record(r)
    else:
        records = []
        for job in jobs:
            records.append(_run_fold(job))
            if on_record is not None:
                on_record(records[-1])
    return summarize(records)


def summarize(records):
    from .metrics import MetricsReport
    good = [r for r in records if r.ok]
    failed = len(records) - len(good)
    agg = aggregate([MetricsReport(**r.metrics) for r in good]) if good else None
    return CrossvalResult(records, agg, failed)
