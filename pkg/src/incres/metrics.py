"""Binary classification metrics with Pneumonia (label 1) as the positive class.

Ratios whose denominator is zero come back as :class:`Undefined` carrying a
reason, never as 0 or NaN, so aggregates cannot be silently corrupted.
"""

import math
from dataclasses import dataclass, fields

import numpy as np

from .nn import functional as F

METRIC_NAMES = ("acc", "pre", "rec", "spf", "tpr", "fpr", "ppv", "f1", "auc", "loss")


@dataclass(frozen=True, eq=False)
class Undefined:
    """Marker for a 0/0 metric; all markers compare equal whatever the reason."""

    reason: str

    def __eq__(self, other):
        return isinstance(other, Undefined)

    def __hash__(self):
        return hash(Undefined)

    def __str__(self):
        return "undefined"


def is_defined(v):
    return not isinstance(v, Undefined) and v is not None


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn

    def grid(self):
        """Rows = true class (Normal, Pneumonia), columns = predicted class."""
        return [[self.tn, self.fp], [self.fn, self.tp]]


@dataclass
class MetricsReport:
    acc: object = None
    pre: object = None
    rec: object = None
    spf: object = None
    tpr: object = None
    fpr: object = None
    ppv: object = None
    f1: object = None
    auc: object = None
    loss: object = None

    def to_dict(self):
        return {f.name: (getattr(self, f.name) if is_defined(getattr(self, f.name)) else None)
                for f in fields(self)}


def confusion(labels, predictions):
    y = np.asarray(labels).astype(np.int64).ravel()
    p = np.asarray(predictions).astype(np.int64).ravel()
    if y.shape != p.shape:
        raise ValueError(f"length mismatch: {y.size} labels vs {p.size} predictions")
    if y.size == 0:
        raise ValueError("confusion needs at least one sample")
    if not (np.isin(y, (0, 1)).all() and np.isin(p, (0, 1)).all()):
        raise ValueError("labels and predictions must be 0 or 1")
    tp = int(np.sum((y == 1) & (p == 1)))
    tn = int(np.sum((y == 0) & (p == 0)))
    fp = int(np.sum((y == 0) & (p == 1)))
    fn = int(np.sum((y == 1) & (p == 0)))
    return ConfusionMatrix(tp, tn, fp, fn)


def _ratio(num, den, what):
    if den == 0:
        return Undefined(f"{what}: 0/0")
    return num / den


def metrics(cm):
    if cm.total == 0:
        raise ValueError("metrics of an empty confusion matrix")
    tp, tn, fp, fn = cm.tp, cm.tn, cm.fp, cm.fn
    pre = _ratio(tp, tp + fp, "precision (no positive predictions)")
    rec = _ratio(tp, tp + fn, "recall (no positive labels)")
    fpr = _ratio(fp, fp + tn, "false-positive rate (no negative labels)")
    spf = _ratio(tn, tn + fp, "specificity (no negative labels)")
    return MetricsReport(
        acc=(tp + tn) / cm.total,
        pre=pre,
        rec=rec,
        spf=spf,
        tpr=_ratio(tp, tp + fn, "true-positive rate (no positive labels)"),
        fpr=fpr,
        ppv=_ratio(tp, tp + fp, "positive predictive value (no positive predictions)"),
        f1=_ratio(2 * tp, 2 * tp + fp + fn, "F1 (no positives at all)"),
    )


def roc_auc(labels, scores):
    """Concordant-pair AUC via midranks; ties count one half."""
    y = np.asarray(labels).astype(np.int64).ravel()
    s = np.asarray(scores, dtype=np.float64).ravel()
    if y.shape != s.shape:
        raise ValueError(f"length mismatch: {y.size} labels vs {s.size} scores")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        return Undefined("AUC needs both classes; got "
                         f"{n_pos} positives and {n_neg} negatives")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(len(s), dtype=np.float64)
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1  # midrank, 1-based
        i = j + 1
    rank_sum = ranks[y == 1].sum()
    u = rank_sum - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def roc_curve(labels, scores):
    """Empirical ROC points (fpr, tpr), thresholds swept from +inf down."""
    y = np.asarray(labels).astype(np.int64).ravel()
    s = np.asarray(scores, dtype=np.float64).ravel()
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    distinct = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tps = np.cumsum(y)[distinct]
    fps = (distinct + 1) - tps
    n_pos, n_neg = y.sum(), len(y) - y.sum()
    fpr = np.r_[0.0, fps / n_neg] if n_neg else np.r_[0.0, fps * 0.0]
    tpr = np.r_[0.0, tps / n_pos] if n_pos else np.r_[0.0, tps * 0.0]
    return fpr, tpr


def trapezoid_auc(labels, scores):
    """Area under the empirical ROC by the trapezoid rule."""
    y = np.asarray(labels).ravel()
    if (y == 1).sum() == 0 or (y == 0).sum() == 0:
        return Undefined("AUC needs both classes")
    fpr, tpr = roc_curve(labels, scores)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))


EVAL_CHUNK = 16


@dataclass
class Evaluation:
    report: MetricsReport
    confusion: ConfusionMatrix
    scores: np.ndarray
    predictions: np.ndarray
    labels: np.ndarray
    ids: list


def predict(model, images):
    """Eval-mode logits, computed in fixed chunks of EVAL_CHUNK samples.

    BLAS results can depend on the row count of a GEMM; running every
    forward over the same sample-aligned chunks makes outputs independent
    of the caller's batch size.
    """
    out = [model.forward(images[i:i + EVAL_CHUNK], "eval")
           for i in range(0, len(images), EVAL_CHUNK)]
    return np.concatenate(out, axis=0)


def evaluate(model, samples, batch_size=64):
    """Eval-mode metrics. ``batch_size`` bounds how many images are stacked
    at once; results do not depend on it."""
    if not samples:
        raise ValueError("evaluate needs at least one sample")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    step = max(EVAL_CHUNK, batch_size - batch_size % EVAL_CHUNK)
    logits = []
    for i in range(0, len(samples), step):
        chunk = np.stack([s.image for s in samples[i:i + step]])
        logits.append(predict(model, chunk))
    logits = np.concatenate(logits).astype(np.float64)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    probs = F.softmax(logits)
    scores = probs[:, 1]
    preds = (logits[:, 1] > logits[:, 0]).astype(np.int64)  # ties -> Normal
    loss, _ = F.softmax_cross_entropy(logits, labels)
    cm = confusion(labels, preds)
    report = metrics(cm)
    report.auc = roc_auc(labels, scores)
    report.loss = float(loss)
    return Evaluation(report, cm, scores, preds, labels, [s.id for s in samples])


@dataclass
class Aggregate:
    report: MetricsReport
    skipped: dict  # metric -> number of undefined entries left out
    n: int


def aggregate(reports):
    if not reports:
        raise ValueError("aggregate needs at least one report")
    out, skipped = MetricsReport(), {}
    for name in METRIC_NAMES:
        vals = [getattr(r, name) for r in reports]
        ok = [v for v in vals if is_defined(v)]
        skipped[name] = len(vals) - len(ok)
        setattr(out, name, math.fsum(ok) / len(ok) if ok
                else Undefined(f"{name}: undefined in all {len(vals)} reports"))
    return Aggregate(out, skipped, len(reports))


def sci(v):
    """Scientific-notation rendering, e.g. 0.8869 -> '8.869E-01'."""
    if not is_defined(v):
        return "undefined"
    return f"{v:.3E}"


def render_report(report):
    rows = [("metric", "value")]
    rows += [(name.upper(), sci(getattr(report, name))) for name in METRIC_NAMES]
    return "\n".join(f"{a},{b}" for a, b in rows) + "\n"


def render_confusion(cm):
    """2x2 labeled grid: rows are the true class, columns the prediction."""
    g = cm.grid()
    width = max(len(str(v)) for row in g for v in row)
    width = max(width, len("PNEUMONIA"))
    corner = "true/pred"
    lines = [f"{corner:<12}{'NORMAL':>{width + 2}}{'PNEUMONIA':>{width + 2}}"]
    for name, row in zip(("NORMAL", "PNEUMONIA"), g):
        lines.append(f"{name:<12}" + "".join(f"{v:>{width + 2}}" for v in row))
    return "\n".join(lines) + "\n"
