"""Confusion-matrix metrics with ransomware (label 0) as the positive class."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import _accel
from .errors import EmptyMatrix, LengthMismatch, TooFewSamples

CSV_COLUMNS = ("Accuracy", "Precision", "Recall", "F1-score", "FNR",
               "Misclassified ransomware samples")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be >= 0")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def misclassified_ransomware(self) -> int:
        return self.fn

    def swapped(self) -> "ConfusionMatrix":
        """Same counts with the clean class treated as positive."""
        return ConfusionMatrix(tp=self.tn, fp=self.fn, tn=self.tp, fn=self.fp)


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision_macro: float
    recall_macro: float
    f1_macro: float
    fnr: float
    fpr: float
    misclassified_ransomware: int
    ransomware_total: int
    # names of quantities whose denominator was zero and were reported as 0
    undefined: tuple = field(default=())

    def row(self, digits: int | None = 6) -> list[str]:
        """CSV/markdown cells in table column order."""
        def fmt(v):
            return repr(float(v)) if digits is None else f"{v:.{digits}f}"
        return [fmt(self.accuracy), fmt(self.precision_macro), fmt(self.recall_macro),
                fmt(self.f1_macro), fmt(self.fnr),
                f"{self.misclassified_ransomware} out of {self.ransomware_total}"]

    def as_dict(self) -> dict:
        d = asdict(self)
        d["undefined"] = list(self.undefined)
        return d


def confusion(predictions, labels) -> ConfusionMatrix:
    pred = np.asarray(predictions).astype(np.int64).ravel()
    lab = np.asarray(labels).astype(np.int64).ravel()
    if pred.shape != lab.shape:
        raise LengthMismatch(f"{pred.shape[0]} predictions for {lab.shape[0]} labels")
    if pred.shape[0] == 0:
        raise EmptyMatrix("no samples to count")
    tp, fp, tn, fn = _accel.confusion_counts(pred, lab)
    return ConfusionMatrix(int(tp), int(fp), int(tn), int(fn))


def _ratio(num, den, name, undefined, fill=0.0):
    if den == 0:
        undefined.append(name)
        return fill
    return num / den


def compute_metrics(cm: ConfusionMatrix, zero_division: float = 0.0) -> MetricsReport:
    """Accuracy, macro precision/recall/F1, FNR and FPR.

    Macro F1 is the unweighted mean of the two per-class F1 scores. A ratio
    with a zero denominator is listed in ``MetricsReport.undefined`` and
    reported as 0. Per-class precision and recall take ``zero_division``
    instead; 1.0 gives the convention of tables where a model that never
    predicts a class scores full precision on it.
    """
    if zero_division not in (0.0, 1.0):
        raise ValueError("zero_division must be 0 or 1")
    total = cm.total
    if total == 0:
        raise EmptyMatrix("confusion matrix is empty")
    undefined: list[str] = []
    z = float(zero_division)
    prec_rw = _ratio(cm.tp, cm.tp + cm.fp, "precision_ransomware", undefined, z)
    rec_rw = _ratio(cm.tp, cm.tp + cm.fn, "recall_ransomware", undefined, z)
    prec_cl = _ratio(cm.tn, cm.tn + cm.fn, "precision_clean", undefined, z)
    rec_cl = _ratio(cm.tn, cm.tn + cm.fp, "recall_clean", undefined, z)
    f1_rw = 2 * prec_rw * rec_rw / (prec_rw + rec_rw) if prec_rw + rec_rw > 0 else 0.0
    f1_cl = 2 * prec_cl * rec_cl / (prec_cl + rec_cl) if prec_cl + rec_cl > 0 else 0.0
    fnr = _ratio(cm.fn, cm.fn + cm.tp, "fnr", undefined)
    fpr = _ratio(cm.fp, cm.fp + cm.tn, "fpr", undefined)
    return MetricsReport(
        accuracy=(cm.tp + cm.tn) / total,
        precision_macro=(prec_rw + prec_cl) / 2,
        recall_macro=(rec_rw + rec_cl) / 2,
        f1_macro=(f1_rw + f1_cl) / 2,
        fnr=fnr,
        fpr=fpr,
        misclassified_ransomware=cm.fn,
        ransomware_total=cm.tp + cm.fn,
        undefined=tuple(undefined),
    )


def evaluate(model, dataset) -> MetricsReport:
    """Metrics of ``model`` on a ``Dataset`` (uses log-scaled inputs)."""
    if len(dataset) == 0:
        raise EmptyMatrix("empty evaluation set")
    return compute_metrics(confusion(model.predict(dataset.inputs()), dataset.labels))


def mean_report(reports) -> MetricsReport:
    """Arithmetic mean of the ratio fields; misclassification counts are summed."""
    reports = list(reports)
    if not reports:
        raise EmptyMatrix("no reports to average")
    names = ("accuracy", "precision_macro", "recall_macro", "f1_macro", "fnr", "fpr")
    vals = {n: float(np.mean([getattr(r, n) for r in reports])) for n in names}
    undefined = tuple(sorted({u for r in reports for u in r.undefined}))
    return MetricsReport(**vals,
                         misclassified_ransomware=sum(r.misclassified_ransomware for r in reports),
                         ransomware_total=sum(r.ransomware_total for r in reports),
                         undefined=undefined)


def stratified_folds(family, k: int, seed: int) -> np.ndarray:
    """Fold index per sample: per-family seeded shuffle, then round-robin."""
    family = np.asarray(family)
    rng = np.random.default_rng(seed)
    order = np.concatenate([rng.permutation(np.nonzero(family == f)[0])
                            for f in np.unique(family)]) if family.size else np.zeros(0, int)
    folds = np.empty(family.shape[0], dtype=np.int64)
    folds[order] = np.arange(order.shape[0]) % k
    return folds


def kfold(dataset, k: int = 4, model_kind: str = "lr", train_config=None, model_kw=None):
    """Stratified k-fold: train on k-1 folds, evaluate on the held-out one.

    Returns ``(per_fold_reports, mean_report)``.
    """
    from .models import InputStats, TrainConfig, build_model, train

    if k < 2:
        raise TooFewSamples("k must be >= 2")
    if len(dataset) < k:
        raise TooFewSamples(f"{len(dataset)} samples cannot fill {k} folds")
    cfg = train_config or TrainConfig()
    folds = stratified_folds(dataset.family, k, cfg.seed)
    reports = []
    for i in range(k):
        tr = dataset.subset(np.nonzero(folds != i)[0])
        ho = dataset.subset(np.nonzero(folds == i)[0])
        model = build_model(model_kind, dataset.feature_dim, seed=cfg.seed, **(model_kw or {}))
        model.fit_input_stats(InputStats.from_inputs(tr.inputs()))
        train(model, tr, cfg)
        reports.append(evaluate(model, ho))
    return reports, mean_report(reports)
