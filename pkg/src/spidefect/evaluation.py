"""F1, macro-F1, ROC/AUC, threshold selection and k-fold evaluation."""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import FeatureTable
from .errors import ConfigError
from .features import kfold_split
from .gbdt import BoostedModel, TrainConfig, feature_importance, predict, select_top_k_features, train


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be nonnegative")

    @classmethod
    def from_predictions(cls, predicted, target) -> "ConfusionCounts":
        p = np.asarray(predicted, dtype=bool)
        t = np.asarray(target, dtype=bool)
        return cls(int((p & t).sum()), int((p & ~t).sum()), int((~p & ~t).sum()), int((~p & t).sum()))

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def swapped(self) -> "ConfusionCounts":
        """Counts with the negative class treated as positive."""
        return ConfusionCounts(self.tn, self.fn, self.tp, self.fp)

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn,
                               self.fn + other.fn)

    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0


def f1_is_degenerate(counts: ConfusionCounts) -> bool:
    return counts.tp + counts.fp + counts.fn == 0


def f1(counts: ConfusionCounts) -> float:
    """2TP / (2TP + FP + FN); 0 when the denominator vanishes (see f1_is_degenerate)."""
    denom = 2 * counts.tp + counts.fp + counts.fn
    return 2 * counts.tp / denom if denom else 0.0


def macro_f1(counts: ConfusionCounts | Sequence[ConfusionCounts]) -> float:
    """Mean of per-class F1. A single binary matrix stands for both of its classes."""
    if isinstance(counts, ConfusionCounts):
        counts = (counts, counts.swapped())
    return sum(f1(c) for c in counts) / len(counts)


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # score at which each point (after the first) is reached
    auc: float

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def _sweep(scores, targets):
    """Cumulative (tp, fp) after each group of tied scores, descending."""
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets).astype(bool)
    if scores.shape != targets.shape:
        raise ValueError("scores and targets differ in length")
    order = np.argsort(-scores, kind="stable")
    s, t = scores[order], targets[order]
    last_of_group = np.r_[np.flatnonzero(s[1:] != s[:-1]), len(s) - 1]
    tp = np.cumsum(t, dtype=np.int64)[last_of_group]
    fp = np.cumsum(~t, dtype=np.int64)[last_of_group]
    return s[last_of_group], tp, fp


def roc(scores, targets) -> RocCurve:
    targets = np.asarray(targets)
    n_pos = int(np.count_nonzero(targets))
    n_neg = len(targets) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both classes among the targets")
    thr, tp, fp = _sweep(scores, targets)
    tp = np.r_[0, tp]
    fp = np.r_[0, fp]
    # trapezoids in integer arithmetic, one division at the end
    area2 = int(np.sum((fp[1:] - fp[:-1]) * (tp[1:] + tp[:-1]), dtype=np.int64))
    auc = area2 / (2 * n_pos * n_neg)
    return RocCurve(fp / n_neg, tp / n_pos, thr, auc)


def threshold_select(scores, targets) -> float:
    """Score threshold (predict positive when score >= threshold) with maximal F1.

    Candidates are the unique scores; ties in F1 go to the lowest threshold.
    """
    targets = np.asarray(targets)
    n_pos = int(np.count_nonzero(targets))
    if n_pos == 0 or n_pos == len(targets):
        raise ValueError("threshold selection needs both classes among the targets")
    thr, tp, fp = _sweep(scores, targets)
    # 2TP + FP + FN == TP + FP + P
    score = 2 * tp / (tp + fp + n_pos)
    best = np.flatnonzero(score == score.max())[-1]  # thresholds are descending
    return float(thr[best])


def score_counts(scores, targets, threshold: float) -> ConfusionCounts:
    return ConfusionCounts.from_predictions(np.asarray(scores) >= threshold, targets)


# -- cross-validation ------------------------------------------------------------

@dataclass
class FoldResult:
    index: int
    n_train: int
    n_test: int
    threshold: float
    threshold_source: str
    counts: ConfusionCounts
    auc: float
    features: tuple[str, ...]
    importance: dict[str, float]
    model: BoostedModel | None = None
    seconds: float = 0.0  # wall time of this fold; kept out of the text report

    @property
    def f1(self) -> float:
        return f1(self.counts)

    @property
    def macro_f1(self) -> float:
        return macro_f1(self.counts)


def _fmt(x: float) -> str:
    return "nan" if isinstance(x, float) and math.isnan(x) else format(x, ".6f")


@dataclass
class EvalReport:
    name: str
    folds: list[FoldResult]
    scores: np.ndarray        # out-of-fold probability per table row
    predicted: np.ndarray     # out-of-fold 0/1 verdict per table row
    target: np.ndarray
    fold_of_row: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def pooled_counts(self) -> ConfusionCounts:
        total = ConfusionCounts()
        for fold in self.folds:
            total = total + fold.counts
        return total

    @property
    def pooled_f1(self) -> float:
        return f1(self.pooled_counts)

    @property
    def pooled_macro_f1(self) -> float:
        return macro_f1(self.pooled_counts)

    @property
    def mean_fold_f1(self) -> float:
        return float(np.mean([f.f1 for f in self.folds]))

    @property
    def mean_fold_macro_f1(self) -> float:
        return float(np.mean([f.macro_f1 for f in self.folds]))

    def pooled_roc(self) -> RocCurve | None:
        if self.target.min() == self.target.max():
            return None
        return roc(self.scores, self.target)

    @property
    def pooled_auc(self) -> float:
        curve = self.pooled_roc()
        return float("nan") if curve is None else curve.auc

    def importance(self) -> dict[str, float]:
        """Gain importance summed over the fold models."""
        total: dict[str, float] = {}
        for fold in self.folds:
            for name, gain in fold.importance.items():
                total[name] = total.get(name, 0.0) + gain
        return total

    def to_text(self) -> str:
        lines = [f"[eval {self.name}]"]
        for key, value in sorted(self.meta.items()):
            lines.append(f"meta.{key}={value}")
        for fold in self.folds:
            p = f"fold.{fold.index}."
            c = fold.counts
            lines += [
                f"{p}n_train={fold.n_train}", f"{p}n_test={fold.n_test}",
                f"{p}threshold={fold.threshold!r}", f"{p}threshold_source={fold.threshold_source}",
                f"{p}tp={c.tp}", f"{p}fp={c.fp}", f"{p}tn={c.tn}", f"{p}fn={c.fn}",
                f"{p}f1={_fmt(fold.f1)}", f"{p}f1_degenerate={str(f1_is_degenerate(c)).lower()}",
                f"{p}macro_f1={_fmt(fold.macro_f1)}", f"{p}auc={_fmt(fold.auc)}",
            ]
        c = self.pooled_counts
        lines += [
            f"pooled.tp={c.tp}", f"pooled.fp={c.fp}", f"pooled.tn={c.tn}", f"pooled.fn={c.fn}",
            f"pooled.f1={_fmt(self.pooled_f1)}",
            f"pooled.f1_degenerate={str(f1_is_degenerate(c)).lower()}",
            f"pooled.macro_f1={_fmt(self.pooled_macro_f1)}", f"pooled.auc={_fmt(self.pooled_auc)}",
            f"mean_fold.f1={_fmt(self.mean_fold_f1)}",
            f"mean_fold.macro_f1={_fmt(self.mean_fold_macro_f1)}",
        ]
        return "\n".join(lines) + "\n"


def write_roc_csv(curve: RocCurve, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("fpr,tpr\n")
        for x, y in zip(curve.fpr.tolist(), curve.tpr.tolist()):
            fh.write(f"{x!r},{y!r}\n")


def _inner_split(table: FeatureTable, seed: int, inner_folds: int):
    """Hold out one group-aware fold of the training rows for threshold selection."""
    n_pos = int(table.target.sum())
    stratified = n_pos >= inner_folds and table.n_rows - n_pos >= 1
    try:
        fit, held = kfold_split(table, inner_folds, seed, stratified=stratified)[0]
    except ConfigError:
        return None
    if table.target[fit].min() == table.target[fit].max():
        return None
    return fit, held


def _run_fold(table: FeatureTable, config: TrainConfig, fold: int, train_idx, test_idx,
              seed: int, inner_folds: int, keep_model: bool) -> tuple[FoldResult, np.ndarray]:
    t0 = time.perf_counter()
    train_table = table.take(train_idx)
    split = _inner_split(train_table, seed + 1000 + fold, inner_folds)
    if split is None:
        fit_table, held_table = train_table, None
    else:
        fit_table, held_table = train_table.take(split[0]), train_table.take(split[1])
    names = fit_table.column_names
    if config.feature_top_k is not None and config.feature_top_k < fit_table.width:
        fit_table, _ = select_top_k_features(fit_table, config)
        names = fit_table.column_names
    model = train(fit_table, config)
    if held_table is not None and 0 < held_table.target.sum() < held_table.n_rows:
        held_scores = predict(model, held_table.select_columns(names))
        threshold, source = threshold_select(held_scores, held_table.target), "inner_validation"
    else:
        fit_scores = predict(model, fit_table)
        threshold, source = threshold_select(fit_scores, fit_table.target), "inner_train"
    test_table = table.take(test_idx).select_columns(names)
    scores = predict(model, test_table)
    y = test_table.target
    auc = roc(scores, y).auc if 0 < y.sum() < len(y) else float("nan")
    result = FoldResult(fold, len(train_idx), len(test_idx), threshold, source,
                        score_counts(scores, y, threshold), auc, tuple(names),
                        feature_importance(model), model if keep_model else None,
                        time.perf_counter() - t0)
    return result, scores


def cross_validate(table: FeatureTable, config: TrainConfig | None = None, k: int = 5,
                   seed: int = 0, jobs: int = 1, name: str = "model", inner_folds: int = 5,
                   keep_models: bool = True) -> EvalReport:
    """k-fold evaluation with thresholds chosen on training data only.

    Each fold's model is fit on a group-aware 80% of the training folds; the
    remaining 20% picks the max-F1 threshold, which is then applied to the
    untouched test fold. Folds run concurrently on ``jobs`` threads; results
    do not depend on ``jobs``.
    """
    cfg = config or TrainConfig()
    if table.target is None:
        raise ConfigError("cross-validation needs a target")
    n_pos = int(table.target.sum())
    stratified = n_pos >= k
    folds = kfold_split(table, k, seed, stratified=stratified)
    work = [(i, tr, te) for i, (tr, te) in enumerate(folds)]

    def one(item):
        i, tr, te = item
        return _run_fold(table, cfg, i, tr, te, seed, inner_folds, keep_models)

    if jobs > 1 and len(work) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, work))
    else:
        results = [one(item) for item in work]
    scores = np.zeros(table.n_rows)
    predicted = np.zeros(table.n_rows, dtype=np.int8)
    fold_of_row = np.zeros(table.n_rows, dtype=np.int64)
    for (fold, s), (_, te) in zip(results, folds):
        scores[te] = s
        predicted[te] = s >= fold.threshold
        fold_of_row[te] = fold.index
    meta = {"k": k, "stratified": str(stratified).lower(), "rows": table.n_rows,
            "positives": n_pos, "width": table.width}
    return EvalReport(name, [r[0] for r in results], scores, predicted, table.target.copy(),
                      fold_of_row, meta)
