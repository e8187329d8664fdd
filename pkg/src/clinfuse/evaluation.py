"""Confusion counting, diagnostic metrics, cross-validation, ablation.

Metrics with a zero denominator are ``None`` (rendered ``n/a``), never 0:
averaging silent zeros would corrupt the fold summaries. Fold trainings are
independent; each fold's seeds derive from (global seed, fold index), so
serial and parallel execution produce identical numbers.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .data import (
    Dataset,
    DatasetError,
    FoldAssignment,
    compute_normalization_stats,
    preprocess,
    slice_arrays,
)
from .model import ModelConfig, ModelParams, Variant, model_forward
from .seeding import derive_seed
from .tensor import Tensor
from .training import TrainConfig, init_model_params, train

METRIC_NAMES = ("acc", "sensitivity", "specificity", "ppv", "npv")
VARIANT_ORDER = (Variant.IMAGE_ONLY, Variant.IMAGE_CLINICAL, Variant.FULL)


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class MetricsReport:
    acc: Optional[float]
    sensitivity: Optional[float]
    specificity: Optional[float]
    ppv: Optional[float]
    npv: Optional[float]

    def values(self) -> tuple:
        return (self.acc, self.sensitivity, self.specificity, self.ppv, self.npv)


def confusion(predictions, labels, positive_class: int = 1) -> ConfusionCounts:
    """Standard binary counting with an explicit positive class."""
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if p.shape != y.shape or p.ndim != 1:
        raise ValueError(f"prediction/label shapes differ: {p.shape} vs {y.shape}")
    pos_p = p == positive_class
    pos_y = y == positive_class
    return ConfusionCounts(
        tp=int((pos_p & pos_y).sum()),
        fp=int((pos_p & ~pos_y).sum()),
        tn=int((~pos_p & ~pos_y).sum()),
        fn=int((~pos_p & pos_y).sum()),
    )


def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den else None


def metrics(c: ConfusionCounts) -> MetricsReport:
    return MetricsReport(
        acc=_ratio(c.tp + c.tn, c.total),
        sensitivity=_ratio(c.tp, c.tp + c.fn),
        specificity=_ratio(c.tn, c.tn + c.fp),
        ppv=_ratio(c.tp, c.tp + c.fp),
        npv=_ratio(c.tn, c.tn + c.fn),
    )


# ---------------------------------------------------------------------------
# model evaluation
# ---------------------------------------------------------------------------


def predict(config: ModelConfig, params: ModelParams, images, clinical,
            batch_size: int = 128) -> np.ndarray:
    """Eval-mode argmax class indices for a stack of samples."""
    preds = []
    for lo in range(0, len(images), batch_size):
        img_t = Tensor(images[lo:lo + batch_size])
        clin_t = None
        if config.variant != Variant.IMAGE_ONLY:
            clin_t = Tensor(clinical[lo:lo + batch_size])
        probs = model_forward(config, params, img_t, clin_t, train=False)
        preds.append(probs.data.argmax(axis=1))
    return np.concatenate(preds)


def majority_vote(predictions, patients, positive_class: int = 1) -> tuple:
    """Collapse slice predictions to one per patient; ties go positive."""
    order = []
    votes: dict = {}
    for pred, pid in zip(predictions, patients):
        if pid not in votes:
            votes[pid] = [0, 0]
            order.append(pid)
        votes[pid][int(pred == positive_class)] += 1
    out = []
    for pid in order:
        against, for_pos = votes[pid]
        if for_pos > against:
            out.append(positive_class)
        elif for_pos < against:
            out.append(1 - positive_class)
        else:
            out.append(positive_class)  # documented tie-break
    return np.asarray(out), order


def evaluate_model(config: ModelConfig, params: ModelParams, dataset: Dataset,
                   patient_ids, aggregation: str = "slice",
                   positive_class: int = 1) -> MetricsReport:
    """Eval-mode metrics over a fold, per slice or per patient majority."""
    if aggregation not in ("slice", "patient"):
        raise ValueError(f"unknown aggregation {aggregation!r}")
    arrays = slice_arrays(dataset, patient_ids)
    preds = predict(config, params, arrays.images, arrays.clinical)
    if aggregation == "patient":
        preds, order = majority_vote(preds, arrays.patients, positive_class)
        labels_by_id = dataset.labels_by_id()
        labels = np.asarray([labels_by_id[pid] for pid in order])
    else:
        labels = arrays.labels
    return metrics(confusion(preds, labels, positive_class))


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------


@dataclass
class FoldResult:
    fold: int
    report: MetricsReport
    stats: object  # NormalizationStats used for this fold's preprocessing
    train_history: list


@dataclass
class CrossValidationResult:
    fold_results: list
    mean: MetricsReport
    std: MetricsReport

    @property
    def reports(self) -> list:
        return [fr.report for fr in self.fold_results]


def _summarize(reports) -> tuple:
    means, stds = [], []
    for i in range(len(METRIC_NAMES)):
        vals = [r.values()[i] for r in reports if r.values()[i] is not None]
        if vals:
            means.append(float(np.mean(vals)))
            stds.append(float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0)
        else:
            means.append(None)
            stds.append(None)
    return MetricsReport(*means), MetricsReport(*stds)


def _run_fold(dataset: Dataset, folds: FoldAssignment, fold_index: int,
              model_config: ModelConfig, train_config: TrainConfig,
              aggregation: str) -> FoldResult:
    train_ids = folds.train_ids(fold_index)
    test_ids = folds.test_ids(fold_index)
    stats = compute_normalization_stats(dataset, train_ids)
    prepped = preprocess(dataset, stats, model_config.image_size)

    arrays = slice_arrays(prepped, train_ids)
    init_seed = derive_seed(train_config.seed, f"fold{fold_index}-init")
    shuffle_seed = derive_seed(train_config.seed, f"fold{fold_index}-shuffle")
    params = init_model_params(model_config, init_seed)
    cfg = replace(train_config, seed=shuffle_seed)
    clinical = None if model_config.variant == Variant.IMAGE_ONLY else arrays.clinical
    result = train(model_config, params, arrays.images, clinical,
                   arrays.labels, cfg)
    report = evaluate_model(model_config, params, prepped, test_ids, aggregation)
    return FoldResult(fold_index, report, stats, result.history)


def cross_validate(dataset: Dataset, folds: FoldAssignment,
                   model_config: ModelConfig, train_config: TrainConfig,
                   aggregation: str = "slice",
                   jobs: int = 1) -> CrossValidationResult:
    """Train on k-1 folds, evaluate on the held-out one, for every fold.

    Normalization statistics are recomputed per fold from its training
    patients only. With jobs > 1 folds run in separate processes; results
    are identical to the serial order.
    """
    model_config.validate()
    train_config.validate()
    if not folds.folds or any(not f for f in folds.folds):
        raise DatasetError("fold assignment has an empty fold")

    args = [(dataset, folds, i, model_config, train_config, aggregation)
            for i in range(folds.k)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, folds.k)) as pool:
            fold_results = list(pool.map(_run_fold_star, args))
    else:
        fold_results = [_run_fold(*a) for a in args]
    mean, std = _summarize([fr.report for fr in fold_results])
    return CrossValidationResult(fold_results, mean, std)


def _run_fold_star(args):
    return _run_fold(*args)


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------


@dataclass
class AblationResult:
    results: dict  # Variant -> CrossValidationResult

    def mean_acc(self, variant: Variant) -> float:
        return self.results[variant].mean.acc


def ablation_run(dataset: Dataset, folds: FoldAssignment,
                 model_config: ModelConfig, train_config: TrainConfig,
                 aggregation: str = "slice", jobs: int = 1) -> AblationResult:
    """Cross-validate all three variants on identical folds and seeds."""
    results = {}
    for variant in VARIANT_ORDER:
        cfg = replace(model_config, variant=variant)
        results[variant] = cross_validate(dataset, folds, cfg, train_config,
                                          aggregation, jobs)
    return AblationResult(results)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def format_metric(value: Optional[float]) -> str:
    """Percentage with two decimals, or n/a for an undefined metric."""
    return "n/a" if value is None else f"{100.0 * value:.2f}"


def report_csv_rows(variant_name: str, cv: CrossValidationResult) -> list:
    rows = []
    for fr in cv.fold_results:
        rows.append([variant_name, str(fr.fold)]
                    + [format_metric(v) for v in fr.report.values()])
    rows.append([variant_name, "mean"]
                + [format_metric(v) for v in cv.mean.values()])
    rows.append([variant_name, "std"]
                + [format_metric(v) for v in cv.std.values()])
    return rows


def render_table(rows, header) -> str:
    """Aligned text table; rows and header are lists of strings."""
    widths = [len(h) for h in header]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    def fmt(row):
        return "  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row))
    lines = [fmt(header), fmt(["-" * w for w in widths])]
    lines.extend(fmt(row) for row in rows)
    return "\n".join(lines)


def render_report(report: MetricsReport) -> str:
    header = ["metric"] + list(METRIC_NAMES)
    row = ["value"] + [format_metric(v) for v in report.values()]
    return render_table([row], header)


def render_ablation(ablation: AblationResult) -> str:
    header = ["approach"] + [f"{m} %" for m in METRIC_NAMES]
    rows = []
    for variant in VARIANT_ORDER:
        cv = ablation.results[variant]
        rows.append([variant.value]
                    + [format_metric(v) for v in cv.mean.values()])
    return render_table(rows, header)
