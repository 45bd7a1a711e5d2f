"""Training losses and evaluation metrics.

Losses operate on `Tensor` logits and are differentiable. Metrics operate
on plain numpy arrays.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from src.core import tensor as T
from src.core.exceptions import DegenerateInputError, ShapeError
from src.core.tensor import Tensor
from src.utils.logger import logger

METRIC_COLUMNS = ["run_id", "seed", "metric", "dataset", "value"]


# Losses

def _check_labels(logits: Tensor, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ShapeError(f"Logits must be N x K with K >= 2, got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"Expected {logits.shape[0]} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise DegenerateInputError(f"Labels out of range [0, {logits.shape[1]})")
    return labels


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Batch mean of -log softmax(logits)[label]."""
    labels = _check_labels(logits, labels)
    picked = T.take_labels(T.log_softmax(logits), labels)
    return T.neg(T.reduce_mean(picked))


def jsd_consistency(y_hat: Tensor, y_bar: Tensor) -> Tensor:
    """
    Symmetrized KL between the two softmax outputs, averaged over the batch.

    0.5 * [KL(p || q) + KL(q || p)] = 0.5 * sum_k (p_k - q_k)(log p_k - log q_k)
    """
    if y_hat.shape != y_bar.shape:
        raise ShapeError(f"Consistency inputs differ: {y_hat.shape} vs {y_bar.shape}")
    log_p = T.log_softmax(y_hat)
    log_q = T.log_softmax(y_bar)
    per_sample = T.reduce_sum(T.mul(T.sub(T.exp(log_p), T.exp(log_q)), T.sub(log_p, log_q)), axis=1)
    return T.mul(T.reduce_mean(per_sample), 0.5)


def loss_terms(y_hat: Tensor, y_bar: Tensor, labels: np.ndarray, delta: float) -> Tuple[Tensor, Tensor, Optional[Tensor]]:
    """
    Total two-view loss and its parts.

    Returns:
        (total, averaged cross-entropy, consistency term or None when delta == 0)
    """
    if delta < 0:
        raise ValueError(f"delta must be non-negative, got {delta}")
    ce = T.mul(T.add(cross_entropy(y_hat, labels), cross_entropy(y_bar, labels)), 0.5)
    if delta == 0:
        return ce, ce, None
    jsd = jsd_consistency(y_hat, y_bar)
    return T.add(ce, T.mul(jsd, delta)), ce, jsd


def total_loss(y_hat: Tensor, y_bar: Tensor, labels: np.ndarray, delta: float) -> Tensor:
    """0.5 * (CE(y_hat) + CE(y_bar)) + delta * JSD(y_hat, y_bar)."""
    return loss_terms(y_hat, y_bar, labels, delta)[0]


# Metrics

def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("accuracy of an empty batch")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """
    Rank-based (Mann-Whitney) ROC AUC; tied scores count one half.

    Args:
        scores: Per-sample score, higher means more positive
        labels: Binary labels (1 = positive)

    Returns:
        AUC in [0, 1]
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ShapeError(f"scores {scores.shape} and labels {labels.shape} differ")
    n_pos = int(labels.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def m_cauc(per_dataset_auc: Mapping[str, float], reference_auc: Mapping[str, float]) -> float:
    """Mean over datasets of model AUC divided by the reference model's AUC."""
    if set(per_dataset_auc) != set(reference_auc):
        missing = set(per_dataset_auc) ^ set(reference_auc)
        raise ValueError(f"Dataset keys differ between model and reference: {sorted(missing)}")
    if not per_dataset_auc:
        raise ValueError("m-cAUC over zero datasets")
    ratios = []
    for name in sorted(per_dataset_auc):
        if reference_auc[name] <= 0:
            raise ValueError(f"Reference AUC for {name} must be positive")
        ratios.append(per_dataset_auc[name] / reference_auc[name])
    return float(np.mean(ratios))


def mean_corruption_error(accuracies: Union[np.ndarray, pd.DataFrame, Sequence[Sequence[float]]]) -> float:
    """Mean of (1 - accuracy) over a corruption x severity grid."""
    grid = np.asarray(accuracies, dtype=np.float64)
    if grid.size == 0:
        raise ValueError("Empty corruption grid")
    if np.any(grid < 0) or np.any(grid > 1):
        raise ValueError("Accuracies must lie in [0, 1]")
    return float(np.mean(1.0 - grid))


# Reports

def config_digest(config: Mapping) -> str:
    payload = json.dumps(config, sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


@dataclass
class MetricReport:
    """One named metric with its per-dataset breakdown."""

    name: str
    value: float
    breakdown: Dict[str, float] = field(default_factory=dict)
    seed: Optional[int] = None
    config_digest: str = ""

    def __post_init__(self):
        values = [self.value] + list(self.breakdown.values())
        if not all(np.isfinite(v) for v in values):
            raise ValueError(f"Metric {self.name} has non-finite values")

    def rows(self, run_id: str) -> List[Dict]:
        rows = [{"run_id": run_id, "seed": self.seed, "metric": self.name, "dataset": "all", "value": self.value}]
        rows.extend(
            {"run_id": run_id, "seed": self.seed, "metric": self.name, "dataset": name, "value": value}
            for name, value in self.breakdown.items()
        )
        return rows


def reports_to_frame(reports: Iterable[MetricReport], run_id: str) -> pd.DataFrame:
    rows = [row for report in reports for row in report.rows(run_id)]
    return pd.DataFrame(rows, columns=METRIC_COLUMNS)


def append_metrics_csv(path: Union[str, Path], frame: pd.DataFrame):
    """Append long-form metric rows, writing the header only for a new file."""
    path = Path(path)
    frame = frame.reindex(columns=METRIC_COLUMNS)
    frame.to_csv(path, mode="a", header=not path.exists(), index=False)


def write_summary_json(path: Union[str, Path], reports: Iterable[MetricReport], extra: Optional[Dict] = None):
    summary = {"metrics": [asdict(r) for r in reports]}
    if extra:
        summary.update(extra)
    with open(path, "w") as f:
        json.dump(summary, f, indent=2, default=str)
    logger.info(f"Wrote summary to {path}")


def summarize_runs(frame: pd.DataFrame, by: Sequence[str] = ("method", "metric", "dataset")) -> pd.DataFrame:
    """
    Mean and sample standard deviation per group; single-run groups get std 0.

    Args:
        frame: Long-form metrics with a `value` column and the `by` columns

    Returns:
        DataFrame with columns by + [mean, std, runs]
    """
    grouped = frame.groupby(list(by), sort=True)["value"]
    table = grouped.agg(["mean", "std", "count"]).reset_index()
    table["std"] = table["std"].fillna(0.0)
    return table.rename(columns={"count": "runs"})
