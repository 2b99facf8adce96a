"""Evaluation: per-category median angle error and ACC@30.

A predictor is any callable mapping a uint8 image batch plus category
ids to predicted rotations, ``(B, H, W, 3), (B,) -> (B, 3, 3)``. Errors
are relative rotation angles in degrees. The report aggregates per
category and then averages across categories without weighting by
category size (each category counts once).

Conventions pinned here because downstream numbers depend on them:

* the median of an even-length list is the lower of the two central
  values (no averaging), i.e. ``sorted(xs)[(n - 1) // 2]``;
* accuracy at a threshold counts errors strictly below it, so an error
  of exactly 30 degrees does not pass ACC@30;
* the per-category class condition of the accuracy metric is trivially
  satisfied since the category id is an input to the predictor, not a
  prediction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import so3

__all__ = [
    "Predictor",
    "median_lower",
    "angle_errors",
    "acc_at",
    "CategoryStats",
    "EvalReport",
    "summarize",
    "per_category_csv",
    "aggregate_csv",
]

Predictor = Callable[[np.ndarray, np.ndarray], np.ndarray]

PER_CATEGORY_HEADER = "category,n,median_deg,acc30"
AGGREGATE_HEADER = "mean_med_deg,mean_acc30"


def median_lower(values: Sequence[float]) -> float:
    """Lower-central median: ``sorted(values)[(n - 1) // 2]``."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] == 0:
        raise ValueError("median needs a nonempty 1-D collection")
    return float(np.sort(arr, kind="stable")[(arr.shape[0] - 1) // 2])


def angle_errors(
    predict: Predictor,
    images: np.ndarray,
    categories: np.ndarray,
    labels: np.ndarray,
) -> list[tuple[int, float]]:
    """Per-sample ``(category, error_deg)`` for a predictor on labeled data.

    ``labels`` must hold one valid rotation per sample; unlabeled data
    cannot be scored.
    """
    images = np.asarray(images)
    categories = np.asarray(categories, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.float64)
    n = images.shape[0]
    if categories.shape != (n,) or labels.shape != (n, 3, 3):
        raise ValueError("images, categories, and labels must agree in length")
    for i in range(n):
        so3.check_rotation(labels[i], f"label {i}")
    preds = np.asarray(predict(images, categories), dtype=np.float64)
    if preds.shape != (n, 3, 3):
        raise ValueError(f"predictor returned shape {preds.shape}, expected {(n, 3, 3)}")
    traces = np.einsum("nij,nij->n", preds, labels)
    cos = np.clip((traces - 1.0) / 2.0, -1.0, 1.0)
    errs = np.degrees(np.arccos(cos))
    return [(int(c), float(e)) for c, e in zip(categories, errs)]


def acc_at(errors: Sequence[float], threshold_deg: float) -> float:
    """Fraction of errors strictly below ``threshold_deg``."""
    if threshold_deg <= 0.0:
        raise ValueError("threshold must be positive")
    arr = np.asarray(errors, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] == 0:
        raise ValueError("accuracy needs a nonempty error list")
    return float(np.mean(arr < threshold_deg))


@dataclass(frozen=True)
class CategoryStats:
    n: int
    median_deg: float
    acc30: float


@dataclass(frozen=True)
class EvalReport:
    """Per-category stats plus unweighted cross-category means."""

    per_category: dict[int, CategoryStats]
    mean_med_deg: float
    mean_acc30: float


def summarize(
    pairs: Iterable[tuple[int, float]] | Mapping[int, Sequence[float]],
    acc_threshold_deg: float = 30.0,
) -> EvalReport:
    """Aggregate ``(category, error)`` pairs into an :class:`EvalReport`.

    Also accepts a mapping ``category -> errors``. Aggregates are plain
    means over the categories present, regardless of their sizes.
    """
    if isinstance(pairs, Mapping):
        by_cat = {int(k): list(map(float, v)) for k, v in pairs.items()}
    else:
        by_cat = {}
        for cat, err in pairs:
            by_cat.setdefault(int(cat), []).append(float(err))
    if not by_cat:
        raise ValueError("need at least one category to summarize")
    per_category = {}
    for cat in sorted(by_cat):
        errs = by_cat[cat]
        if not errs:
            raise ValueError(f"category {cat} has no samples")
        per_category[cat] = CategoryStats(
            n=len(errs),
            median_deg=median_lower(errs),
            acc30=acc_at(errs, acc_threshold_deg),
        )
    stats = list(per_category.values())
    return EvalReport(
        per_category=per_category,
        mean_med_deg=float(np.mean([s.median_deg for s in stats])),
        mean_acc30=float(np.mean([s.acc30 for s in stats])),
    )


def per_category_csv(report: EvalReport) -> str:
    lines = [PER_CATEGORY_HEADER]
    for cat in sorted(report.per_category):
        s = report.per_category[cat]
        lines.append(f"{cat},{s.n},{s.median_deg!r},{s.acc30!r}")
    return "\n".join(lines) + "\n"


def aggregate_csv(report: EvalReport) -> str:
    return (
        AGGREGATE_HEADER + "\n" + f"{report.mean_med_deg!r},{report.mean_acc30!r}" + "\n"
    )
