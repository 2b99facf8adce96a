"""Entropy-threshold schedules for pseudo-label selection.

A schedule decides, at SSL iteration ``t``, which unlabeled samples are
confident enough to train on. Confidence is the (differential) entropy
of the teacher's predicted orientation distribution: lower entropy means
more concentrated, and a sample is selected when its entropy is at or
below the iteration's threshold.

Three schedule families:

* fixed: one constant entropy threshold tau for the whole run;
* multistage: the run is cut into ``n_stage`` equal-length stages, and
  in stage ``i`` the threshold is the empirical quantile of the current
  batch's entropies at proportion ``alpha_i`` (linearly spaced from
  ``alpha_start`` to ``alpha_end`` percent), so the admitted fraction
  grows stepwise;
* adaptive: the threshold itself moves linearly from ``tau_start`` to
  ``tau_end`` over the run, admitting more samples as training proceeds.

``n_iter`` is the number of SSL iterations the schedule spans. Stage
length is ``max(1, n_iter // n_stage)`` and the stage index is clamped
to ``n_stage``, so every stage is visited when ``n_iter >= n_stage``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

__all__ = [
    "FixedSchedule",
    "MultistageSchedule",
    "AdaptiveSchedule",
    "CurriculumSchedule",
    "SelectionResult",
    "stage_length",
    "stage_index",
    "stage_proportion",
    "stage_threshold",
    "quantile_threshold",
    "adaptive_threshold",
    "threshold_at",
    "select",
    "MaskRatioLog",
]

MASK_RATIO_HEADER = "iter,ratio,threshold,stage"


def _require_iters(n_iter: int) -> None:
    if n_iter < 1:
        raise ValueError(f"n_iter must be >= 1, got {n_iter}")


@dataclass(frozen=True)
class FixedSchedule:
    """Constant entropy threshold ``tau`` over ``n_iter`` iterations."""

    tau: float
    n_iter: int

    def __post_init__(self) -> None:
        _require_iters(self.n_iter)
        if not math.isfinite(self.tau):
            raise ValueError("tau must be finite")


@dataclass(frozen=True)
class MultistageSchedule:
    """Stepwise quantile curriculum.

    ``alpha_start`` and ``alpha_end`` are percentages in [0, 100] with
    ``alpha_start <= alpha_end``; ``n_stage >= 2`` so the proportions
    interpolate across at least two distinct stages.
    """

    alpha_start: float
    alpha_end: float
    n_stage: int
    n_iter: int

    def __post_init__(self) -> None:
        _require_iters(self.n_iter)
        if self.n_stage < 2:
            raise ValueError(f"n_stage must be >= 2, got {self.n_stage}")
        if not (0.0 <= self.alpha_start <= self.alpha_end <= 100.0):
            raise ValueError(
                "need 0 <= alpha_start <= alpha_end <= 100, got "
                f"({self.alpha_start}, {self.alpha_end})"
            )


@dataclass(frozen=True)
class AdaptiveSchedule:
    """Threshold moving linearly from ``tau_start`` to ``tau_end``."""

    tau_start: float
    tau_end: float
    n_iter: int

    def __post_init__(self) -> None:
        _require_iters(self.n_iter)
        if not (math.isfinite(self.tau_start) and math.isfinite(self.tau_end)):
            raise ValueError("tau endpoints must be finite")
        if self.tau_start > self.tau_end:
            raise ValueError(
                "tau_start must be <= tau_end (the threshold loosens over time), got "
                f"({self.tau_start}, {self.tau_end})"
            )


CurriculumSchedule = Union[FixedSchedule, MultistageSchedule, AdaptiveSchedule]


def stage_length(schedule: MultistageSchedule) -> int:
    """Iterations per stage: ``floor(n_iter / n_stage)`` clamped to >= 1."""
    return max(1, schedule.n_iter // schedule.n_stage)


def _check_t(t: int, n_iter: int) -> None:
    if not 0 <= t <= n_iter:
        raise ValueError(f"iteration {t} outside [0, {n_iter}]")


def stage_index(t: int, schedule: MultistageSchedule) -> int:
    """1-based stage index at iteration ``t``, clamped to ``n_stage``."""
    _check_t(t, schedule.n_iter)
    return min(t // stage_length(schedule) + 1, schedule.n_stage)


def stage_proportion(i: int, schedule: MultistageSchedule) -> float:
    """Admitted proportion (as a fraction in [0, 1]) for stage ``i``.

    Stage proportions are linearly spaced between ``alpha_start`` and
    ``alpha_end`` percent: stage 1 admits ``alpha_start`` percent, stage
    ``n_stage`` admits ``alpha_end`` percent.
    """
    if not 1 <= i <= schedule.n_stage:
        raise ValueError(f"stage {i} outside [1, {schedule.n_stage}]")
    step = (schedule.alpha_end - schedule.alpha_start) / (schedule.n_stage - 1)
    return (schedule.alpha_start + (i - 1) * step) / 100.0


def _quantile_value(entropies: np.ndarray, proportion: float) -> float:
    # k = floor(p * N), 0-indexed into the ascending sort, clamped to the
    # last element. The small nudge keeps exact products like 0.85 * 100
    # from landing one short of the intended integer.
    n = entropies.shape[0]
    k = int(math.floor(proportion * n + 1e-9))
    k = min(k, n - 1)
    return float(np.sort(entropies, kind="stable")[k])


def quantile_threshold(entropies: np.ndarray, proportion: float) -> float:
    """Absolute threshold admitting roughly ``proportion`` of ``entropies``.

    Same floor-indexed order statistic as the multistage schedule, so a
    threshold calibrated at proportion p selects exactly as a stage with
    alpha = 100p would on the calibration batch.
    """
    if not 0.0 <= proportion <= 1.0:
        raise ValueError(f"proportion must lie in [0, 1], got {proportion}")
    return _quantile_value(_check_entropies(entropies), proportion)


def _check_entropies(entropies: np.ndarray) -> np.ndarray:
    e = np.asarray(entropies, dtype=np.float64)
    if e.ndim != 1 or e.shape[0] == 0:
        raise ValueError(f"entropies must be a nonempty 1-D array, got shape {e.shape}")
    if not np.all(np.isfinite(e)):
        raise ValueError("entropies must be finite")
    return e


def stage_threshold(
    t: int, schedule: MultistageSchedule, entropies: np.ndarray
) -> tuple[float, int]:
    """Quantile threshold for the batch at iteration ``t``.

    Sorts the batch entropies ascending and returns the value at index
    ``floor(alpha_i * N)`` (clamped to ``N - 1``) together with the
    1-based stage index. Everything at or below the returned value is
    admitted, so with distinct entropies the admitted count is
    ``min(floor(alpha_i * N) + 1, N)``.
    """
    e = _check_entropies(entropies)
    i = stage_index(t, schedule)
    return _quantile_value(e, stage_proportion(i, schedule)), i


def adaptive_threshold(t: int, schedule: AdaptiveSchedule) -> float:
    """Linear interpolation ``tau_start + (tau_end - tau_start) * t / n_iter``."""
    _check_t(t, schedule.n_iter)
    return schedule.tau_start + (schedule.tau_end - schedule.tau_start) * (
        t / schedule.n_iter
    )


def threshold_at(
    t: int, schedule: CurriculumSchedule, entropies: np.ndarray
) -> tuple[float, int]:
    """Dispatch to the schedule family; returns ``(threshold, stage)``.

    ``stage`` is the 1-based multistage index, or 0 for the families
    without stages.
    """
    if isinstance(schedule, FixedSchedule):
        _check_t(t, schedule.n_iter)
        return schedule.tau, 0
    if isinstance(schedule, MultistageSchedule):
        return stage_threshold(t, schedule, entropies)
    if isinstance(schedule, AdaptiveSchedule):
        return adaptive_threshold(t, schedule), 0
    raise TypeError(f"unknown schedule type {type(schedule).__name__}")


@dataclass(frozen=True)
class SelectionResult:
    """Outcome of thresholding one batch of entropies."""

    mask: np.ndarray
    threshold: float
    stage: int

    @property
    def ratio(self) -> float:
        return float(self.mask.mean())

    @property
    def count(self) -> int:
        return int(self.mask.sum())


def select(
    t: int, schedule: CurriculumSchedule, entropies: np.ndarray
) -> SelectionResult:
    """Select the samples whose entropy is at or below the threshold at ``t``."""
    e = _check_entropies(entropies)
    threshold, stage = threshold_at(t, schedule, e)
    return SelectionResult(mask=e <= threshold, threshold=threshold, stage=stage)


@dataclass
class MaskRatioLog:
    """Accumulates per-iteration selection telemetry and writes it as CSV.

    Columns: ``iter,ratio,threshold,stage``. ``stage`` is 0 outside the
    multistage family. Floats are written with ``repr`` so the file
    round-trips exactly.
    """

    rows: list[tuple[int, float, float, int]] = field(default_factory=list)

    def append(self, t: int, result: SelectionResult) -> None:
        self.rows.append((t, result.ratio, result.threshold, result.stage))

    def to_csv(self) -> str:
        lines = [MASK_RATIO_HEADER]
        for t, ratio, threshold, stage in self.rows:
            lines.append(f"{t},{ratio!r},{threshold!r},{stage}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_csv())
