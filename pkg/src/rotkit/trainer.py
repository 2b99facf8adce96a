"""Two-phase training: supervised warm-up, then teacher-student SSL.

The loop keeps two parameter sets. The student takes gradient steps;
the teacher is an exponential moving average of the student and is the
model that gets exported and evaluated. During the SSL phase each
iteration works on one labeled batch and one unlabeled batch:

1. the teacher sees a weakly augmented view of every unlabeled sample
   and emits a pseudo-rotation (distribution mode) plus its entropy;
2. the curriculum schedule turns the entropies into a threshold and a
   selection mask;
3. the student is trained on the labeled batch (un-augmented, same loss
   as the warm-up) plus the selected unlabeled samples under mosaic
   augmentation, against their pseudo-rotations.

The unsupervised loss is normalized by the full unlabeled batch size,
not by the selected count, so a sparse early selection contributes
proportionally little gradient. When the unsupervised weight is zero or
the selection is empty, the unlabeled gradient term is skipped outright
rather than added as zeros, which keeps the update bit-identical to a
purely supervised step.

Reproducibility: every random decision draws from a stream derived from
the run seed and a purpose label (batch order, weak view at iteration t
slot j, mosaic at iteration t slot j). Slot streams are keyed by the
position in the unlabeled batch, not the position among the selected
samples, so whether a neighbor was selected never shifts anyone else's
randomness. The per-patch child seeds let the mosaic stage fan out to
threads while reducing in a fixed order.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import augment, curriculum, data, fisher, metrics, model, seeding, so3

__all__ = [
    "TrainConfig",
    "TrainState",
    "TrainingAborted",
    "IterRecord",
    "EvalRecord",
    "TrainLog",
    "TrainResult",
    "PseudoLabel",
    "PseudoBatch",
    "model_predictor",
    "supervised_step",
    "pseudo_label",
    "pseudo_label_many",
    "ssl_step",
    "train",
]

TRAIN_LOG_HEADER = "iter,phase,loss_s,loss_u,threshold,mask_ratio,stage"
EVAL_LOG_HEADER = "iter,mean_med_deg,mean_acc30"

PHASE_SUPERVISED = "supervised"
PHASE_SSL = "ssl"


class TrainingAborted(RuntimeError):
    """Raised when a loss or gradient stops being finite.

    Carries the iteration index and the ids of the samples in the batch
    that produced the bad step.
    """

    def __init__(self, iteration: int, sample_ids: list[str], reason: str):
        self.iteration = iteration
        self.sample_ids = list(sample_ids)
        super().__init__(
            f"training aborted at iteration {iteration}: {reason} "
            f"(batch ids: {', '.join(self.sample_ids) or 'unknown'})"
        )


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one run.

    ``schedule`` must cover exactly the SSL iterations
    (``total_iters - supervised_iters``); leave it ``None`` for a purely
    supervised run. With ``threshold_as_quantile`` the fixed or adaptive
    schedule's tau values are read as proportions in [0, 1] and resolved
    into absolute entropy thresholds on the first SSL batch.
    """

    total_iters: int
    supervised_iters: int
    batch_labeled: int = 32
    batch_unlabeled: int = 128
    lam: float = 1.0
    lr_supervised: float = 1e-4
    lr_ssl: float = 1e-5
    schedule: curriculum.CurriculumSchedule | None = None
    pool: augment.AugPool = augment.DEFAULT_POOL
    mosaic_n: int = 5
    ema_momentum: float = 0.999
    seed: int = 0
    threshold_as_quantile: bool = False
    use_mosaic: bool = True
    workers: int = 1

    def __post_init__(self):
        if self.total_iters < 1:
            raise ValueError("total_iters must be >= 1")
        if not 0 <= self.supervised_iters <= self.total_iters:
            raise ValueError("need 0 <= supervised_iters <= total_iters")
        if self.batch_labeled < 1 or self.batch_unlabeled < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.lam < 0.0:
            raise ValueError("lam must be >= 0")
        if self.lr_supervised <= 0.0 or self.lr_ssl <= 0.0:
            raise ValueError("learning rates must be positive")
        if self.mosaic_n < 1:
            raise ValueError("mosaic_n must be >= 1")
        if not 0.0 <= self.ema_momentum < 1.0:
            raise ValueError("ema_momentum must lie in [0, 1)")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        ssl_iters = self.total_iters - self.supervised_iters
        if ssl_iters == 0:
            if self.schedule is not None:
                raise ValueError("schedule given but there are no SSL iterations")
        else:
            if self.schedule is None:
                raise ValueError("SSL iterations require a schedule")
            if self.schedule.n_iter != ssl_iters:
                raise ValueError(
                    f"schedule covers {self.schedule.n_iter} iterations, "
                    f"run has {ssl_iters} SSL iterations"
                )
        if self.threshold_as_quantile:
            if isinstance(self.schedule, curriculum.FixedSchedule):
                taus = (self.schedule.tau,)
            elif isinstance(self.schedule, curriculum.AdaptiveSchedule):
                taus = (self.schedule.tau_start, self.schedule.tau_end)
            else:
                raise ValueError(
                    "threshold_as_quantile needs a fixed or adaptive schedule"
                )
            if any(not 0.0 <= q <= 1.0 for q in taus):
                raise ValueError("quantile thresholds must lie in [0, 1]")

    @property
    def ssl_iters(self) -> int:
        return self.total_iters - self.supervised_iters


@dataclass(frozen=True)
class TrainState:
    """Student, its EMA teacher, and the optimizer buffers."""

    student: model.RegressorParams
    teacher: model.RegressorParams
    opt: model.SgdState


def initial_state(model_cfg: model.ModelConfig) -> TrainState:
    student = model.init_params(model_cfg)
    teacher = model.map_params(np.copy, student)
    return TrainState(student=student, teacher=teacher, opt=model.SgdState.zeros(student))


@dataclass(frozen=True)
class IterRecord:
    iteration: int
    phase: str
    loss_s: float
    loss_u: float | None = None
    threshold: float | None = None
    mask_ratio: float | None = None
    stage: int | None = None


@dataclass(frozen=True)
class EvalRecord:
    iteration: int
    mean_med_deg: float
    mean_acc30: float


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, int):
        return str(value)
    return repr(float(value))


@dataclass
class TrainLog:
    """Per-iteration loss records plus periodic evaluation records."""

    records: list[IterRecord] = field(default_factory=list)
    evals: list[EvalRecord] = field(default_factory=list)

    def append(self, rec: IterRecord) -> None:
        if self.records and rec.iteration <= self.records[-1].iteration:
            raise ValueError("iteration indices must be strictly increasing")
        self.records.append(rec)

    def to_csv(self) -> str:
        lines = [TRAIN_LOG_HEADER]
        for r in self.records:
            lines.append(
                ",".join(
                    [
                        str(r.iteration),
                        r.phase,
                        _cell(r.loss_s),
                        _cell(r.loss_u),
                        _cell(r.threshold),
                        _cell(r.mask_ratio),
                        _cell(r.stage),
                    ]
                )
            )
        return "\n".join(lines) + "\n"

    def eval_csv(self) -> str:
        lines = [EVAL_LOG_HEADER]
        for r in self.evals:
            lines.append(
                f"{r.iteration},{_cell(r.mean_med_deg)},{_cell(r.mean_acc30)}"
            )
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            fh.write(self.to_csv())

    def write_eval(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            fh.write(self.eval_csv())


@dataclass(frozen=True)
class TrainResult:
    student: model.RegressorParams
    teacher: model.RegressorParams
    log: TrainLog


def model_predictor(model_cfg: model.ModelConfig, params: model.RegressorParams) -> metrics.Predictor:
    """Wrap parameters as a predictor: images + categories -> rotations."""

    def predict(imgs: np.ndarray, cats: np.ndarray) -> np.ndarray:
        fs, _ = model.forward_many(model_cfg, params, imgs, cats)
        rs, _ = fisher.mode_many(fs)
        return rs

    return predict


def _check_labels(rotations: np.ndarray, n: int) -> np.ndarray:
    rotations = np.asarray(rotations, dtype=np.float64)
    if rotations.shape != (n, 3, 3):
        raise ValueError(f"expected {n} rotation labels, got shape {rotations.shape}")
    for i in range(n):
        # a sample without a usable label shows up here as a non-rotation
        so3.check_rotation(rotations[i], f"label {i}")
    return rotations


def supervised_step(
    model_cfg: model.ModelConfig,
    state: TrainState,
    images: np.ndarray,
    categories: np.ndarray,
    rotations: np.ndarray,
    lr: float,
    ema_momentum: float,
) -> tuple[float, TrainState]:
    """One labeled-batch step: mean NLL, sgd update, teacher EMA update."""
    images = np.asarray(images)
    categories = np.asarray(categories, dtype=np.int64)
    n = images.shape[0]
    rotations = _check_labels(rotations, n)
    fs, cache = model.forward_many(model_cfg, state.student, images, categories)
    loss = float(np.mean(fisher.nll_many(fs, rotations)))
    upstream = (fisher.expected_rotation_many(fs) - rotations) / n
    grads = model.backward(state.student, cache, upstream)
    student, opt = model.sgd_step(state.student, grads, state.opt, lr)
    teacher = model.ema_update(state.teacher, student, ema_momentum)
    return loss, TrainState(student=student, teacher=teacher, opt=opt)


@dataclass(frozen=True)
class PseudoLabel:
    """Teacher output for one weakly augmented unlabeled sample."""

    rotation: np.ndarray
    entropy: float
    degenerate: bool


@dataclass(frozen=True)
class PseudoBatch:
    rotations: np.ndarray
    entropies: np.ndarray
    degenerate: np.ndarray

    def __len__(self) -> int:
        return self.entropies.shape[0]


def pseudo_label(
    model_cfg: model.ModelConfig,
    teacher: model.RegressorParams,
    image: np.ndarray,
    category: int,
    rng: np.random.Generator,
) -> PseudoLabel:
    """Mode and entropy of the teacher's prediction on a weak view."""
    batch = pseudo_label_many(
        model_cfg,
        teacher,
        np.asarray(image)[None],
        np.array([category], dtype=np.int64),
        [rng],
    )
    return PseudoLabel(
        rotation=batch.rotations[0],
        entropy=float(batch.entropies[0]),
        degenerate=bool(batch.degenerate[0]),
    )


def pseudo_label_many(
    model_cfg: model.ModelConfig,
    teacher: model.RegressorParams,
    images: np.ndarray,
    categories: np.ndarray,
    rngs,
) -> PseudoBatch:
    images = np.asarray(images)
    n = images.shape[0]
    if len(rngs) != n:
        raise ValueError(f"need one rng per sample, got {len(rngs)} for {n}")
    weak = np.stack([augment.weak_augment(images[i], rngs[i]) for i in range(n)])
    fs, _ = model.forward_many(model_cfg, teacher, weak, categories)
    rotations, degenerate = fisher.mode_many(fs)
    entropies = fisher.entropy_many(fs)
    return PseudoBatch(rotations=rotations, entropies=entropies, degenerate=degenerate)


def _mosaic_batch(
    images: np.ndarray,
    indices: np.ndarray,
    cfg: TrainConfig,
    t: int,
) -> np.ndarray:
    def one(j: int) -> np.ndarray:
        rng = seeding.spawn(cfg.seed, "mosaic", t, int(j))
        return augment.pose_mosaic(images[j], cfg.mosaic_n, cfg.pool, rng)

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            # map() yields in submission order, keeping the reduce deterministic
            return np.stack(list(pool.map(one, indices)))
    return np.stack([one(j) for j in indices])


def ssl_step(
    model_cfg: model.ModelConfig,
    cfg: TrainConfig,
    schedule: curriculum.CurriculumSchedule,
    state: TrainState,
    labeled: tuple[np.ndarray, np.ndarray, np.ndarray],
    unlabeled: tuple[np.ndarray, np.ndarray],
    t: int,
    pseudo: PseudoBatch | None = None,
) -> tuple[float, float, curriculum.SelectionResult, TrainState]:
    """One SSL iteration at global step ``t``.

    Returns ``(loss_s, loss_u, selection, new_state)``. The loss values
    are weight-independent; the combined objective is
    ``loss_s + lam * loss_u``.
    """
    if t < cfg.supervised_iters:
        raise ValueError(f"ssl_step called at t={t}, before the SSL phase")
    t_ssl = t - cfg.supervised_iters
    l_imgs, l_cats, l_rots = labeled
    u_imgs, u_cats = unlabeled
    b_l = l_imgs.shape[0]
    b_u = u_imgs.shape[0]
    l_rots = _check_labels(np.asarray(l_rots), b_l)

    if pseudo is None:
        rngs = [seeding.spawn(cfg.seed, "weak", t, j) for j in range(b_u)]
        pseudo = pseudo_label_many(model_cfg, state.teacher, u_imgs, u_cats, rngs)
    sel = curriculum.select(t_ssl, schedule, pseudo.entropies)

    fs_l, cache_l = model.forward_many(model_cfg, state.student, l_imgs, l_cats)
    loss_s = float(np.mean(fisher.nll_many(fs_l, l_rots)))
    grads = model.backward(
        state.student, cache_l, (fisher.expected_rotation_many(fs_l) - l_rots) / b_l
    )

    loss_u = 0.0
    if sel.count > 0:
        chosen = np.flatnonzero(sel.mask)
        if cfg.use_mosaic:
            strong = _mosaic_batch(u_imgs, chosen, cfg, t)
        else:
            # ablation: the student sees the raw unlabeled image
            strong = u_imgs[chosen]
        fs_u, cache_u = model.forward_many(
            model_cfg, state.student, strong, u_cats[chosen]
        )
        targets = pseudo.rotations[chosen]
        loss_u = float(np.sum(fisher.nll_many(fs_u, targets)) / b_u)
        if cfg.lam > 0.0:
            up_u = (fisher.expected_rotation_many(fs_u) - targets) * (cfg.lam / b_u)
            g_u = model.backward(state.student, cache_u, up_u)
            grads = model.map_params(lambda a, b: a + b, grads, g_u)

    student, opt = model.sgd_step(state.student, grads, state.opt, cfg.lr_ssl)
    teacher = model.ema_update(state.teacher, student, cfg.ema_momentum)
    return loss_s, loss_u, sel, TrainState(student=student, teacher=teacher, opt=opt)


class _IndexStream:
    """Endless shuffled index stream: fresh permutation per pass."""

    def __init__(self, n: int, rng: np.random.Generator):
        if n < 1:
            raise ValueError("need at least one sample to stream")
        self._n = n
        self._rng = rng
        self._perm = np.empty(0, dtype=np.int64)
        self._pos = 0

    def take(self, k: int) -> np.ndarray:
        out = np.empty(k, dtype=np.int64)
        filled = 0
        while filled < k:
            if self._pos == self._perm.shape[0]:
                self._perm = self._rng.permutation(self._n)
                self._pos = 0
            m = min(k - filled, self._perm.shape[0] - self._pos)
            out[filled : filled + m] = self._perm[self._pos : self._pos + m]
            self._pos += m
            filled += m
        return out


def _resolve_quantile_schedule(
    schedule: curriculum.CurriculumSchedule, entropies: np.ndarray
) -> curriculum.CurriculumSchedule:
    if isinstance(schedule, curriculum.FixedSchedule):
        return replace(
            schedule, tau=curriculum.quantile_threshold(entropies, schedule.tau)
        )
    if isinstance(schedule, curriculum.AdaptiveSchedule):
        return replace(
            schedule,
            tau_start=curriculum.quantile_threshold(entropies, schedule.tau_start),
            tau_end=curriculum.quantile_threshold(entropies, schedule.tau_end),
        )
    raise TypeError("quantile calibration applies to fixed or adaptive schedules")


def train(
    cfg: TrainConfig,
    model_cfg: model.ModelConfig,
    manifest: data.DatasetManifest,
    base_dir,
    eval_data: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
    eval_every: int = 0,
    checkpoint_every: int = 0,
    checkpoint_dir=None,
) -> TrainResult:
    """Run the full two-phase loop over a dataset directory.

    ``eval_data`` is an optional ``(images, categories, rotations)``
    test triple; every ``eval_every`` iterations the teacher is scored
    on it and an eval record appended. ``checkpoint_every`` writes
    periodic teacher checkpoints into ``checkpoint_dir``.
    """
    if eval_every < 0 or checkpoint_every < 0:
        raise ValueError("intervals must be >= 0")
    if checkpoint_every > 0 and checkpoint_dir is None:
        raise ValueError("checkpoint_every needs a checkpoint_dir")

    labeled = manifest.labeled()
    if not labeled:
        raise ValueError("training requires a non-empty labeled split")
    unlabeled = manifest.unlabeled()
    if cfg.ssl_iters > 0 and not unlabeled:
        raise ValueError("SSL iterations require unlabeled samples")

    l_imgs = data.load_images(manifest, base_dir, labeled)
    l_cats = np.array([r.category for r in labeled], dtype=np.int64)
    l_rots = np.stack([r.label for r in labeled])
    if unlabeled:
        u_imgs = data.load_images(manifest, base_dir, unlabeled)
        u_cats = np.array([r.category for r in unlabeled], dtype=np.int64)

    state = initial_state(model_cfg)
    log = TrainLog()
    stream_l = _IndexStream(len(labeled), seeding.spawn(cfg.seed, "labeled-order"))
    if unlabeled:
        stream_u = _IndexStream(
            len(unlabeled), seeding.spawn(cfg.seed, "unlabeled-order")
        )
    schedule = cfg.schedule

    for t in range(cfg.total_iters):
        idx_l = stream_l.take(cfg.batch_labeled)
        batch_ids = [labeled[i].id for i in idx_l]
        try:
            if t < cfg.supervised_iters:
                loss_s, state = supervised_step(
                    model_cfg,
                    state,
                    l_imgs[idx_l],
                    l_cats[idx_l],
                    l_rots[idx_l],
                    cfg.lr_supervised,
                    cfg.ema_momentum,
                )
                rec = IterRecord(iteration=t, phase=PHASE_SUPERVISED, loss_s=loss_s)
            else:
                idx_u = stream_u.take(cfg.batch_unlabeled)
                batch_ids = batch_ids + [unlabeled[i].id for i in idx_u]
                ub_imgs = u_imgs[idx_u]
                ub_cats = u_cats[idx_u]
                rngs = [
                    seeding.spawn(cfg.seed, "weak", t, j)
                    for j in range(cfg.batch_unlabeled)
                ]
                pseudo = pseudo_label_many(
                    model_cfg, state.teacher, ub_imgs, ub_cats, rngs
                )
                if cfg.threshold_as_quantile and t == cfg.supervised_iters:
                    schedule = _resolve_quantile_schedule(schedule, pseudo.entropies)
                loss_s, loss_u, sel, state = ssl_step(
                    model_cfg,
                    cfg,
                    schedule,
                    state,
                    (l_imgs[idx_l], l_cats[idx_l], l_rots[idx_l]),
                    (ub_imgs, ub_cats),
                    t,
                    pseudo=pseudo,
                )
                rec = IterRecord(
                    iteration=t,
                    phase=PHASE_SSL,
                    loss_s=loss_s,
                    loss_u=loss_u,
                    threshold=sel.threshold,
                    mask_ratio=sel.ratio,
                    stage=sel.stage,
                )
        except ValueError as exc:
            # NonFiniteGradient, or a diverged step tripping the Fisher
            # parameter norm guard on the next forward pass
            raise TrainingAborted(t, batch_ids, str(exc)) from exc
        if not np.isfinite(rec.loss_s) or (
            rec.loss_u is not None and not np.isfinite(rec.loss_u)
        ):
            raise TrainingAborted(t, batch_ids, "non-finite loss")
        log.append(rec)

        done = t + 1
        if eval_every > 0 and eval_data is not None and done % eval_every == 0:
            e_imgs, e_cats, e_rots = eval_data
            report = metrics.summarize(
                metrics.angle_errors(
                    model_predictor(model_cfg, state.teacher), e_imgs, e_cats, e_rots
                )
            )
            log.evals.append(
                EvalRecord(
                    iteration=t,
                    mean_med_deg=report.mean_med_deg,
                    mean_acc30=report.mean_acc30,
                )
            )
        if checkpoint_every > 0 and done % checkpoint_every == 0:
            path = os.path.join(checkpoint_dir, f"checkpoint_{done:06d}.bin")
            model.save_checkpoint(path, model_cfg, state.teacher)

    return TrainResult(student=state.student, teacher=state.teacher, log=log)
