"""Stage-wise training of the embedding network on the center-loss objective."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import Dataset, LandmarkMetadata, make_rng, partition_by_region
from .network import (
    MomentumSGD,
    NetworkState,
    forward,
    fresh_batchnorm,
    fresh_classifier,
    init_centers,
    init_network,
    loss_and_gradients,
    lr_multiplier,
    update_centers,
    update_running_stats,
)

log = logging.getLogger(__name__)

FIRST_STAGE_ALPHAS = (0.001, 0.01, 0.01)
LATER_STAGE_ALPHAS = (0.0001, 0.0001, 0.01)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainingConfig:
    lam: float = 5e-5
    momentum: float = 0.9
    weight_decay: float = 5e-3
    first_alphas: Tuple[float, float, float] = FIRST_STAGE_ALPHAS
    later_alphas: Tuple[float, float, float] = LATER_STAGE_ALPHAS
    center_lr: float = 0.5
    epochs: int = 30
    batch_size: int = 32
    non_landmark_proportion: float = 0.4
    lr_decay_factor: float = 0.1
    lr_milestones: Tuple[float, ...] = (0.4, 0.8)
    hidden: Tuple[int, ...] = (64, 64)
    dim: int = 32
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        self.first_alphas = tuple(float(a) for a in self.first_alphas)
        self.later_alphas = tuple(float(a) for a in self.later_alphas)
        self.lr_milestones = tuple(float(f) for f in self.lr_milestones)
        self.hidden = tuple(int(h) for h in self.hidden)
        for name in ("first_alphas", "later_alphas"):
            alphas = getattr(self, name)
            if len(alphas) != 3 or min(alphas) <= 0:
                raise ValueError(f"{name} needs three positive learning rates")
        if self.center_lr <= 0 or self.lr_decay_factor <= 0:
            raise ValueError("center_lr and lr_decay_factor must be > 0")
        if self.lam < 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ValueError("lam, weight_decay must be >= 0 and momentum in [0, 1)")
        ms = self.lr_milestones
        if any(not 0 < f < 1 for f in ms) or any(a >= b for a, b in zip(ms, ms[1:])):
            raise ValueError("lr_milestones must be strictly increasing in (0, 1)")
        if self.epochs < 0 or self.batch_size < 2 or self.dim < 1:
            raise ValueError("epochs >= 0, batch_size >= 2, dim >= 1 required")
        if self.non_landmark_proportion < 0:
            raise ValueError("non_landmark_proportion must be >= 0")


@dataclass
class StageReport:
    stage: int
    alphas: Tuple[float, float, float]
    n_classes: int
    ce: List[float] = field(default_factory=list)  # per step
    center: List[float] = field(default_factory=list)  # per step, unscaled sum of squares
    total: List[float] = field(default_factory=list)  # per step
    epoch_loss: List[float] = field(default_factory=list)
    epoch_lr_multiplier: List[float] = field(default_factory=list)
    epoch_counts: List[Tuple[int, int]] = field(default_factory=list)  # (landmark, non-landmark)


def sample_batches(
    y: np.ndarray, n: int, batch_size: int, non_landmark_proportion: float, rng: np.random.Generator
) -> Iterator[np.ndarray]:
    """Yield index batches for one epoch.

    Every landmark sample is visited once; ``round(proportion * n_landmark)``
    non-landmark samples are drawn (without replacement while the pool lasts)
    and shuffled in. A trailing batch smaller than 2 is dropped since batch
    norm needs two rows.
    """
    y = np.asarray(y)
    landmark = np.flatnonzero(y <= n)
    background = np.flatnonzero(y > n)
    if landmark.size == 0 and background.size == 0:
        raise ValueError("empty sampling pool")
    n_bg = int(round(non_landmark_proportion * landmark.size))
    if n_bg and background.size == 0:
        raise ValueError("pool has no non-landmark samples to draw")
    picks = []
    while n_bg > 0:
        take = min(n_bg, background.size)
        picks.append(rng.permutation(background)[:take])
        n_bg -= take
    order = np.concatenate([landmark] + picks)
    order = order[rng.permutation(order.size)]
    for start in range(0, order.size, batch_size):
        batch = order[start:start + batch_size]
        if batch.size >= 2:
            yield batch


def _stage_lrs(alphas: Sequence[float], mult: float) -> Dict[str, float]:
    return {"trunk": alphas[0] * mult, "embed": alphas[1] * mult, "cls": alphas[2] * mult}


def train_stage(
    net: NetworkState,
    centers: np.ndarray,
    data: Dataset,
    config: TrainingConfig,
    alphas: Sequence[float],
    rng: np.random.Generator,
    stage: int = 1,
) -> Tuple[NetworkState, np.ndarray, StageReport]:
    """Train on ``data`` whose labels are already local (``1..n``, ``n + 1`` background)."""
    n = data.n
    if net.n_outputs != n + 1:
        raise ValueError(f"classifier has {net.n_outputs} outputs, stage needs {n + 1}")
    report = StageReport(stage, tuple(alphas), n)
    opt = MomentumSGD(config.momentum, config.weight_decay)
    X = np.asarray(data.X, dtype=np.float64)
    for epoch in range(config.epochs):
        mult = lr_multiplier(epoch, config.epochs, config.lr_milestones, config.lr_decay_factor)
        lrs = _stage_lrs(alphas, mult)
        epoch_total, n_lm, n_bg = 0.0, 0, 0
        for batch in sample_batches(data.y, n, config.batch_size, config.non_landmark_proportion, rng):
            yb = data.y[batch]
            res = loss_and_gradients(net, centers, X[batch], yb, config.lam)
            if not np.isfinite(res.total):
                raise TrainingDiverged(f"stage {stage} epoch {epoch}: loss became {res.total}")
            update_running_stats(net, res.cache)
            opt.step(net, res.grads, lrs)
            centers = update_centers(centers, res.embeddings, yb, config.center_lr)
            report.ce.append(res.ce)
            report.center.append(res.center)
            report.total.append(res.total)
            epoch_total += res.total
            lm = int(np.sum(yb <= n))
            n_lm += lm
            n_bg += yb.size - lm
        report.epoch_loss.append(epoch_total)
        report.epoch_lr_multiplier.append(mult)
        report.epoch_counts.append((n_lm, n_bg))
        log.debug("stage %d epoch %d loss %.4f lr x%g", stage, epoch, epoch_total, mult)
    return net, centers, report


@dataclass
class CurriculumResult:
    net: NetworkState
    centers: np.ndarray
    class_ids: np.ndarray  # global landmark id of each classifier column / center row
    reports: List[StageReport]
    snapshots: List[Tuple[NetworkState, np.ndarray]] = field(default_factory=list)  # stage entry states
    exits: List[Tuple[NetworkState, np.ndarray]] = field(default_factory=list)  # stage exit states


def curriculum_train(
    parts: Sequence[Dataset], config: TrainingConfig, keep_snapshots: bool = False
) -> CurriculumResult:
    """Train over cumulative region parts.

    Stage one starts from a random network with ``first_alphas``. Every later
    stage keeps the trunk and the embedding FC weights, re-draws the embedding
    batch norm, the classifier (resized to the cumulative class count + 1)
    and the centers, then trains on all parts seen so far with ``later_alphas``.
    ``keep_snapshots`` records the state entering each stage (after re-init)
    and the state leaving it.
    """
    if not parts:
        raise ValueError("no curriculum parts given")
    n_global = parts[0].n
    rng = make_rng(config.seed)
    bg_X = parts[0].X[parts[0].y > n_global]

    net: Optional[NetworkState] = None
    centers = np.zeros((0, config.dim))
    class_ids = np.zeros(0, dtype=np.int64)
    seen_X: List[np.ndarray] = []
    seen_y: List[np.ndarray] = []
    reports: List[StageReport] = []
    snapshots: List[Tuple[NetworkState, np.ndarray]] = []
    exits: List[Tuple[NetworkState, np.ndarray]] = []

    for k, part in enumerate(parts, start=1):
        lm = part.landmark_mask
        new_ids = np.unique(part.y[lm])
        if new_ids.size == 0:
            warnings.warn(f"curriculum part {k} has no landmark classes; skipped", stacklevel=2)
            continue
        seen_X.append(part.X[lm])
        seen_y.append(part.y[lm])
        class_ids = np.concatenate([class_ids, new_ids])
        n_stage = class_ids.size
        lookup = np.zeros(n_global + 1, dtype=np.int64)
        lookup[class_ids] = np.arange(1, n_stage + 1)
        X = np.concatenate(seen_X + [bg_X])
        y = np.concatenate([lookup[np.concatenate(seen_y)], np.full(len(bg_X), n_stage + 1)])
        stage_data = Dataset(X, y, n_stage)

        if net is None:
            net = init_network(rng, part.d_in, config.hidden, config.dim, n_stage + 1, config.activation)
            alphas = config.first_alphas
        else:
            bn_params, bn_buffers = fresh_batchnorm(config.dim)
            net.params.update(bn_params)
            net.buffers.update(bn_buffers)
            net.params.update(fresh_classifier(rng, config.dim, n_stage + 1))
            alphas = config.later_alphas
        centers = init_centers(rng, n_stage, config.dim)
        if keep_snapshots:
            snapshots.append((net.copy(), centers.copy()))
        stage_no = len(reports) + 1
        log.info("curriculum stage %d: %d classes, %d samples, alphas %s", stage_no, n_stage, len(y), alphas)
        net, centers, report = train_stage(net, centers, stage_data, config, alphas, rng, stage=stage_no)
        reports.append(report)
        if keep_snapshots:
            exits.append((net.copy(), centers.copy()))

    if net is None:
        raise ValueError("no curriculum part contains landmark classes")
    return CurriculumResult(net, centers, class_ids, reports, snapshots, exits)


def embed(net: NetworkState, X: np.ndarray, batch_size: int = 4096) -> np.ndarray:
    """Eval-mode embeddings (running batch-norm statistics)."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        return np.zeros((0, net.dim))
    return np.concatenate([forward(net, X[i:i + batch_size])[0] for i in range(0, X.shape[0], batch_size)])


class LandmarkEmbedder(TransformerMixin, BaseEstimator):
    """Center-loss embedding network trained with the regional curriculum.

    ``fit`` takes labels ``1..n`` for landmarks and ``n + 1`` for non-landmark
    samples; without ``n_landmarks`` the largest label is taken as the
    non-landmark class. ``regions`` maps landmark id to curriculum part (1-4), either as a
    dict or a list of :class:`LandmarkMetadata`; without it everything is
    trained in a single stage.
    """

    def __init__(
        self,
        hidden=(64, 64),
        dim=32,
        activation="relu",
        lam=5e-5,
        momentum=0.9,
        weight_decay=5e-3,
        first_alphas=FIRST_STAGE_ALPHAS,
        later_alphas=LATER_STAGE_ALPHAS,
        center_lr=0.5,
        epochs=30,
        batch_size=32,
        non_landmark_proportion=0.4,
        lr_decay_factor=0.1,
        lr_milestones=(0.4, 0.8),
        seed=0,
    ):
        self.hidden = hidden
        self.dim = dim
        self.activation = activation
        self.lam = lam
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.first_alphas = first_alphas
        self.later_alphas = later_alphas
        self.center_lr = center_lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.non_landmark_proportion = non_landmark_proportion
        self.lr_decay_factor = lr_decay_factor
        self.lr_milestones = lr_milestones
        self.seed = seed

    def training_config(self) -> TrainingConfig:
        return TrainingConfig(**self.get_params())

    @classmethod
    def from_config(cls, config: TrainingConfig) -> "LandmarkEmbedder":
        return cls(**{k: getattr(config, k) for k in cls._get_param_names()})

    def fit(self, X, y, n_landmarks: Optional[int] = None,
            regions: Optional[Mapping[int, int] | Sequence[LandmarkMetadata]] = None):
        X, y = check_X_y(X, y, dtype=np.float64)
        y = y.astype(np.int64)
        n = int(n_landmarks) if n_landmarks is not None else int(y.max()) - 1
        data = Dataset(X, y, n)
        if regions is None:
            parts = [data]
        else:
            if isinstance(regions, Mapping):
                regions = [LandmarkMetadata(int(i), "", "", "", 0.0, 0.0, int(p)) for i, p in regions.items()]
            parts = partition_by_region(data, regions)
        result = curriculum_train(parts, self.training_config())
        self.network_ = result.net
        self.centers_ = result.centers
        self.class_ids_ = result.class_ids
        self.reports_ = result.reports
        self.n_landmarks_ = n
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "network_")
        X = check_array(X, dtype=np.float64)
        return embed(self.network_, X)

    def predict(self, X):
        """Classifier-head labels in the global id space (``n + 1`` = non-landmark)."""
        check_is_fitted(self, "network_")
        X = check_array(X, dtype=np.float64)
        _, logits, _ = forward(self.network_, X)
        col = logits.argmax(axis=1)
        labels = np.append(self.class_ids_, self.n_landmarks_ + 1)
        return labels[col]
