"""Stage one: behavior cloning of the action head, then the state-quality classifier."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import Action
from .nn import cross_entropy, make_optimizer, mse_loss
from .policy import ACTION_HEAD, FRONT, QUALITY_HEAD, Batch, Normalizer, PolicyParams
from .sim import Observation, Wrench

log = logging.getLogger(__name__)


class EmptyDataset(ValueError):
    pass


class SingleClassDataset(ValueError):
    pass


class DivergenceDetected(RuntimeError):
    pass


@dataclass
class Dataset:
    episode_ids: np.ndarray  # uint32
    steps: np.ndarray  # uint32
    images: np.ndarray  # float32 (N, H, W)
    positions: np.ndarray
    orientations: np.ndarray
    wrenches: np.ndarray
    actions: np.ndarray
    labels: np.ndarray  # uint8

    def __post_init__(self):
        self.episode_ids = np.asarray(self.episode_ids, dtype=np.uint32)
        self.steps = np.asarray(self.steps, dtype=np.uint32)
        self.images = np.asarray(self.images, dtype=np.float32)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.orientations = np.asarray(self.orientations, dtype=np.float64).reshape(-1, 4)
        self.wrenches = np.asarray(self.wrenches, dtype=np.float64).reshape(-1, 6)
        self.actions = np.asarray(self.actions, dtype=np.float64).reshape(-1, 7)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        n = len(self.labels)
        for name in ("episode_ids", "steps", "images", "positions", "orientations", "wrenches", "actions"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} rows, expected {n}")
        if np.any(self.labels > 1):
            raise ValueError("labels must be 0 or 1")

    @property
    def N(self) -> int:
        return len(self.labels)

    def __len__(self):
        return self.N

    @property
    def image_hw(self) -> int:
        return self.images.shape[1] if self.images.ndim == 3 else 0

    @property
    def n_episodes(self) -> int:
        return len(np.unique(self.episode_ids))

    @classmethod
    def empty(cls, image_hw: int) -> "Dataset":
        return cls(np.zeros(0), np.zeros(0), np.zeros((0, image_hw, image_hw)), np.zeros((0, 3)),
                   np.zeros((0, 4)), np.zeros((0, 6)), np.zeros((0, 7)), np.zeros(0))

    @classmethod
    def from_traces(cls, traces, image_hw: int, first_episode: int = 0) -> "Dataset":
        rows = [(e, k, s) for e, tr in enumerate(traces, first_episode) for k, s in enumerate(tr.steps)]
        if not rows:
            return cls.empty(image_hw)
        return cls(
            [r[0] for r in rows],
            [r[1] for r in rows],
            np.stack([r[2].obs.image for r in rows]),
            np.stack([r[2].obs.position for r in rows]),
            np.stack([r[2].obs.orientation for r in rows]),
            np.stack([r[2].obs.wrench.as_vector() for r in rows]),
            np.stack([r[2].action.as_vector() for r in rows]),
            [r[2].label for r in rows],
        )

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.episode_ids[idx], self.steps[idx], self.images[idx], self.positions[idx],
                       self.orientations[idx], self.wrenches[idx], self.actions[idx], self.labels[idx])

    def batch(self) -> Batch:
        return Batch(self.images.astype(np.float64), self.orientations, self.wrenches)

    def observation(self, i: int) -> Observation:
        w = self.wrenches[i]
        return Observation(self.images[i].astype(np.float64), self.positions[i].copy(),
                           self.orientations[i].copy(), Wrench(w[:3].copy(), w[3:].copy()))

    def action(self, i: int) -> Action:
        return Action.from_vector(self.actions[i])

    def label_counts(self) -> tuple[int, int]:
        pos = int(self.labels.sum())
        return self.N - pos, pos


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 32
    split_ratio: float = 0.8
    seed: int = 0
    optimizer: str = "sgd"
    class_weighted: bool = False

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if not 0 < self.split_ratio < 1:
            raise ValueError("split_ratio must lie in (0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs >= 0 and batch_size >= 1 required")


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)  # dicts keyed by epoch, train_loss, val_loss[, accuracies]
    checksum: str = ""
    info: dict = field(default_factory=dict)

    def column(self, key) -> list:
        return [r[key] for r in self.rows]

    @property
    def final(self) -> dict:
        return self.rows[-1]


def param_checksum(params: PolicyParams) -> str:
    h = hashlib.sha256()
    for t in params.tensors():
        h.update(np.ascontiguousarray(t, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(params.norm.vector(), dtype="<f8").tobytes())
    return h.hexdigest()


def split_dataset(d: Dataset, ratio: float = 0.8, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Episode-aware shuffled split with exactly floor(ratio * N) training records.

    Whole episodes are assigned in shuffled order; only the episode straddling
    the boundary is divided.
    """
    if d.N < 2:
        raise EmptyDataset(f"need at least 2 records to split, got {d.N}")
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie in (0, 1)")
    n_train = int(np.floor(ratio * d.N))
    episodes = np.unique(d.episode_ids)
    order = np.random.default_rng(seed).permutation(episodes)
    by_episode = {e: np.flatnonzero(d.episode_ids == e) for e in episodes}
    idx = np.concatenate([by_episode[e] for e in order])
    return d.subset(np.sort(idx[:n_train])), d.subset(np.sort(idx[n_train:]))


def _minibatches(n, batch_size, rng):
    perm = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield perm[s:s + batch_size]


def _action_targets(params: PolicyParams, d: Dataset) -> np.ndarray:
    return (d.actions - params.norm.action_mean) / params.norm.action_std


def action_loss(params: PolicyParams, d: Dataset, batch: Batch | None = None) -> float:
    """Standardized-action MSE over a dataset, evaluated without touching parameters."""
    batch = batch if batch is not None else d.batch()
    out, _ = params.action_forward(batch)
    return mse_loss(out, _action_targets(params, d))[0]


def fit_normalizer(params: PolicyParams, d: Dataset):
    params.norm = Normalizer.fit(d.images.astype(np.float64), d.orientations, d.wrenches, d.actions)


def train_bc(params: PolicyParams, train: Dataset, val: Dataset, cfg: TrainConfig,
             fit_norm: bool = True) -> tuple[PolicyParams, TrainReport]:
    """Regress demonstrated actions; updates the front and action head in place."""
    if train.N == 0 or val.N == 0:
        raise EmptyDataset("train and validation sets must be non-empty")
    if fit_norm:
        fit_normalizer(params, train)
    names = FRONT + (ACTION_HEAD,)
    params.set_trainable(names)
    groups = params.group_list(names)
    opt = make_optimizer(cfg.optimizer, cfg.lr)
    tb, vb = train.batch(), val.batch()
    targets = _action_targets(params, train)
    report = TrainReport(info={"stage": "bc", "n_train": train.N, "n_val": val.N})
    report.rows.append({"epoch": 0, "train_loss": action_loss(params, train, tb),
                        "val_loss": action_loss(params, val, vb)})
    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        for idx in _minibatches(train.N, cfg.batch_size, rng):
            out, cache = params.action_forward(tb.take(idx))
            loss, dout = mse_loss(out, targets[idx])
            if not np.isfinite(loss):
                raise DivergenceDetected(f"non-finite training loss at epoch {epoch}")
            grads = params.action_backward(dout, cache)
            opt.step(groups, params.grads_for(grads, names))
        row = {"epoch": epoch, "train_loss": action_loss(params, train, tb),
               "val_loss": action_loss(params, val, vb)}
        if not np.isfinite(row["train_loss"]):
            raise DivergenceDetected(f"non-finite training loss at epoch {epoch}")
        report.rows.append(row)
        log.info("bc epoch %d train %.5f val %.5f", epoch, row["train_loss"], row["val_loss"])
    params.set_trainable(())
    report.checksum = param_checksum(params)
    return params, report


def _accuracy(logits, labels) -> float:
    return float(np.mean((logits[:, 1] > logits[:, 0]) == (labels == 1)))


def train_quality(params: PolicyParams, labeled: Dataset, cfg: TrainConfig) -> tuple[PolicyParams, TrainReport]:
    """Fit the quality head on frozen front features with cross-entropy."""
    neg, pos = labeled.label_counts()
    if neg == 0 or pos == 0:
        raise SingleClassDataset(f"need both classes, got {neg} negatives and {pos} positives")
    train, val = split_dataset(labeled, cfg.split_ratio, cfg.seed)
    params.set_trainable((QUALITY_HEAD,))
    head = params.groups[QUALITY_HEAD]
    # the front is frozen, so features are fixed for the whole run
    ftrain, _ = params.encode_batch(train.batch())
    fval, _ = params.encode_batch(val.batch())
    ytrain, yval = train.labels.astype(np.int64), val.labels.astype(np.int64)
    weights = None
    if cfg.class_weighted:
        counts = np.bincount(ytrain, minlength=2).astype(np.float64)
        weights = np.where(counts > 0, counts.sum() / (2 * np.maximum(counts, 1)), 0.0)
    opt = make_optimizer(cfg.optimizer, cfg.lr)

    def evaluate(epoch):
        lt, _ = head.module.forward(ftrain)
        lv, _ = head.module.forward(fval)
        return {"epoch": epoch, "train_loss": cross_entropy(lt, ytrain, weights)[0],
                "val_loss": cross_entropy(lv, yval)[0],
                "train_accuracy": _accuracy(lt, ytrain), "val_accuracy": _accuracy(lv, yval)}

    report = TrainReport(info={"stage": "quality", "class_weighted": cfg.class_weighted,
                               "negatives": neg, "positives": pos,
                               "n_train": train.N, "n_val": val.N})
    report.rows.append(evaluate(0))
    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        for idx in _minibatches(train.N, cfg.batch_size, rng):
            logits, cache = head.module.forward(ftrain[idx])
            loss, dlogits = cross_entropy(logits, ytrain[idx], weights)
            if not np.isfinite(loss):
                raise DivergenceDetected(f"non-finite quality loss at epoch {epoch}")
            _, grads = head.module.backward(dlogits, cache)
            opt.step([head], [grads])
        report.rows.append(evaluate(epoch))
        log.info("quality epoch %d val acc %.4f", epoch, report.rows[-1]["val_accuracy"])
    params.set_trainable(())
    params.quality_trained = True
    report.checksum = param_checksum(params)
    return params, report
