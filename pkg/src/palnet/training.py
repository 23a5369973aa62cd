"""Loss, optimiser, LR schedule, early stopping, training loop and fold splits."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from sklearn.model_selection import KFold

from .network import ModelParams, backward, forward, init_params

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 0.6
    beta: float = 0.4
    learning_rate: float = 1e-3
    batch_size: int = 16
    scheduler_factor: float = 0.5
    scheduler_patience: int = 8
    early_stop_patience: int = 30
    max_epochs: int = 250
    seed: int = 0
    folds: int = 5

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValueError("loss weights must be >= 0 with a positive sum")
        if self.scheduler_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if not 0 < self.scheduler_factor < 1:
            raise ValueError("scheduler_factor must be in (0, 1)")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown training field(s): {sorted(unknown)}")
        return cls(**d)


def composite_loss(pred, gt, alpha=0.6, beta=0.4):
    """Weighted localisation + pairwise-distance loss and its gradient w.r.t. ``pred``.

    Per subject: ``alpha * mean_k |p_k - g_k| + beta * mean_{i,j} | |p_i - p_j| - |g_i - g_j| |``
    over all n^2 ordered pairs; the batch value is the mean over subjects. Norms
    that are exactly zero get subgradient 0.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape or pred.ndim not in (2, 3) or pred.shape[-1] != 3:
        raise ValueError(f"pred {pred.shape} and gt {gt.shape} must match as (m, n, 3)")
    squeeze = pred.ndim == 2
    if squeeze:
        pred, gt = pred[None], gt[None]
    m, n, _ = pred.shape
    diff = pred - gt
    err = np.linalg.norm(diff, axis=2)
    loc = err.mean(axis=1)
    safe = np.where(err > 0, err, 1.0)
    g_loc = np.where((err > 0)[..., None], diff / safe[..., None], 0.0) / n

    dp = pred[:, :, None, :] - pred[:, None, :, :]
    dpn = np.linalg.norm(dp, axis=3)
    dgn = np.linalg.norm(gt[:, :, None, :] - gt[:, None, :, :], axis=3)
    gap = dpn - dgn
    dist = np.abs(gap).sum(axis=(1, 2)) / (n * n)
    coef = np.sign(gap) / np.where(dpn > 0, dpn, 1.0)
    coef = np.where(dpn > 0, coef, 0.0)
    # d|p_i - p_j| / dp_i appears in pair (i, j) with + and in pair (j, i) with -
    g_dist = 2.0 * np.einsum("mij,mijc->mic", coef, dp) / (n * n)

    value = float(np.mean(alpha * loc + beta * dist))
    grad = (alpha * g_loc + beta * g_dist) / m
    if squeeze:
        grad = grad[0]
    return value, grad.astype(pred.dtype, copy=False)


def loss_terms(pred, gt):
    """(localisation, distance) terms averaged over subjects, for reporting."""
    a, _ = composite_loss(pred, gt, 1.0, 0.0)
    b, _ = composite_loss(pred, gt, 0.0, 1.0)
    return a, b


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ModelParams, grads: dict, state: AdamState, lr: float,
              beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place on ``params``; returns (params, state)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {name} at step {state.step + 1}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        w = params.tensors[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        w -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(w.dtype)
    return params, state


class PlateauScheduler:
    """Multiply the LR by ``factor`` after ``patience`` epochs without a new best."""

    def __init__(self, lr, factor=0.5, patience=8):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.best = np.inf
        self.wait = 0

    def step(self, val_loss) -> float:
        if val_loss < self.best:
            self.best = val_loss
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.lr *= self.factor
                self.wait = 0
        return self.lr


class EarlyStopping:
    def __init__(self, patience=30):
        self.patience = patience
        self.best = np.inf
        self.wait = 0

    def step(self, val_loss) -> bool:
        """Record one epoch; True means stop now."""
        if val_loss < self.best:
            self.best = val_loss
            self.wait = 0
            return False
        self.wait += 1
        return self.wait >= self.patience


def plateau_scheduler(val_losses, lr0, factor=0.5, patience=8):
    """Learning rate after replaying ``val_losses`` through the plateau rule."""
    sched = PlateauScheduler(lr0, factor, patience)
    for v in val_losses:
        sched.step(v)
    return sched.lr


def early_stop(val_losses, patience=30):
    """1-based epoch at which training stops, or None if it never does."""
    es = EarlyStopping(patience)
    for epoch, v in enumerate(val_losses, 1):
        if es.step(v):
            return epoch
    return None


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    best_epoch: int | None = None

    def record(self, epoch, train_loss, val_loss, lr, seconds):
        self.epochs.append(epoch)
        self.train_loss.append(train_loss)
        self.val_loss.append(val_loss)
        self.lr.append(lr)
        self.seconds.append(seconds)

    def to_dict(self):
        return asdict(self)

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "lr", "seconds"])
            for row in zip(self.epochs, self.train_loss, self.val_loss, self.lr, self.seconds):
                w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])

    def write_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)


def evaluate_loss(params, x, y, cfg: TrainConfig, batch_size=None):
    """Sample-weighted mean composite loss in eval mode."""
    bs = batch_size or max(cfg.batch_size, 16)
    total = 0.0
    for i in range(0, len(x), bs):
        pred = forward(x[i:i + bs], params, train=False).predictions
        value, _ = composite_loss(pred.astype(np.float64), y[i:i + bs], cfg.alpha, cfg.beta)
        total += value * len(pred)
    return total / len(x)


def train(x, y, train_idx, val_idx, arch, cfg: TrainConfig, params: ModelParams | None = None,
          callback=None):
    """Mini-batch Adam training; returns (best-validation-epoch params, history)."""
    x = np.asarray(getattr(x, "data", x))
    y = np.asarray(getattr(y, "coords", y), dtype=np.float64)
    train_idx = np.asarray(train_idx, dtype=np.int64)
    val_idx = np.asarray(val_idx, dtype=np.int64)
    if len(train_idx) == 0 or len(val_idx) == 0:
        raise TrainingError("train and validation splits must be non-empty")
    if params is None:
        params = init_params(arch, x.shape[2], cfg.seed)
    xt, yt = x[train_idx], y[train_idx]
    xv, yv = x[val_idx], y[val_idx]
    state = AdamState()
    sched = PlateauScheduler(cfg.learning_rate, cfg.scheduler_factor, cfg.scheduler_patience)
    stopper = EarlyStopping(cfg.early_stop_patience)
    history = TrainHistory()
    best_params, best_val = params.copy(), np.inf
    lr = cfg.learning_rate
    step = 0
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(xt))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            bidx = order[start:start + cfg.batch_size]
            step += 1
            trace = forward(xt[bidx], params, train=True, seed=[cfg.seed, epoch, step])
            value, grad = composite_loss(trace.predictions.astype(np.float64), yt[bidx],
                                         cfg.alpha, cfg.beta)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch starting {start}")
            grads = backward(trace, params, grad)
            adam_step(params, grads, state, lr)
            total += value * len(bidx)
        train_loss = total / len(xt)
        val_loss = evaluate_loss(params, xv, yv, cfg)
        if not np.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        history.record(epoch, train_loss, val_loss, lr, time.perf_counter() - t0)
        if val_loss < best_val:
            best_val = val_loss
            best_params = params.copy()
            history.best_epoch = epoch
        if callback is not None:
            callback(epoch, train_loss, val_loss, lr)
        lr = sched.step(val_loss)
        if stopper.step(val_loss):
            log.info("early stop at epoch %d (best %d)", epoch, history.best_epoch)
            break
    best_params.metadata = {"best_epoch": history.best_epoch, "best_val_loss": best_val,
                            "epochs_run": len(history.epochs)}
    return best_params, history


def kfold_split(subject_ids, k=5, seed=0):
    """Shuffled k-fold split: list of (train ids, validation ids)."""
    ids = np.asarray(subject_ids)
    if k < 2:
        raise ValueError("need at least 2 folds")
    if k > len(ids):
        raise ValueError(f"cannot split {len(ids)} subjects into {k} folds")
    splitter = KFold(n_splits=k, shuffle=True, random_state=seed)
    return [(ids[tr].tolist(), ids[va].tolist()) for tr, va in splitter.split(ids)]
