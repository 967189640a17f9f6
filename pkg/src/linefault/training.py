"""Mini-batch training with windowed early stopping, and grid-search cross-validation."""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from ._util import digest_arrays, digest_obj, parallel_map, substream
from .features import Dataset, SampleSet
from .nn import (
    ModelParams, NetConfig, OptimizerState, batch_loss, forward, loss_and_gradients, predict, rmsprop_step,
)

log = logging.getLogger(__name__)

VARIANTS = ("no_neighbors", "with_neighbors")


class TrainingDivergence(RuntimeError):
    def __init__(self, message: str, history: TrainHistory):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epsilon_mix: float = 0.3
    max_steps: int = 5000
    early_stop_window: int = 100
    eval_every: int = 50
    seed: int = 0
    variant: str = "with_neighbors"
    rho: float = 0.9
    rms_eps: float = 1e-8
    channels1: int = 8
    channels2: int = 8
    kernel: int = 5
    hidden: int = 128

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.early_stop_window < 1:
            raise ValueError("early_stop_window must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if not 0.0 <= self.epsilon_mix <= 1.0:
            raise ValueError("epsilon_mix must lie in [0, 1]")

    @property
    def effective_epsilon(self) -> float:
        return 0.0 if self.variant == "no_neighbors" else self.epsilon_mix

    def net_config(self, n: int, m: int) -> NetConfig:
        return NetConfig(n, m, self.channels1, self.channels2, self.kernel, self.hidden)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return digest_obj(self.to_dict())


@dataclass
class TrainHistory:
    train_losses: list[float] = field(default_factory=list)
    val_steps: list[int] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    epoch_orders: list[str] = field(default_factory=list)
    stop_step: int = 0
    best_step: int = 0
    best_val_loss: float = math.inf
    stopped_early: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def should_stop(val_losses, window: int = 100) -> bool:
    """Early-stopping decision after the latest validation pass.

    ``best`` is the running minimum of trailing-window means, updated after each
    decision, so the comparison uses the windows ending at earlier passes.
    Training continues while the minimum of the last ``window`` losses is
    strictly below ``best``; it never stops before ``window`` passes.
    """
    v = np.asarray(val_losses, dtype=float)
    if len(v) <= window:
        return False
    c = np.concatenate([[0.0], np.cumsum(v[:-1])])
    best = float(np.min((c[window:] - c[:-window]) / window))
    return not float(np.min(v[-window:])) < best


def evaluate_loss(params: ModelParams, samples: SampleSet, epsilon_mix: float, batch_size: int = 1024) -> float:
    total = 0.0
    for i in range(0, len(samples), batch_size):
        logits, _ = forward(params, samples.X[i:i + batch_size])
        total += batch_loss(logits, samples.Y[i:i + batch_size], samples.Y_hat[i:i + batch_size],
                            epsilon_mix) * len(logits)
    return total / len(samples)


def train(dataset: Dataset, config: TrainConfig,
          on_record: Callable[[dict], None] | None = None) -> tuple[ModelParams, TrainHistory]:
    """Train on ``dataset.train``; return the checkpoint with minimal validation loss."""
    tr, va = dataset.train, dataset.validation
    if len(tr) == 0 or len(va) == 0:
        raise ValueError("training needs non-empty train and validation splits")
    eps = config.effective_epsilon
    params = ModelParams.init(config.net_config(dataset.n, dataset.m), substream(config.seed, "init"))
    state = OptimizerState.for_params(params, config.learning_rate, config.rho, config.rms_eps)
    history = TrainHistory()
    best = params
    emit = on_record or (lambda rec: None)

    step = 0
    epoch = 0
    bs = min(config.batch_size, len(tr))
    while step < config.max_steps:
        order = substream(config.seed, "shuffle", epoch).permutation(len(tr))
        history.epoch_orders.append(digest_arrays(order)[:16])
        for start in range(0, len(order) - bs + 1, bs):
            idx = order[start:start + bs]
            loss, grads = loss_and_gradients(params, tr.X[idx], tr.Y[idx], tr.Y_hat[idx], eps)
            if not math.isfinite(loss):
                history.stop_step = step
                raise TrainingDivergence(f"non-finite training loss at step {step}", history)
            params, state = rmsprop_step(params, grads, state)
            step += 1
            history.train_losses.append(loss)
            emit({"kind": "train", "step": step, "loss": loss})
            if step % config.eval_every == 0 or step == config.max_steps:
                vloss = evaluate_loss(params, va, eps)
                if not math.isfinite(vloss):
                    history.stop_step = step
                    raise TrainingDivergence(f"non-finite validation loss at step {step}", history)
                history.val_steps.append(step)
                history.val_losses.append(vloss)
                emit({"kind": "validation", "step": step, "loss": vloss})
                if vloss < history.best_val_loss:
                    history.best_val_loss = vloss
                    history.best_step = step
                    best = params
                if should_stop(history.val_losses, config.early_stop_window):
                    history.stopped_early = True
                    history.stop_step = step
                    return best, history
            if step >= config.max_steps:
                break
        epoch += 1
    history.stop_step = step
    return best, history


def accuracy_of(params: ModelParams, samples: SampleSet) -> float:
    pred = np.argmax(predict(params, samples.X), axis=1)
    return 100.0 * float(np.mean(pred == samples.labels))


def stratified_folds(labels: np.ndarray, folds: int, rng: np.random.Generator) -> np.ndarray:
    """Fold index per sample; each label's samples are dealt round-robin after a shuffle."""
    assign = np.empty(len(labels), dtype=int)
    offset = 0
    for lab in np.unique(labels):
        idx = np.flatnonzero(labels == lab)
        idx = idx[rng.permutation(len(idx))]
        assign[idx] = (np.arange(len(idx)) + offset) % folds
        offset += len(idx)
    return assign


def _fold_job(args):
    dataset, config = args
    params, _ = train(dataset, config)
    return accuracy_of(params, dataset.validation)


def cross_validate(dataset: Dataset, grid: dict, folds: int = 3, seed: int = 0,
                   base: TrainConfig | None = None, fit_and_score: Callable | None = None,
                   jobs: int = 1) -> TrainConfig:
    """Grid search over ``learning_rate``, ``batch_size`` and ``epsilon_mix`` by k-fold accuracy.

    Folds partition ``dataset.train`` (stratified); the held-out fold serves as
    validation for early stopping and scoring. Ties go to the smaller
    ``epsilon_mix``, then the smaller learning rate, then the smaller batch size.
    """
    if folds < 2:
        raise ValueError("folds must be >= 2")
    base = base or TrainConfig()
    lrs = list(grid.get("learning_rate", [base.learning_rate]))
    bss = list(grid.get("batch_size", [base.batch_size]))
    epss = list(grid.get("epsilon_mix", [base.epsilon_mix]))
    if not (lrs and bss and epss):
        raise ValueError("cross-validation grid is empty")
    candidates = [replace(base, learning_rate=lr, batch_size=bs, epsilon_mix=e)
                  for lr, bs, e in itertools.product(lrs, bss, epss)]
    assign = stratified_folds(dataset.train.labels, folds, substream(seed, "folds"))

    jobs_in = []
    for ci, cand in enumerate(candidates):
        for f in range(folds):
            held = dataset.train.subset(np.flatnonzero(assign == f))
            rest = dataset.train.subset(np.flatnonzero(assign != f))
            fold_ds = Dataset(rest, held, held, dataset.n, dataset.m, provenance=dataset.provenance)
            cfg = replace(cand, seed=int(substream(seed, "fold-seed", f, ci).integers(0, 2**31)))
            jobs_in.append(((ci, f), fold_ds, cfg))
    if fit_and_score is None:
        scores = parallel_map(_fold_job, [(d, c) for _, d, c in jobs_in], jobs)
    else:
        scores = [fit_and_score(d, c) for _, d, c in jobs_in]
    by_key = {key: s for (key, _, _), s in zip(jobs_in, scores)}

    def rank(ci: int):
        c = candidates[ci]
        mean = float(np.mean([by_key[(ci, f)] for f in range(folds)]))
        return (-mean, c.epsilon_mix, c.learning_rate, c.batch_size)

    best = min(range(len(candidates)), key=rank)
    log.info("cross-validation picked %s", candidates[best])
    return candidates[best]
