"""Centralized training, evaluation, and random hyperparameter search."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from .data import Window, batch_arrays, carve_validation, make_windows, split_train_test
from .errors import ConfigError, DegenerateReportError
from .metrics import ClientReport, ConfusionCounts
from .model import (ModelConfig, WeightSet, forward, init_model,
                    masked_weighted_loss, predict)
from .tensor import Adam, backward
from .util import derive_seed

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "compute_pos_weight",
    "train",
    "evaluate",
    "SearchSpace",
    "Trial",
    "random_search",
]

POS_WEIGHT_CLAMP = (0.1, 100.0)
EVAL_BATCH = 64


@dataclass
class TrainConfig:
    epochs: int
    learning_rate: float
    batch_size: int = 64
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0.0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")


def compute_pos_weight(windows: list[Window],
                       clamp: tuple[float, float] = POS_WEIGHT_CLAMP) -> np.ndarray:
    """Per-label negatives/positives ratio over unmasked training instances.

    Labels with no positives (ratio would blow up) or no negatives clamp to
    the given range, default [0.1, 100].
    """
    if not windows:
        raise ConfigError("pos_weight needs at least one window")
    lo, hi = clamp
    n_labels = windows[0].targets.shape[-1]
    pos = np.zeros(n_labels, dtype=np.float64)
    neg = np.zeros(n_labels, dtype=np.float64)
    for w in windows:
        m = w.label_mask > 0
        t = w.targets > 0
        pos += (m & t).sum(axis=0)
        neg += (m & ~t).sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(pos > 0, neg / np.maximum(pos, 1e-300), hi)
    return np.clip(ratio, lo, hi).astype(np.float32)


def _batches(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train(
    weights: WeightSet,
    windows: list[Window],
    config: TrainConfig,
    pos_weight: np.ndarray | None = None,
) -> tuple[WeightSet, list[float]]:
    """Adam-train a copy of the weights; returns (trained copy, loss history).

    Pure in (initial weights, windows, config): the input WeightSet is left
    untouched, shuffling and dropout draw from generators derived from
    config.seed, and history holds one mean batch loss per epoch.
    """
    if not windows:
        raise ConfigError("training needs at least one window")
    w = weights.copy()
    if pos_weight is None:
        pos_weight = compute_pos_weight(windows)
    x_all, pad_all, tgt_all, mask_all = batch_arrays(windows)
    if x_all.shape[-1] != w.config.n_features:
        raise ConfigError(
            f"windows have {x_all.shape[-1]} features, model expects {w.config.n_features}")

    shuffle_rng = np.random.default_rng(derive_seed(config.seed, "shuffle"))
    drop_rng = np.random.default_rng(derive_seed(config.seed, "dropout"))
    opt = Adam()
    n = len(windows)
    history: list[float] = []
    for _ in range(config.epochs):
        order = shuffle_rng.permutation(n) if config.shuffle else np.arange(n)
        losses = []
        for idx in _batches(n, config.batch_size, order):
            y = forward(w, x_all[idx], pad_all[idx], train_mode=True, rng=drop_rng)
            loss = masked_weighted_loss(y, tgt_all[idx], mask_all[idx], pos_weight)
            w.zero_grads()
            backward(loss)
            opt.step(w.tensors, config.learning_rate)
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
    return w, history


def evaluate(
    weights: WeightSet,
    test_windows: list[Window],
    subject_id: str | None = None,
    label_names: list[str] | None = None,
) -> ClientReport:
    """Deterministic eval-mode pass; per-label confusion over unmasked cells."""
    if not test_windows:
        raise DegenerateReportError("evaluation needs at least one window")
    if subject_id is None:
        ids = {w.subject_id for w in test_windows}
        subject_id = ids.pop() if len(ids) == 1 else "pooled"
    x_all, pad_all, tgt_all, mask_all = batch_arrays(test_windows)
    n_labels = tgt_all.shape[-1]
    tp = np.zeros(n_labels, dtype=np.int64)
    tn = np.zeros(n_labels, dtype=np.int64)
    fp = np.zeros(n_labels, dtype=np.int64)
    fn = np.zeros(n_labels, dtype=np.int64)
    for start in range(0, len(test_windows), EVAL_BATCH):
        sl = slice(start, start + EVAL_BATCH)
        y = forward(weights, x_all[sl], pad_all[sl], train_mode=False)
        p = predict(y).astype(bool)
        t = tgt_all[sl] > 0
        m = mask_all[sl] > 0
        tp += (p & t & m).sum(axis=(0, 1))
        tn += (~p & ~t & m).sum(axis=(0, 1))
        fp += (p & ~t & m).sum(axis=(0, 1))
        fn += (~p & t & m).sum(axis=(0, 1))
    counts = [ConfusionCounts(int(tp[l]), int(tn[l]), int(fp[l]), int(fn[l]))
              for l in range(n_labels)]
    return ClientReport.from_counts(subject_id, counts, label_names)


@dataclass
class SearchSpace:
    """The hyperparameter grid plus a log-uniform learning-rate range."""

    layers_choices: tuple = (1, 2, 3, 4, 6, 12)
    hidden_choices: tuple = (48, 96, 192, 384, 768)
    n_positions_choices: tuple = (32, 64, 128, 256)
    lr_low: float = 1e-5
    lr_high: float = 1e-1

    def sample(self, rng: np.random.Generator) -> dict:
        return {
            "transformers_layers": int(rng.choice(self.layers_choices)),
            "hidden_size": int(rng.choice(self.hidden_choices)),
            "n_positions": int(rng.choice(self.n_positions_choices)),
            "learning_rate": float(10.0 ** rng.uniform(np.log10(self.lr_low),
                                                       np.log10(self.lr_high))),
        }


@dataclass
class Trial:
    index: int
    params: dict
    val_mean_ba: float | None
    history: list[float]
    wall_ms: float

    def to_json_dict(self) -> dict:
        return {"trial": self.index, "params": self.params,
                "val_mean_ba": self.val_mean_ba, "epochs": len(self.history),
                "final_loss": self.history[-1] if self.history else None,
                "wall_ms": self.wall_ms}


def random_search(
    space: SearchSpace,
    budget: int,
    records,
    seed: int,
    epochs: int = 50,
    batch_size: int = 64,
    split_ratio: float = 0.8,
    val_frac: float = 0.1,
    on_trial=None,
) -> tuple[Trial | None, list[Trial]]:
    """Sample ``budget`` configs, train each, score on carved-out validation.

    ``records`` are standardized SubjectRecords. Every trial rebuilds its
    windows (n_positions is part of the sample), trains from a fresh init
    with its own derived seed, and is scored by pooled validation mean BA.
    Ties on the best score go to the earliest trial; trials whose validation
    has no defined label score None and never win.
    """
    if budget < 1:
        raise ConfigError(f"search budget must be >= 1, got {budget}")
    if not records:
        raise ConfigError("random search needs at least one record")
    n_features = records[0].features.shape[1]
    n_labels = records[0].labels.shape[1]
    label_names = records[0].label_names

    sample_rng = np.random.default_rng(derive_seed(seed, "search"))
    samples = [space.sample(sample_rng) for _ in range(budget)]

    trials: list[Trial] = []
    best: Trial | None = None
    for i, params in enumerate(samples):
        t0 = time.monotonic()
        mc = ModelConfig(
            n_features=n_features,
            n_labels=n_labels,
            transformers_layers=params["transformers_layers"],
            hidden_size=params["hidden_size"],
            n_positions=params["n_positions"],
            dropout=0.1,
            seed=derive_seed(seed, "init", i),
        )
        windows = []
        for rec in records:
            windows.extend(make_windows(rec, mc.n_positions))
        train_w, _ = split_train_test(windows, split_ratio, seed=derive_seed(seed, "split"))
        fit_w, val_w = carve_validation(train_w, val_frac)
        if not fit_w or not val_w:
            # n_positions too large for this corpus; the trial fails, not
            # the search.
            log.warning("trial %d: no validation windows at n_positions=%d",
                        i, mc.n_positions)
            trial = Trial(i, params, None, [], (time.monotonic() - t0) * 1e3)
            trials.append(trial)
            if on_trial is not None:
                on_trial(trial)
            continue
        tc = TrainConfig(epochs=epochs, learning_rate=params["learning_rate"],
                         batch_size=batch_size, seed=derive_seed(seed, "trial", i))
        trained, history = train(init_model(mc), fit_w, tc)
        try:
            report = evaluate(trained, val_w, subject_id="validation",
                              label_names=label_names)
            score = report.mean_ba
        except DegenerateReportError:
            score = None
        trial = Trial(i, params, score, history, (time.monotonic() - t0) * 1e3)
        trials.append(trial)
        if score is not None and (best is None or score > (best.val_mean_ba or -1.0)):
            best = trial
        if on_trial is not None:
            on_trial(trial)
    return best, trials
