"""Class weighting and the joint / cRT-WFC / cRT-WC training schedules.

Class ``c`` gets loss weight ``n_c ** -alpha``; every sample carries the weight
of its class and the batch loss is the weighted mean of per-sample cross
entropy. cRT re-trains only the final linear layer on features from the frozen
extractor, with fresh optimizer state.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from .model import Model
from .optim import Adam
from .tensor import softmax_cross_entropy

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Non-finite loss or activations during training."""


class Strategy(str, enum.Enum):
    JOINT = "joint"
    CRT_WFC = "crt-wfc"
    CRT_WC = "crt-wc"


@dataclass
class ClassWeights:
    counts: np.ndarray
    alpha: float
    weights: np.ndarray


def class_weights(counts, alpha: float) -> ClassWeights:
    """w_c = n_c ** -alpha, not renormalized."""
    counts = np.asarray(counts, dtype=np.int64)
    if np.any(counts < 1):
        raise ValueError(f"every class needs at least one training sample, got counts {counts.tolist()}")
    if not 0 <= alpha <= 1:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    weights = 1.0 / np.power(counts.astype(np.float64), float(alpha))
    return ClassWeights(counts, float(alpha), weights)


@dataclass(frozen=True)
class Phase:
    name: str
    epochs: int
    weighted: bool
    classifier_only: bool


@dataclass
class TrainPlan:
    strategy: Strategy = Strategy.CRT_WC
    alpha: float = 0.2
    total_epochs: int = 200
    crt_epochs: int | None = None  # defaults to half the budget for cRT strategies
    batch_size: int = 64
    lr: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        self.strategy = Strategy(self.strategy)
        if self.total_epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be positive")
        if self.strategy is Strategy.JOINT:
            if self.crt_epochs not in (None, 0):
                raise ValueError("joint training has no classifier re-training phase")
        else:
            if self.crt_epochs is None:
                self.crt_epochs = self.total_epochs // 2
            if not 1 <= self.crt_epochs < self.total_epochs:
                raise ValueError(f"cRT phase of {self.crt_epochs} epochs does not fit a "
                                 f"{self.total_epochs}-epoch budget")

    def phases(self) -> list[Phase]:
        if self.strategy is Strategy.JOINT:
            return [Phase("joint", self.total_epochs, True, False)]
        first = self.total_epochs - self.crt_epochs
        return [Phase("representation", first, self.strategy is Strategy.CRT_WFC, False),
                Phase("crt", self.crt_epochs, True, True)]


def freeze_feature_extractor(model: Model):
    """Freeze everything but the final linear layer; returns the trainable parameters."""
    model.zero_grad()
    model.freeze_feature_extractor()
    return model.trainable_params()


def train_step(model: Model, opt: Adam, xb, yb, sample_weights, rng=None):
    """One optimizer step on a batch of inputs. Returns (loss, logits)."""
    logits = model.forward(xb, training=True, rng=rng)
    loss, dlogits = softmax_cross_entropy(logits, yb, sample_weights)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss {loss}")
    opt.zero_grad()
    model.backward(dlogits)
    opt.step()
    return loss, logits


def classifier_step(model: Model, opt: Adam, fb, yb, sample_weights):
    """One optimizer step of the classifier on precomputed features."""
    logits = model.classify(fb)
    loss, dlogits = softmax_cross_entropy(logits, yb, sample_weights)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss {loss}")
    opt.zero_grad()
    model.fc2.backward(dlogits)
    opt.step()
    return loss, logits


def extract_features(model: Model, x, batch_size=64) -> np.ndarray:
    return np.concatenate([model.features(x[i:i + batch_size], training=False)
                           for i in range(0, len(x), batch_size)])


def predict(model: Model, x, batch_size=64) -> np.ndarray:
    """Eval-mode logits for a whole array of inputs."""
    return np.concatenate([model.forward(x[i:i + batch_size], training=False)
                           for i in range(0, len(x), batch_size)])


def epoch_batches(rng: np.random.Generator, n: int, batch_size: int) -> list[np.ndarray]:
    """One seeded permutation of range(n) cut into batches (indices sorted within a batch)."""
    perm = rng.permutation(n)
    return [np.sort(perm[i:i + batch_size]) for i in range(0, n, batch_size)]


@dataclass
class TrainResult:
    log: list[dict] = field(default_factory=list)
    class_weights: ClassWeights | None = None


def run_epochs(model: Model, opt: Adam, x, y, class_w, epochs: int, batch_size: int,
               rng: np.random.Generator, *, classifier_only=False, phase="joint", start_epoch=0,
               eval_fn=None, on_epoch=None) -> list[dict]:
    """Run ``epochs`` passes over (x, y) with per-class loss weights ``class_w``.

    With ``classifier_only`` the model must already be frozen; features are
    extracted once and only the final layer is stepped.
    """
    w = np.asarray(class_w).astype(model.dtype)
    if classifier_only:
        # frozen extractor runs in eval mode, so its features are fixed for the whole phase
        data = extract_features(model, x, batch_size)
        step = lambda b: classifier_step(model, opt, data[b], y[b], w[y[b]])
    else:
        step = lambda b: train_step(model, opt, x[b], y[b], w[y[b]], rng)
    n = len(x)
    records = []
    for epoch in range(start_epoch + 1, start_epoch + epochs + 1):
        loss_sum = 0.0
        correct = 0
        for b in epoch_batches(rng, n, batch_size):
            loss, logits = step(b)
            loss_sum += loss * len(b)
            correct += int((logits.argmax(axis=1) == y[b]).sum())
        record = {"epoch": epoch, "phase": phase, "loss": loss_sum / n, "train_acc": correct / n}
        if eval_fn is not None:
            record.update(eval_fn(model))
        records.append(record)
        log.debug("epoch %d (%s): loss %.4f acc %.3f", epoch, phase, record["loss"], record["train_acc"])
        if on_epoch is not None:
            on_epoch(record)
    return records


def train(model: Model, x, y, plan: TrainPlan, counts=None, *,
          eval_fn=None, on_epoch=None, on_phase_end=None) -> TrainResult:
    """Train ``model`` in place on inputs ``x`` (N, C, F, T) with labels ``y``.

    ``counts`` are the per-class clip counts n_c; they must equal the label
    tally. ``eval_fn(model) -> dict`` adds validation entries to each epoch
    record, ``on_epoch(record)`` receives each record as it is produced and
    ``on_phase_end(phase_name, model)`` runs after every phase.
    """
    y = np.asarray(y, dtype=np.int64)
    if len(x) == 0 or len(x) != len(y):
        raise ValueError("training set is empty or inputs and labels disagree in length")
    k = model.config.num_classes
    tally = np.bincount(y, minlength=k)
    if counts is None:
        counts = tally
    elif not np.array_equal(np.asarray(counts), tally):
        raise ValueError(f"class counts {list(counts)} do not match the label tally {tally.tolist()}")
    cw = class_weights(counts, plan.alpha)
    rng = np.random.default_rng(plan.seed)
    result = TrainResult(class_weights=cw)
    for phase in plan.phases():
        if phase.classifier_only:
            params = freeze_feature_extractor(model)
        else:
            model.unfreeze()
            params = model.trainable_params()
        opt = Adam(params, lr=plan.lr)
        result.log += run_epochs(model, opt, x, y, cw.weights if phase.weighted else np.ones(k),
                                 phase.epochs, plan.batch_size, rng, classifier_only=phase.classifier_only,
                                 phase=phase.name, start_epoch=len(result.log),
                                 eval_fn=eval_fn, on_epoch=on_epoch)
        if on_phase_end is not None:
            on_phase_end(phase.name, model)
    model.unfreeze()
    return result
