"""Desk-scale experiments: the long-tail trend comparison and the overfit sanity run.

The trend run compares three conditions on the synthetic corpus with a reduced
model, averaged over seeds:

    joint training, alpha = 0           (placement late)
    cRT-WC, alpha = 0.2                 (placement late)
    cRT-WC, alpha = 0.2                 (placement none)

cRT-WC's first phase is unweighted training, i.e. exactly the first half of
the alpha = 0 joint run for the same seed. The late-placement cRT-WC model is
therefore branched from a snapshot of the joint run at its midpoint (weights,
batchnorm statistics and RNG state) instead of being retrained; the
tests check the branch is bitwise identical to an independent run.
"""
from __future__ import annotations

import copy
import logging
import tempfile
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .audio import FeatureStats, multi_res_spectrogram
from .dataset import NUM_CLASSES, SynthSpec, index_dataset, load_spectrograms, synth_clip, synth_generate
from .metrics import compute_metrics
from .model import ModelConfig, Placement, build_model
from .optim import Adam
from .training import (TrainPlan, class_weights, freeze_feature_extractor, predict, run_epochs, train,
                       train_step)

log = logging.getLogger(__name__)


@dataclass
class Arrays:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    stats: FeatureStats


def standardize(x_train, x_test=None):
    """Fit per-channel stats on the training stack and apply them to both stacks."""
    stats = FeatureStats.fit(x_train)
    xt = None if x_test is None else np.stack([stats.apply(s) for s in x_test])
    return np.stack([stats.apply(s) for s in x_train]), xt, stats


def prepare_synthetic(spec: SynthSpec, workdir=None, threads=1) -> Arrays:
    """Generate the corpus as WAV files, index it and compute standardized spectrograms."""
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(workdir or tmp)
        synth_generate(spec, root)
        index = index_dataset(root, root / "train_singers.txt")
        x_tr, y_tr = load_spectrograms(index.train(), threads)
        if index.test():
            x_te, y_te = load_spectrograms(index.test(), threads)
        else:
            x_te, y_te = x_tr[:0], y_tr[:0]
    x_tr, x_te, stats = standardize(x_tr, x_te)
    return Arrays(x_tr, y_tr, x_te, y_te, stats)


# ----------------------------------------------------------------------------
# trend comparison
# ----------------------------------------------------------------------------

def trend_corpus() -> SynthSpec:
    return SynthSpec(test_counts=(6,) * NUM_CLASSES, test_singers=("t1", "t2"), seed=0)


@dataclass
class TrendConfig:
    divisor: int = 4
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    alpha: float = 0.2
    seeds: tuple[int, ...] = (0, 1, 2)


@dataclass
class TrendResult:
    config: TrendConfig
    scores: dict[str, list[float]] = field(default_factory=dict)  # condition -> macro-F1 per seed
    reports: dict[str, list[dict]] = field(default_factory=dict)
    seconds: float = 0.0

    def mean(self, condition: str) -> float:
        return float(np.mean(self.scores[condition]))

    @property
    def crt_beats_joint(self) -> bool:
        return self.mean("late/crt-wc") >= self.mean("late/joint")

    @property
    def late_beats_none(self) -> bool:
        return self.mean("late/crt-wc") >= self.mean("none/crt-wc")

    def summary(self) -> dict:
        return {"mean_macro_f1": {c: self.mean(c) for c in self.scores},
                "per_seed": self.scores,
                "crt_wc_ge_joint": self.crt_beats_joint,
                "late_ge_none": self.late_beats_none,
                "seconds": self.seconds}


def _score(model, data: Arrays) -> dict:
    return compute_metrics(predict(model, data.x_test, 32), data.y_test, NUM_CLASSES).to_dict()


def joint_with_crt_branch(config: ModelConfig, data: Arrays, epochs: int, batch_size: int, lr: float,
                          alpha: float, seed: int):
    """Train joint(alpha=0) for ``epochs`` and branch cRT-WC(alpha) at the midpoint.

    Returns ``(joint_model, crt_model)``; each equals what :func:`train` would
    produce for the corresponding plan with this seed.
    """
    half = epochs - epochs // 2  # representation phase length used by TrainPlan
    crt_epochs = epochs // 2
    model = build_model(config, seed)
    rng = np.random.default_rng(seed)
    opt = Adam(model.trainable_params(), lr=lr)
    ones = np.ones(config.num_classes)
    x, y = data.x_train, data.y_train
    run_epochs(model, opt, x, y, ones, half, batch_size, rng)
    branch = copy.deepcopy(model)
    branch_rng = copy.deepcopy(rng)
    run_epochs(model, opt, x, y, ones, epochs - half, batch_size, rng, start_epoch=half)

    weights = class_weights(np.bincount(y, minlength=config.num_classes), alpha).weights
    params = freeze_feature_extractor(branch)
    run_epochs(branch, Adam(params, lr=lr), x, y, weights, crt_epochs, batch_size, branch_rng,
               classifier_only=True, phase="crt", start_epoch=half)
    branch.unfreeze()
    return model, branch


def run_trend(data: Arrays, cfg: TrendConfig = TrendConfig(), report=print) -> TrendResult:
    t0 = time.perf_counter()
    res = TrendResult(cfg)
    for name in ("late/joint", "late/crt-wc", "none/crt-wc"):
        res.scores[name] = []
        res.reports[name] = []
    for seed in cfg.seeds:
        late = ModelConfig(placement="late").reduced(cfg.divisor)
        joint, crt = joint_with_crt_branch(late, data, cfg.epochs, cfg.batch_size, cfg.lr, cfg.alpha, seed)
        none = build_model(ModelConfig(placement="none").reduced(cfg.divisor), seed)
        train(none, data.x_train, data.y_train,
              TrainPlan("crt-wc", cfg.alpha, cfg.epochs, None, cfg.batch_size, cfg.lr, seed))
        for name, m in (("late/joint", joint), ("late/crt-wc", crt), ("none/crt-wc", none)):
            rep = _score(m, data)
            res.scores[name].append(rep["macro_f1"])
            res.reports[name].append(rep)
        report(f"seed {seed}: " + ", ".join(f"{k} {v[-1]:.3f}" for k, v in res.scores.items())
               + f" ({time.perf_counter() - t0:.0f} s)")
    res.seconds = time.perf_counter() - t0
    return res


# ----------------------------------------------------------------------------
# overfit sanity
# ----------------------------------------------------------------------------

def overfit_clips(n=32, seed=0):
    """``n`` synthetic clips (classes cycled) as standardized spectrograms, with random labels."""
    rng = np.random.default_rng(seed)
    specs = np.stack([multi_res_spectrogram(synth_clip(k % NUM_CLASSES, 1000 * seed + k)) for k in range(n)])
    x, _, _ = standardize(specs)
    return x, rng.integers(0, NUM_CLASSES, n)


@dataclass
class OverfitResult:
    placement: str
    steps: int
    accuracy: float
    history: list[tuple[int, float]]

    @property
    def passed(self) -> bool:
        return self.accuracy >= 0.95


def overfit(placement, x, y, divisor=4, lr=3e-3, batch_size=8, max_steps=500, dropout=0.0,
            check_every=8, seed=0, config: ModelConfig | None = None) -> OverfitResult:
    """Fit random labels; stops at the first check with >= 95% eval-mode accuracy on the clips.

    ``config`` overrides the reduced full-size architecture (placement still applies).
    """
    if config is None:
        config = ModelConfig(dropout=dropout).reduced(divisor)
    config = replace(config, placement=Placement(placement), dropout=dropout)
    m = build_model(config, seed)
    opt = Adam(m.trainable_params(), lr=lr)
    rng = np.random.default_rng(seed)
    ones = np.ones(len(y))
    history = []
    step = 0
    acc = 0.0
    while step < max_steps:
        for b in np.array_split(rng.permutation(len(y)), max(1, len(y) // batch_size)):
            b = np.sort(b)
            train_step(m, opt, x[b], y[b], ones[b], rng)
            step += 1
            if step % check_every == 0 or step == max_steps:
                acc = float((predict(m, x, 32).argmax(axis=1) == y).mean())
                history.append((step, acc))
                log.info("overfit %s step %d acc %.3f", placement, step, acc)
                if acc >= 0.95 or step == max_steps:
                    return OverfitResult(str(placement), step, acc, history)
    return OverfitResult(str(placement), step, acc, history)
