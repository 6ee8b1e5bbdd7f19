"""Acceptance gates 1-9; each records one PASS/FAIL line shown in the terminal summary.

Run alone with ``pytest tests/test_acceptance.py -v``. Gates 7 and 8 train
models and take most of the time (roughly half an hour together on one core).
"""
import hashlib
import time

import numpy as np
import pytest

from conftest import record
from singdc.audio import CLIP_SAMPLES, multi_res_spectrogram
from singdc.dataset import CLASSES, synth_clip
from singdc.experiments import (TrendConfig, overfit, overfit_clips, prepare_synthetic, run_trend,
                                trend_corpus)
from singdc.gradcheck import CASES, run_suite, summarize
from singdc.metrics import compute_metrics
from singdc.model import ModelConfig, Placement, build_model, count_params
from singdc.optim import Adam
from singdc.tensor import softmax_cross_entropy
from singdc.training import TrainPlan, class_weights, train, train_step
from test_metrics import brute_metrics, onehot_logits
from test_model import copy_main_weights

PUBLISHED_DELTAS = {"early": 24_700, "late": 101_200, "last": 98_200, "all": 125_800}


def test_1_parameter_counts():
    t0 = time.perf_counter()
    none = count_params(build_model(ModelConfig(placement="none"))).total
    deltas = {p: count_params(build_model(ModelConfig(placement=p))).total - none for p in PUBLISHED_DELTAS}
    seconds = time.perf_counter() - t0
    rel = {p: abs(deltas[p] - ref) / ref for p, ref in PUBLISHED_DELTAS.items()}
    none_rel = abs(none - 337_500) / 337_500
    ok = max(rel.values()) < 0.01 and none_rel < 0.02 and seconds < 1.0
    record(1, ok, f"none {none:,} ({none_rel:.2%} off); deltas {deltas}; worst delta error "
                  f"{max(rel.values()):.2%}; {seconds:.2f} s")
    assert ok


def test_2_gradient_oracles_64bit():
    table = summarize(run_suite(bits=64, seeds=range(20)))
    worst = max(row["max_rel_error"] for row in table.values())
    ok = set(table) == set(CASES) and all(r["passed"] and r["seeds"] >= 20 for r in table.values())
    failing = [op for op, r in table.items() if not r["passed"]]
    record(2, ok, f"{len(table)} ops x 20 seeds, worst relative error {worst:.1e}, failing {failing}")
    assert ok


def test_3_zero_offset_equivalence():
    x = np.random.default_rng(0).standard_normal((10, 3, 1025, 259)).astype(np.float32)
    plain = build_model(ModelConfig(placement="none"), seed=99)
    diffs = {}
    for p in Placement:
        deform = build_model(ModelConfig(placement=p), seed=1)
        copy_main_weights(deform, plain)
        diffs[p.value] = max(float(np.abs(deform.forward(x[i:i + 2]) - plain.forward(x[i:i + 2])).max())
                             for i in range(0, 10, 2))
    ok = max(diffs.values()) < 1e-4
    record(3, ok, "max abs logit diff " + ", ".join(f"{k} {v:.1e}" for k, v in diffs.items()))
    assert ok


def _step(x, y, w):
    """One training step of a fixed model; returns (loss, gradients, updated parameters)."""
    m = build_model(ModelConfig(placement="late").reduced(8), 5)
    opt = Adam(m.trainable_params(), lr=1e-3)
    loss, _ = train_step(m, opt, x, y, w[y], np.random.default_rng(0))
    params = m.named_params()
    return (loss, {k: p.grad.copy() for k, p in params.items()},
            {k: p.value.copy() for k, p in params.items()})


def test_4_loss_and_weighting_identities():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((64, 10))
    y = rng.integers(0, 10, 64)
    counts = rng.integers(1, 500, 10)
    w0 = class_weights(counts, 0.0).weights
    weighted, dw = softmax_cross_entropy(logits, y, w0[y])
    plain, dp = softmax_cross_entropy(logits, y)
    ce_gap = max(abs(weighted - plain), float(np.abs(dw - dp).max()))

    x = rng.standard_normal((4, 3, 1025, 259)).astype(np.float32)
    yb = np.array([0, 3, 3, 7])
    w = class_weights(counts, 0.6).weights
    base_loss, base_grad, base_params = _step(x, yb, w)
    # power-of-two scales leave every rounding step unchanged, so the whole step is bitwise identical
    bitwise = all(all(np.array_equal(p[k], base_params[k]) for k in p)
                  for p in (_step(x, yb, w * s)[2] for s in (0.25, 4.0, 1024.0)))
    # other scales agree to rounding in loss and gradients
    grad_gap = 0.0
    for s in (3.7, 0.013):
        loss, grad, _ = _step(x, yb, w * s)
        grad_gap = max(grad_gap, abs(loss - base_loss) / abs(base_loss),
                       max(float(np.abs(grad[k] - base_grad[k]).max() / (np.abs(base_grad[k]).max() + 1e-30))
                           for k in grad if np.abs(base_grad[k]).max() > 1e-6))

    w_32 = class_weights([32], 0.2).weights[0]
    ns = np.arange(1, 5001)
    inverse_exact = bool(np.all(class_weights(ns, 1.0).weights == 1.0 / ns))
    ok = ce_gap < 1e-6 and bitwise and grad_gap < 1e-5 and w_32 == 0.5 and inverse_exact
    record(4, ok, f"alpha=0 gap {ce_gap:.1e}; scaled weights: bitwise step for 2^k scales {bitwise}, "
                  f"loss/gradient gap for other scales {grad_gap:.1e}; w(32,0.2)={float(w_32)!r}; "
                  f"w(n,1)==1/n for n<=5000: {inverse_exact}")
    assert ok


def _digest(arrays):
    h = hashlib.sha256()
    for k in sorted(arrays):
        h.update(k.encode())
        h.update(np.ascontiguousarray(arrays[k]).tobytes())
    return h.hexdigest()


def test_5_crt_freeze_contract():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((12, 3, 1025, 259)).astype(np.float32)
    y = np.arange(12) % 10
    m = build_model(ModelConfig(placement="late", dropout=0.3).reduced(8), seed=0)
    digests, trainable = {}, []

    def extractor_state(model):
        return {**{k: p.value for k, p in model.extractor_params().items()}, **model.buffers()}

    def on_phase_end(name, model):
        digests[name] = _digest(extractor_state(model))

    def on_epoch(rec):
        if rec["phase"] == "crt":
            trainable.append(sum(p.size for p in m.trainable_params()))
            digests.setdefault("during", set()).add(_digest(extractor_state(m)))

    train(m, x, y, TrainPlan("crt-wc", 0.2, 4, None, 4, 1e-3, 0), on_epoch=on_epoch, on_phase_end=on_phase_end)
    unchanged = digests["during"] == {digests["representation"]} and digests["crt"] == digests["representation"]
    ok = unchanged and trainable == [310, 310]
    record(5, ok, f"extractor and running stats bitwise unchanged: {unchanged}; trainable per cRT epoch "
                  f"{trainable}")
    assert ok


def test_6_metric_oracle():
    mismatches = 0
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        n, k = int(rng.integers(1, 60)), int(rng.integers(2, 11))
        logits = rng.integers(-2, 3, (n, k)).astype(float)
        labels = rng.integers(0, k, n)
        r = compute_metrics(logits, labels, k)
        ref = brute_metrics(logits, labels, k)
        mismatches += any(getattr(r, key) != val for key, val in ref.items())
    hand = compute_metrics(onehot_logits([0, 0, 1, 1], 2), [0, 0, 0, 1])
    hand_ok = (abs(hand.accuracy - 0.75) < 1e-6 and abs(hand.balanced_accuracy - 0.8333) < 1e-4
               and abs(hand.balanced_accuracy - 5 / 6) < 1e-6 and abs(hand.macro_f1 - 11 / 15) < 1e-6)
    ok = mismatches == 0 and hand_ok
    record(6, ok, f"{mismatches}/1000 draws differ from brute force; hand case acc {hand.accuracy:.4f} "
                  f"B-Acc {hand.balanced_accuracy:.4f} macro-F1 {hand.macro_f1:.4f}")
    assert ok


def test_7_desk_scale_trend():
    data = prepare_synthetic(trend_corpus())
    res = run_trend(data, TrendConfig())
    means = {c: round(res.mean(c), 3) for c in res.scores}
    ok = res.crt_beats_joint and res.late_beats_none
    record(7, ok, f"mean macro-F1 over seeds {list(res.config.seeds)}: {means}; "
                  f"(a) {res.crt_beats_joint} (b) {res.late_beats_none}; {res.seconds / 60:.1f} min")
    assert ok


def test_8_overfit_random_labels():
    x, y = overfit_clips(32, seed=0)
    results = [overfit(p, x, y) for p in ("none", "late")]
    ok = all(r.passed and r.steps <= 500 for r in results)
    record(8, ok, "; ".join(f"{r.placement} {r.accuracy:.2f} after {r.steps} steps" for r in results))
    assert ok


def test_9_frontend_shape_and_peaks():
    rng = np.random.default_rng(0)
    clips = [np.zeros(CLIP_SAMPLES), rng.uniform(-1, 1, CLIP_SAMPLES)]
    clips += [synth_clip(label, 7) for label in range(len(CLASSES))]
    shapes_ok = all(multi_res_spectrogram(c).shape == (3, 1025, 259) for c in clips)
    t = np.arange(CLIP_SAMPLES)
    peaks_ok = True
    for k in (5, 10, 64, 93, 257, 500, 1000):
        spec = multi_res_spectrogram(0.5 * np.sin(2 * np.pi * k * t / 2048))
        peaks_ok &= bool(np.all(spec[:, :, 1:-1].argmax(axis=1) == k))
    ok = shapes_ok and peaks_ok
    record(9, ok, f"{len(clips)} clips shaped 3x1025x259: {shapes_ok}; sine bins 5..1000 peak on their bin "
                  f"in all channels (interior frames): {peaks_ok}")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
