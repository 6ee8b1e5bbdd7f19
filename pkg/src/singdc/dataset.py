"""Corpus indexing (VocalSet layout) and a synthetic long-tail singing-technique corpus.

Files are labelled by technique tokens in their names, e.g.
``f1_arpeggios_lip_trill_a.wav``; the first token is the singer id. The split
file lists training singers one per line; every other singer is test data.
"""
from __future__ import annotations

import json
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .audio import (CLIP_SAMPLES, SAMPLE_RATE, load_wav, multi_res_spectrogram, segment_clips,
                    stft_log_magnitude, wav_num_frames, write_wav)

log = logging.getLogger(__name__)

CLASSES = ("belt", "breathy", "inhaled", "lip_trill", "spoken",
           "straight", "trill", "trillo", "vibrato", "vocal_fry")
NUM_CLASSES = len(CLASSES)
_CLASS_TOKENS = sorted(((name.split("_"), k) for k, name in enumerate(CLASSES)),
                       key=lambda t: -len(t[0]))


class DataError(Exception):
    pass


def technique_from_name(stem: str) -> int | None:
    """Class index named by the filename tokens, longest technique name first."""
    tokens = stem.lower().split("_")
    for words, k in _CLASS_TOKENS:
        n = len(words)
        if any(tokens[i:i + n] == words for i in range(len(tokens) - n + 1)):
            return k
    return None


@dataclass(frozen=True)
class Entry:
    path: str
    singer: str
    label: int


@dataclass
class DatasetIndex:
    entries: list[Entry]
    train_singers: frozenset[str]
    classes: tuple[str, ...] = CLASSES

    def train(self) -> list[Entry]:
        return [e for e in self.entries if e.singer in self.train_singers]

    def test(self) -> list[Entry]:
        return [e for e in self.entries if e.singer not in self.train_singers]


def read_split_file(path) -> frozenset[str]:
    lines = Path(path).read_text().splitlines()
    return frozenset(s.strip() for s in lines if s.strip() and not s.startswith("#"))


def index_dataset(root, split_file) -> DatasetIndex:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root}: not a directory")
    train_singers = read_split_file(split_file)
    entries = []
    for path in sorted(root.rglob("*.wav")):
        label = technique_from_name(path.stem)
        if label is None:
            warnings.warn(f"skipping {path}: no known technique in file name", stacklevel=2)
            continue
        entries.append(Entry(str(path), path.stem.split("_")[0], label))
    if not entries:
        raise DataError(f"{root}: no usable WAV files")
    return DatasetIndex(entries, train_singers)


def class_frequencies(entries, after_segmentation=True, num_classes=NUM_CLASSES) -> np.ndarray:
    """Per-class counts n_c: 3 s clips when ``after_segmentation``, else files."""
    counts = np.zeros(num_classes, dtype=np.int64)
    for e in entries:
        counts[e.label] += wav_num_frames(e.path) // CLIP_SAMPLES if after_segmentation else 1
    return counts


def load_spectrograms(entries, threads=1):
    """Decode, segment and transform every entry.

    Returns ``(specs, labels)`` with specs of shape (n_clips, 3, 1025, 259); the
    clip order is entry order, then segment order, independent of ``threads``.
    """
    def work(e):
        samples, rate = load_wav(e.path)
        return [multi_res_spectrogram(c) for c in segment_clips(samples, rate, e.path, e.label)]

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            per_entry = list(pool.map(work, entries))
    else:
        per_entry = [work(e) for e in entries]
    labels = np.array([e.label for e, specs in zip(entries, per_entry) for _ in specs], dtype=np.int64)
    flat = [s for specs in per_entry for s in specs]
    if not flat:
        raise DataError("no 3 s clips in the selected files")
    return np.stack(flat), labels


# ----------------------------------------------------------------------------
# synthetic corpus
# ----------------------------------------------------------------------------

@dataclass
class SynthSpec:
    """Per-class clip counts for training and test singers plus a seed.

    Every file is one 3 s clip. Training clips are spread over
    ``train_singers``, test clips over ``test_singers``.
    """

    counts: tuple[int, ...] = (40, 28, 20, 14, 10, 8, 6, 5, 4, 3)
    test_counts: tuple[int, ...] = (0,) * NUM_CLASSES
    train_singers: tuple[str, ...] = ("s1", "s2", "s3", "s4")
    test_singers: tuple[str, ...] = ("t1",)
    seed: int = 0

    def __post_init__(self):
        self.counts = tuple(int(c) for c in self.counts)
        self.test_counts = tuple(int(c) for c in self.test_counts)
        if len(self.counts) != NUM_CLASSES or len(self.test_counts) != NUM_CLASSES:
            raise ValueError(f"need {NUM_CLASSES} per-class counts")
        if min(self.counts) < 1:
            raise ValueError("every class needs at least one training clip")


def _semitones(st):
    return 2.0 ** (np.asarray(st) / 12.0)


def _harmonic(f0, amp, tilt, rng, fmax=9000.0):
    """Additive harmonic tone following the f0 track (Hz per sample)."""
    phase = 2 * np.pi * np.cumsum(f0) / SAMPLE_RATE + rng.uniform(0, 2 * np.pi)
    n_harm = int(fmax // f0.max())
    out = np.zeros_like(f0)
    for k in range(1, n_harm + 1):
        out += k ** -tilt * np.sin(k * phase)
    return amp * out


def _resonate(x, freqs, bw=120.0):
    """Cascade of two-pole resonators (formant-like bands)."""
    y = np.zeros_like(x)
    for f in freqs:
        r = np.exp(-np.pi * bw / SAMPLE_RATE)
        a = [1, -2 * r * np.cos(2 * np.pi * f / SAMPLE_RATE), r * r]
        y += lfilter([1 - r], a, x)
    return y


def _recipe(label: int, rng: np.random.Generator, base_f0: float) -> np.ndarray:
    n = CLIP_SAMPLES
    t = np.arange(n) / SAMPLE_RATE
    f0 = base_f0 * _semitones(rng.uniform(-3, 3))
    ones = np.ones(n)
    name = CLASSES[label]
    if name == "belt":
        x = _harmonic(f0 * 1.3 * ones, ones, 0.4, rng)
    elif name == "breathy":
        tone = _harmonic(f0 * ones, ones, 2.0, rng)
        noise = _resonate(rng.standard_normal(n), (700, 1800, 3000), bw=800)
        x = 0.4 * tone / np.abs(tone).max() + noise / np.abs(noise).max()
    elif name == "inhaled":
        rate = rng.uniform(1.0, 1.5)
        env = (t * rate) % 1.0  # ramps up, then drops: a reversed decay
        tone = _harmonic(f0 * 1.1 * ones, env, 1.5, rng)
        noise = _resonate(rng.standard_normal(n), (1200, 2600), bw=600) * env
        x = tone / np.abs(tone).max() + 0.8 * noise / np.abs(noise).max()
    elif name == "lip_trill":
        rate = rng.uniform(20, 30)
        mod = np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
        x = _harmonic(f0 * _semitones(0.5 * mod), 0.55 + 0.45 * mod, 1.4, rng)
    elif name == "spoken":
        glide = f0 * 0.7 * _semitones(4 * np.sin(2 * np.pi * rng.uniform(0.3, 0.6) * t))
        syll = np.clip(np.sin(2 * np.pi * rng.uniform(3, 5) * t), 0, None) ** 0.5
        voiced = _harmonic(glide, syll, 1.2, rng)
        noise = rng.standard_normal(n) * (1 - syll) * 0.5
        x = _resonate(voiced + noise, (500, 1500, 2500), bw=200)
    elif name == "straight":
        x = _harmonic(f0 * ones, ones, 1.2, rng)
    elif name == "trill":
        rate = rng.uniform(5, 7)
        sq = np.tanh(6 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))
        x = _harmonic(f0 * _semitones(2 * sq), ones, 1.2, rng)
    elif name == "trillo":
        rate = rng.uniform(8, 12)
        am = 0.5 + 0.5 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
        x = _harmonic(f0 * ones, 0.1 + 0.9 * am, 1.2, rng)
    elif name == "vibrato":
        rate = rng.uniform(5, 7)
        depth = rng.uniform(0.8, 1.2)
        fm = depth * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
        x = _harmonic(f0 * _semitones(fm), ones, 1.2, rng)
    elif name == "vocal_fry":
        rate = rng.uniform(30, 60)
        period = SAMPLE_RATE / rate
        pulses = np.zeros(n)
        pos = rng.uniform(0, period)
        while pos < n:
            pulses[int(pos)] = 1.0
            pos += period * rng.uniform(0.85, 1.15)  # jittered glottal pulses
        x = _resonate(pulses, (600, 1400, 2600), bw=150)
    else:  # pragma: no cover
        raise ValueError(name)
    x = x / (np.abs(x).max() + 1e-12) * rng.uniform(0.5, 0.9)
    x = x + 10 ** (-50 / 20) * rng.standard_normal(n)
    return np.clip(x, -1, 1).astype(np.float32)


def synth_clip(label: int, seed: int, base_f0: float = 260.0) -> np.ndarray:
    """One 3 s clip of the given technique, deterministic in ``seed``."""
    return _recipe(label, np.random.default_rng(seed), base_f0)


def _singer_f0(singer: str, seed: int) -> float:
    rng = np.random.default_rng([seed, sum(map(ord, singer)), len(singer)])
    return float(rng.uniform(180, 360))


def synth_generate(spec: SynthSpec, out_dir) -> dict:
    """Write the corpus under ``out_dir``: one WAV per clip, ``manifest.jsonl``,
    ``train_singers.txt`` and ``synth_spec.json``. Returns a summary dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    seq = np.random.SeedSequence(spec.seed)
    for split, counts, singers in (("train", spec.counts, spec.train_singers),
                                   ("test", spec.test_counts, spec.test_singers)):
        for label, count in enumerate(counts):
            for k in range(count):
                singer = singers[k % len(singers)]
                (child,) = seq.spawn(1)
                samples = _recipe(label, np.random.default_rng(child), _singer_f0(singer, spec.seed))
                rel = Path(singer) / f"{singer}_{CLASSES[label]}_{k:03d}.wav"
                (out / singer).mkdir(exist_ok=True)
                write_wav(out / rel, samples)
                records.append({"path": str(rel), "singer": singer, "class": CLASSES[label],
                                "clips": 1, "split": split})
    with open(out / "manifest.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")
    (out / "train_singers.txt").write_text("\n".join(spec.train_singers) + "\n")
    (out / "synth_spec.json").write_text(json.dumps(asdict(spec), indent=2) + "\n")
    per_class = {c: sum(1 for r in records if r["class"] == c and r["split"] == "train") for c in CLASSES}
    return {"files": len(records), "train_counts": per_class}


# ----------------------------------------------------------------------------
# hand-crafted modulation features (learnability check and recipe oracles)
# ----------------------------------------------------------------------------

FRAME_RATE = SAMPLE_RATE / 512


def peak_track(samples, min_bin=4) -> np.ndarray:
    """Per-frame spectral peak position in fractional bins (parabolic refinement)."""
    spec = stft_log_magnitude(samples, 2048).astype(np.float64)
    mag = np.expm1(spec[min_bin:])
    k = mag.argmax(axis=0)
    k = np.clip(k, 1, mag.shape[0] - 2)
    cols = np.arange(mag.shape[1])
    a, b, c = (np.log(mag[k - 1, cols] + 1e-12), np.log(mag[k, cols] + 1e-12),
               np.log(mag[k + 1, cols] + 1e-12))
    denom = a - 2 * b + c
    delta = np.where(np.abs(denom) > 1e-12, 0.5 * (a - c) / denom, 0.0)
    return k + min_bin + np.clip(delta, -0.5, 0.5)


def dominant_rate(track, lo=1.0, hi=40.0) -> float:
    """Strongest modulation frequency (Hz) of a frame-rate trajectory."""
    x = np.asarray(track, dtype=np.float64)
    x = x - x.mean()
    spec = np.abs(np.fft.rfft(x * np.hanning(len(x)), n=4 * len(x)))
    freqs = np.fft.rfftfreq(4 * len(x), 1 / FRAME_RATE)
    band = (freqs >= lo) & (freqs <= hi)
    return float(freqs[band][spec[band].argmax()])


def modulation_features(samples) -> np.ndarray:
    """FM depth/rate, AM depth/rate, spectral flatness, centroid, pitch and high-band ratio."""
    track = peak_track(samples)[2:-2]
    semis = 12 * np.log2(np.maximum(track, 1.0) / np.median(track))
    spec = np.expm1(stft_log_magnitude(samples, 2048).astype(np.float64))[:, 2:-2]
    power = spec ** 2 + 1e-12
    energy = power.sum(axis=0)
    env = np.sqrt(energy)
    flat = np.exp(np.log(power).mean(axis=0)) / power.mean(axis=0)
    bins = np.arange(power.shape[0])[:, None]
    centroid = (bins * power).sum(axis=0) / energy
    high = power[186:].sum(axis=0) / energy  # above ~4 kHz
    return np.array([
        np.std(semis),
        dominant_rate(semis),
        np.std(env) / np.mean(env),
        dominant_rate(env),
        np.log(np.mean(flat)),
        np.mean(centroid) / power.shape[0],
        np.log(np.median(track)),
        np.mean(high),
        np.std(centroid) / power.shape[0],
    ])


def linear_probe_accuracy(train_x, train_y, test_x, test_y, steps=3000, seed=0) -> float:
    """Softmax regression on standardized features; returns held-out accuracy."""
    from .optim import Adam
    from .tensor import Param, linear, linear_backward, softmax_cross_entropy

    mu, sd = train_x.mean(axis=0), train_x.std(axis=0) + 1e-9
    a, b = (train_x - mu) / sd, (test_x - mu) / sd
    rng = np.random.default_rng(seed)
    w = Param(rng.normal(0, 0.01, (NUM_CLASSES, a.shape[1])))
    bias = Param(np.zeros(NUM_CLASSES))
    opt = Adam([w, bias], lr=0.05)
    for _ in range(steps):
        logits, cache = linear(a, w.value, bias.value)
        _, d = softmax_cross_entropy(logits, train_y)
        opt.zero_grad()
        _, dw, db = linear_backward(d, cache)
        w.grad += dw
        bias.grad += db
        opt.step()
    pred = linear(b, w.value, bias.value)[0].argmax(axis=1)
    return float((pred == test_y).mean())
