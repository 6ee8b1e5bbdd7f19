"""WAV decoding, 3 s clip segmentation and the 3-channel multi-resolution spectrogram."""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window

SAMPLE_RATE = 44100
CLIP_SECONDS = 3
CLIP_SAMPLES = SAMPLE_RATE * CLIP_SECONDS  # 132300
N_FFT = 2048
HOP = 512
WINDOWS = (2048, 1024, 512)
N_BINS = N_FFT // 2 + 1
N_FRAMES = 1 + CLIP_SAMPLES // HOP  # 259


class AudioError(Exception):
    pass


class WavFormatError(AudioError):
    """Malformed RIFF/WAVE data or an unsupported sample encoding."""


class SampleRateError(AudioError):
    pass


def load_wav(path, expected_rate: int | None = SAMPLE_RATE):
    """Read a PCM-16 or IEEE-float WAV file as mono float32 in [-1, 1].

    Stereo (or wider) files are averaged over channels. Returns ``(samples, rate)``.
    Pass ``expected_rate=None`` to accept any rate.
    """
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except (ValueError, struct.error, EOFError) as exc:
        raise WavFormatError(f"{path}: {exc}") from exc
    if data.dtype == np.int16:
        samples = data.astype(np.float32) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float32)
    else:
        raise WavFormatError(f"{path}: unsupported sample type {data.dtype} (need PCM16 or float)")
    if samples.ndim == 2:
        samples = samples.mean(axis=1, dtype=np.float32)
    if expected_rate is not None and rate != expected_rate:
        raise SampleRateError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz")
    return samples, rate


def write_wav(path, samples, rate: int = SAMPLE_RATE, pcm16: bool = True):
    samples = np.asarray(samples)
    if pcm16:
        data = np.clip(np.round(samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        data = samples.astype(np.float32)
    wavfile.write(path, rate, data)


def wav_num_frames(path) -> int:
    """Sample-frame count of a WAV file without decoding the payload."""
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            _, data = wavfile.read(path, mmap=True)
    except (ValueError, struct.error, EOFError) as exc:
        raise WavFormatError(f"{path}: {exc}") from exc
    return int(data.shape[0])


@dataclass
class AudioClip:
    samples: np.ndarray
    source_id: str = ""
    label: int | None = None

    def __post_init__(self):
        if self.samples.shape != (CLIP_SAMPLES,):
            raise ValueError(f"clip must hold {CLIP_SAMPLES} samples, got {self.samples.shape}")


def segment_clips(samples, sample_rate=SAMPLE_RATE, source="", label=None) -> list[AudioClip]:
    """Consecutive non-overlapping 3 s clips; a trailing remainder shorter than 3 s is dropped."""
    if sample_rate != SAMPLE_RATE:
        raise SampleRateError(f"segmentation expects {SAMPLE_RATE} Hz, got {sample_rate}")
    n = len(samples) // CLIP_SAMPLES
    return [AudioClip(np.asarray(samples[k * CLIP_SAMPLES:(k + 1) * CLIP_SAMPLES], dtype=np.float32),
                      f"{source}#{k}", label)
            for k in range(n)]


def _padded_window(win_length: int, n_fft: int = N_FFT) -> np.ndarray:
    w = get_window("hann", win_length, fftbins=True)
    left = (n_fft - win_length) // 2
    return np.pad(w, (left, n_fft - win_length - left))


def stft_log_magnitude(samples, win_length: int, n_fft=N_FFT, hop=HOP) -> np.ndarray:
    """Centered STFT (reflect padding), Hann window zero-padded to ``n_fft``,
    compressed as ln(1 + |X|). Returns (n_fft // 2 + 1, frames) float32."""
    x = np.asarray(samples, dtype=np.float64)
    x = np.pad(x, n_fft // 2, mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(x, n_fft)[::hop]
    spec = np.fft.rfft(frames * _padded_window(win_length, n_fft), axis=1)
    return np.log1p(np.abs(spec)).T.astype(np.float32)


def multi_res_spectrogram(clip) -> np.ndarray:
    """Stack of log-magnitude spectrograms for windows 2048, 1024, 512: (3, 1025, 259)."""
    samples = clip.samples if isinstance(clip, AudioClip) else np.asarray(clip)
    if samples.shape != (CLIP_SAMPLES,):
        raise ValueError(f"clip must hold {CLIP_SAMPLES} samples, got {samples.shape}")
    return np.stack([stft_log_magnitude(samples, w) for w in WINDOWS])


@dataclass
class FeatureStats:
    """Per-channel training-set mean and standard deviation."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, specs) -> "FeatureStats":
        """``specs``: array (N, C, F, T) or iterable of (C, F, T) arrays."""
        total = sq = None
        count = 0
        for s in specs:
            s = np.asarray(s, dtype=np.float64)
            t, q = s.sum(axis=(1, 2)), (s * s).sum(axis=(1, 2))
            total = t if total is None else total + t
            sq = q if sq is None else sq + q
            count += s[0].size
        mean = total / count
        std = np.sqrt(np.maximum(sq / count - mean * mean, 0.0))
        std[std == 0] = 1.0
        return cls(mean.astype(np.float32), std.astype(np.float32))

    def apply(self, spec: np.ndarray) -> np.ndarray:
        shape = (-1, 1, 1)
        return ((spec - self.mean.reshape(shape)) / self.std.reshape(shape)).astype(np.float32)


# spectrogram cache: 3 little-endian uint32 extents, then row-major float32

def save_spectrogram(path, spec: np.ndarray):
    if spec.ndim != 3:
        raise ValueError("spectrogram cache holds 3-D arrays")
    Path(path).write_bytes(struct.pack("<3I", *spec.shape) + np.ascontiguousarray(spec, "<f4").tobytes())


def load_spectrogram(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise ValueError(f"{path}: truncated spectrogram header")
    shape = struct.unpack_from("<3I", raw)
    count = int(np.prod(shape))
    if len(raw) != 12 + 4 * count:
        raise ValueError(f"{path}: payload size does not match header {shape}")
    return np.frombuffer(raw, dtype="<f4", offset=12).reshape(shape).astype(np.float32)
