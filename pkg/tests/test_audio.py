import numpy as np
import pytest

from singdc.audio import (CLIP_SAMPLES, N_BINS, N_FRAMES, SAMPLE_RATE, WINDOWS, AudioClip, FeatureStats,
                          SampleRateError, WavFormatError, load_spectrogram, load_wav, multi_res_spectrogram,
                          save_spectrogram, segment_clips, stft_log_magnitude, wav_num_frames, write_wav)


def bin_sine(k, amp=0.5):
    t = np.arange(CLIP_SAMPLES)
    return (amp * np.sin(2 * np.pi * k * t / 2048)).astype(np.float32)


def naive_frame_magnitude(samples, win_length, frame):
    """Direct DFT of one centered frame, independent of the vectorized path."""
    x = np.pad(np.asarray(samples, np.float64), 1024, mode="reflect")
    seg = x[frame * 512: frame * 512 + 2048]
    n = np.arange(win_length)
    hann = 0.5 - 0.5 * np.cos(2 * np.pi * n / win_length)
    win = np.zeros(2048)
    start = (2048 - win_length) // 2
    win[start:start + win_length] = hann
    k = np.arange(1025)[:, None]
    basis = np.exp(-2j * np.pi * k * np.arange(2048)[None, :] / 2048)
    return np.log1p(np.abs(basis @ (seg * win)))


def test_spectrogram_shape():
    spec = multi_res_spectrogram(np.zeros(CLIP_SAMPLES, np.float32))
    assert spec.shape == (3, N_BINS, N_FRAMES) == (3, 1025, 259)
    assert spec.dtype == np.float32


def test_silence_is_zero():
    np.testing.assert_array_equal(multi_res_spectrogram(np.zeros(CLIP_SAMPLES)), 0.0)


@pytest.mark.parametrize("k", [10, 64, 93, 500])
def test_bin_centred_sine_peaks_on_its_bin(k):
    spec = multi_res_spectrogram(bin_sine(k))
    # edge frames see the reflected copy of the signal, so only interior frames are checked
    for ch in range(3):
        assert np.all(spec[ch, :, 1:-1].argmax(axis=0) == k)


@pytest.mark.parametrize("win", WINDOWS)
def test_matches_direct_dft(win):
    x = np.random.default_rng(0).standard_normal(CLIP_SAMPLES).astype(np.float32)
    spec = stft_log_magnitude(x, win)
    for frame in (0, 1, 130, 258):
        np.testing.assert_allclose(spec[:, frame], naive_frame_magnitude(x, win, frame), atol=2e-4)


def test_clip_length_enforced():
    with pytest.raises(ValueError):
        multi_res_spectrogram(np.zeros(CLIP_SAMPLES - 1))
    with pytest.raises(ValueError):
        AudioClip(np.zeros(10, np.float32))


def test_segmentation_drops_remainder():
    x = np.arange(int(7.5 * SAMPLE_RATE), dtype=np.float32)
    clips = segment_clips(x, source="f")
    assert len(clips) == 2
    assert clips[1].samples[0] == CLIP_SAMPLES
    assert clips[0].source_id == "f#0"
    assert segment_clips(np.zeros(CLIP_SAMPLES - 1)) == []


def test_segmentation_rate_check():
    with pytest.raises(SampleRateError):
        segment_clips(np.zeros(CLIP_SAMPLES), sample_rate=22050)


def test_pcm16_roundtrip(tmp_path):
    x = np.random.default_rng(0).uniform(-0.9, 0.9, 5000).astype(np.float32)
    write_wav(tmp_path / "a.wav", x)
    y, rate = load_wav(tmp_path / "a.wav")
    assert rate == SAMPLE_RATE
    assert np.abs(x - y).max() <= 1 / 32768 + 1e-7
    assert wav_num_frames(tmp_path / "a.wav") == 5000


def test_stereo_downmix(tmp_path):
    from scipy.io import wavfile
    left = np.full(100, 1000, np.int16)
    right = np.full(100, 3000, np.int16)
    wavfile.write(tmp_path / "s.wav", SAMPLE_RATE, np.stack([left, right], axis=1))
    y, _ = load_wav(tmp_path / "s.wav")
    np.testing.assert_allclose(y, 2000 / 32768)


def test_wrong_rate(tmp_path):
    write_wav(tmp_path / "a.wav", np.zeros(100), rate=16000)
    with pytest.raises(SampleRateError):
        load_wav(tmp_path / "a.wav")
    _, rate = load_wav(tmp_path / "a.wav", expected_rate=None)
    assert rate == 16000


def test_malformed_file(tmp_path):
    (tmp_path / "bad.wav").write_bytes(b"RIFF\x10\x00\x00\x00WAVEjunk")
    with pytest.raises(WavFormatError):
        load_wav(tmp_path / "bad.wav")


def test_feature_stats():
    rng = np.random.default_rng(0)
    specs = rng.normal([[[1.0]], [[5.0]], [[-2.0]]], [[[2.0]], [[0.5]], [[1.0]]], (6, 3, 40, 30))
    st = FeatureStats.fit(specs)
    np.testing.assert_allclose(st.mean, specs.mean(axis=(0, 2, 3)), rtol=1e-5)
    np.testing.assert_allclose(st.std, specs.std(axis=(0, 2, 3)), rtol=1e-5)
    z = np.stack([st.apply(s) for s in specs])
    np.testing.assert_allclose(z.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(z.std(axis=(0, 2, 3)), 1, atol=1e-4)


def test_feature_stats_constant_channel():
    st = FeatureStats.fit(np.zeros((2, 3, 4, 4)))
    np.testing.assert_array_equal(st.std, 1.0)


def test_spectrogram_cache_roundtrip(tmp_path):
    spec = np.random.default_rng(0).standard_normal((3, 7, 5)).astype(np.float32)
    save_spectrogram(tmp_path / "s.bin", spec)
    raw = (tmp_path / "s.bin").read_bytes()
    assert raw[:12] == np.array([3, 7, 5], "<u4").tobytes()
    assert len(raw) == 12 + 4 * spec.size
    np.testing.assert_array_equal(load_spectrogram(tmp_path / "s.bin"), spec)


def test_spectrogram_cache_truncated(tmp_path):
    spec = np.ones((3, 4, 4), np.float32)
    save_spectrogram(tmp_path / "s.bin", spec)
    (tmp_path / "t.bin").write_bytes((tmp_path / "s.bin").read_bytes()[:-4])
    with pytest.raises(ValueError):
        load_spectrogram(tmp_path / "t.bin")


def test_full_scale_sine_roundtrip(tmp_path):
    t = np.arange(SAMPLE_RATE) / SAMPLE_RATE
    x = np.sin(2 * np.pi * 440 * t).astype(np.float32)
    write_wav(tmp_path / "a.wav", x)
    y, _ = load_wav(tmp_path / "a.wav")
    assert np.abs(x - y).max() < 1e-4
