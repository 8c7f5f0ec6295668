import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from rdino.features import (
    AudioInputError,
    FeatureFileError,
    FeatureMatrix,
    Waveform,
    fbank,
    instance_normalize,
    load_features,
    make_speaker,
    read_wav,
    save_features,
    synth_corpus,
    write_wav,
)


def _mel_centers_oracle(n_mels, sr):
    top = 2595 * math.log10(1 + (sr / 2) / 700)
    return [700 * (10 ** (top * (i + 1) / (n_mels + 1) / 2595) - 1) for i in range(n_mels)]


class TestWaveform:
    def test_rejects_empty(self):
        with pytest.raises(AudioInputError):
            Waveform(np.zeros(0))

    def test_rejects_bad_rate(self):
        with pytest.raises(AudioInputError):
            Waveform(np.zeros(10), sample_rate=0)


class TestFbank:
    def test_one_second_frame_count(self):
        # 1 + floor((16000 - 400) / 160)
        assert fbank(Waveform(np.random.default_rng(0).uniform(-0.5, 0.5, 16000))).frames.shape == (98, 80)

    def test_silence_is_constant_log_floor(self):
        f = fbank(Waveform(np.zeros(4000))).frames
        np.testing.assert_array_equal(f, np.log(1e-10))

    def test_tone_peaks_at_nearest_center(self):
        t = np.arange(16000) / 16000
        f = fbank(Waveform(0.5 * np.sin(2 * np.pi * 1000 * t))).frames
        centers = np.array(_mel_centers_oracle(80, 16000))
        expected = int(np.argmin(np.abs(centers - 1000)))
        assert np.all(f.argmax(axis=1) == expected)

    def test_shorter_than_window_rejected(self):
        with pytest.raises(AudioInputError):
            fbank(Waveform(np.ones(399)))

    def test_exactly_one_window(self):
        assert fbank(Waveform(np.ones(400) * 0.1)).frames.shape == (1, 80)

    def test_shift_consistent(self):
        x = np.random.default_rng(3).uniform(-1, 1, 8000)
        a = fbank(Waveform(x)).frames
        b = fbank(Waveform(x[160:])).frames
        np.testing.assert_allclose(b, a[1:], atol=1e-9)

    def test_deterministic(self):
        x = np.random.default_rng(4).uniform(-1, 1, 5000)
        np.testing.assert_array_equal(fbank(Waveform(x)).frames, fbank(Waveform(x)).frames)

    def test_metadata(self):
        f = fbank(Waveform(np.ones(1000) * 0.1))
        assert (f.frame_len_ms, f.frame_shift_ms) == (25.0, 10.0)


class TestInstanceNormalize:
    def test_constant_maps_to_zero(self):
        out = instance_normalize(FeatureMatrix(np.full((50, 80), -3.2))).frames
        assert np.max(np.abs(out)) < 1e-3

    def test_standardized_input_unchanged(self):
        x = np.random.default_rng(0).standard_normal((300, 80))
        x = (x - x.mean(0)) / x.std(0)
        np.testing.assert_allclose(instance_normalize(FeatureMatrix(x)).frames, x, atol=1e-3)

    def test_random_matrix_statistics(self):
        x = np.random.default_rng(1).uniform(-20, 5, size=(200, 80))
        out = instance_normalize(FeatureMatrix(x)).frames
        assert np.max(np.abs(out.mean(0))) < 1e-5
        assert np.max(np.abs(out.std(0) - 1)) < 1e-3

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 60), st.integers(1, 12), st.integers(0, 2**31))
    def test_idempotent(self, t, f, seed):
        x = np.random.default_rng(seed).standard_normal((t, f)) * 3 + 1
        # the 1e-5 epsilon only becomes negligible once per-column variance is well above it
        assume(x.var(axis=0).min() > 0.01)
        once = instance_normalize(FeatureMatrix(x))
        np.testing.assert_allclose(instance_normalize(once).frames, once.frames, atol=1e-3)


class TestFeatureCache:
    def test_round_trip_bit_exact(self, tmp_path):
        x = np.random.default_rng(0).standard_normal((37, 80)).astype(np.float32)
        save_features(FeatureMatrix(x), tmp_path / "a.feat")
        np.testing.assert_array_equal(load_features(tmp_path / "a.feat").frames, x)

    def test_header(self, tmp_path):
        save_features(FeatureMatrix(np.zeros((3, 5), np.float32)), tmp_path / "a.feat")
        assert (tmp_path / "a.feat").read_bytes().startswith(b"RDINO-FEAT v1 3 5\n")

    def test_truncated(self, tmp_path):
        p = tmp_path / "a.feat"
        save_features(FeatureMatrix(np.ones((4, 4), np.float32)), p)
        p.write_bytes(p.read_bytes()[:-3])
        with pytest.raises(FeatureFileError):
            load_features(p)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "a.feat"
        p.write_bytes(b"NOPE v1 1 1\n\0\0\0\0")
        with pytest.raises(FeatureFileError):
            load_features(p)


def test_wav_round_trip(tmp_path):
    x = np.round(np.random.default_rng(0).uniform(-0.9, 0.9, 1000) * 32767) / 32767
    write_wav(tmp_path / "a.wav", Waveform(x))
    back = read_wav(tmp_path / "a.wav")
    assert back.sample_rate == 16000
    np.testing.assert_allclose(back.samples, x, atol=1 / 32767)


class TestSynthCorpus:
    def test_deterministic(self):
        a = synth_corpus(1, 1, 4.0, 7)[0][1].samples
        b = synth_corpus(1, 1, 4.0, 7)[0][1].samples
        np.testing.assert_array_equal(a, b)

    def test_speakers_differ(self):
        (_, a), (_, b) = synth_corpus(2, 1, 4.0, 7)
        assert np.max(np.abs(a.samples - b.samples)) > 1e-3

    def test_speaker_specs_differ(self):
        a, b = make_speaker(7, 0), make_speaker(7, 1)
        assert a.f0_range != b.f0_range or not np.array_equal(a.vowel_formants, b.vowel_formants)

    def test_counts_and_lengths(self):
        corpus = synth_corpus(20, 10, 4.0, 7)
        assert len(corpus) == 200
        assert all(len(w) == 64000 for _, w in corpus)
        assert [s for s, _ in corpus] == [s for s in range(20) for _ in range(10)]

    def test_range(self):
        for _, w in synth_corpus(3, 2, 1.0, 1):
            assert np.max(np.abs(w.samples)) <= 1.0

    def test_nearest_centroid_separability(self):
        # Per-utterance time-averaged log-mel, each dimension standardized
        # over the corpus, leave-one-out nearest class centroid.
        corpus = synth_corpus(10, 10, 4.0, 7)
        x = np.array([fbank(w).frames.mean(axis=0) for _, w in corpus])
        y = np.array([s for s, _ in corpus])
        x = (x - x.mean(0)) / x.std(0)
        hits = 0
        for i in range(len(x)):
            keep = np.arange(len(x)) != i
            cents = np.array([x[keep & (y == k)].mean(0) for k in range(10)])
            hits += int(np.argmin(((cents - x[i]) ** 2).sum(1)) == y[i])
        assert hits / len(x) > 0.8
