"""Waveform and feature augmentations plus the 2-global/4-local multi-crop sampler."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from .features import AudioInputError, FeatureMatrix, Waveform, fbank, instance_normalize, synth_corpus

STRATEGIES = ("wav", "spec", "shuffle", "none")


@dataclass
class AugmentPolicy:
    strategy: str = "wav"
    snr_min: float = 0.0
    snr_max: float = 15.0
    time_mask_max: int = 15
    freq_mask_max: int = 6
    shuffle_segment: int = 50
    noise_prob: float = 0.5
    reverb_prob: float = 0.5
    rir_decay_ms: tuple[float, float] = (20.0, 80.0)
    rir_taps: int = 1600
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown augmentation strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if not 0 <= self.snr_min <= self.snr_max:
            raise ValueError(f"bad SNR range [{self.snr_min}, {self.snr_max}]")
        if self.time_mask_max < 0 or self.freq_mask_max < 0 or self.shuffle_segment < 1:
            raise ValueError("mask lengths must be >= 0 and shuffle segment >= 1")


@dataclass
class ViewSet:
    globals: list[FeatureMatrix]
    locals: list[FeatureMatrix]
    utt_id: int | str = 0
    global_starts: list[int] = field(default_factory=list)
    local_starts: list[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.globals) != 2 or len(self.locals) != 4:
            raise ValueError(f"a view set holds 2 global and 4 local views, got {len(self.globals)}/{len(self.locals)}")

    @property
    def views(self) -> list[FeatureMatrix]:
        return self.globals + self.locals


def _power(x: np.ndarray) -> float:
    return float(np.mean(x * x))


def add_noise_at_snr(clean: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    """Mix ``noise`` into ``clean`` so that the clean-to-scaled-noise power ratio is ``snr_db``."""
    if not np.isfinite(snr_db):
        raise ValueError("snr_db must be finite")
    n = len(clean)
    if len(noise) < n:
        raise AudioInputError(f"noise ({len(noise)} samples) is shorter than the clean signal ({n})")
    nz = noise.samples[:n]
    p_clean, p_noise = _power(clean.samples), _power(nz)
    if p_clean == 0 or p_noise == 0:
        raise AudioInputError("SNR is undefined for a silent signal or silent noise")
    alpha = np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    return Waveform(clean.samples + alpha * nz, clean.sample_rate)


def reverb(wave: Waveform, impulse) -> Waveform:
    """Convolve with ``impulse``, keep the first ``len(wave)`` samples, restore the input peak."""
    h = np.asarray(impulse, dtype=np.float64)
    if h.size == 0 or not np.any(h):
        raise AudioInputError("impulse response must be non-empty and not all zero")
    x = wave.samples
    y = fftconvolve(x, h)[: x.size]
    peak_in, peak_out = np.max(np.abs(x)), np.max(np.abs(y))
    if peak_out > 0:
        y = y * (peak_in / peak_out)
    return Waveform(y, wave.sample_rate)


def synth_rir(decay_ms: float, taps: int, seed: int, sample_rate: int = 16000) -> np.ndarray:
    """Random-sign exponentially decaying impulse response with a unit first tap."""
    if taps < 1:
        raise ValueError("taps must be >= 1")
    rng = np.random.default_rng(seed)
    tau = decay_ms / 1000.0 * sample_rate
    h = np.exp(-np.arange(taps) / tau) * rng.choice([-1.0, 1.0], size=taps)
    h[0] = 1.0
    return h


def spec_augment(feat: FeatureMatrix, rng: np.random.Generator, time_mask_max: int = 15, freq_mask_max: int = 6) -> FeatureMatrix:
    """Zero one random time band (0..time_mask_max frames) and one frequency band (0..freq_mask_max bins)."""
    x = feat.frames.copy()
    t, f = x.shape
    t_len = int(rng.integers(0, time_mask_max + 1))
    t_start = int(rng.integers(0, max(t - t_len, 0) + 1))
    f_len = int(rng.integers(0, freq_mask_max + 1))
    f_start = int(rng.integers(0, max(f - f_len, 0) + 1))
    x[t_start:t_start + t_len, :] = 0.0
    x[:, f_start:f_start + f_len] = 0.0
    return FeatureMatrix(x, feat.frame_len_ms, feat.frame_shift_ms)


def shuffle_features(feat: FeatureMatrix, rng: np.random.Generator, segment: int = 50) -> FeatureMatrix:
    """Permute consecutive ``segment``-frame blocks; frames inside a block keep their order."""
    t = feat.frames.shape[0]
    if t <= segment:
        return FeatureMatrix(feat.frames.copy(), feat.frame_len_ms, feat.frame_shift_ms)
    blocks = [feat.frames[i:i + segment] for i in range(0, t, segment)]
    order = rng.permutation(len(blocks))
    return FeatureMatrix(np.concatenate([blocks[i] for i in order]), feat.frame_len_ms, feat.frame_shift_ms)


class NoiseBank:
    """Seeded white noise and synthetic babble (4 overlapping synthetic talkers)."""

    def __init__(self, seed: int, seconds: float = 4.0, n_babble: int = 8, sample_rate: int = 16000):
        self.seed = seed
        self.sample_rate = sample_rate
        self.length = int(round(seconds * sample_rate))
        talkers = synth_corpus(4 * n_babble, 1, seconds, seed=10_000 + seed, sample_rate=sample_rate)
        self.babble = [
            np.sum([talkers[4 * i + j][1].samples for j in range(4)], axis=0) for i in range(n_babble)
        ]

    def draw(self, n: int, rng: np.random.Generator) -> Waveform:
        if rng.uniform() < 0.5:
            return Waveform(rng.standard_normal(n), self.sample_rate)
        src = self.babble[int(rng.integers(len(self.babble)))]
        reps = -(-n // src.size)
        tiled = np.tile(src, reps)
        start = int(rng.integers(0, tiled.size - n + 1))
        return Waveform(tiled[start:start + n], self.sample_rate)


def augment_waveform(wave: Waveform, policy: AugmentPolicy, rng: np.random.Generator, noise_bank: NoiseBank | None) -> Waveform:
    """Noise then reverb, each applied independently with its configured probability."""
    out = wave
    if rng.uniform() < policy.noise_prob:
        snr = rng.uniform(policy.snr_min, policy.snr_max)
        noise = noise_bank.draw(len(out), rng) if noise_bank is not None else Waveform(rng.standard_normal(len(out)), out.sample_rate)
        if _power(out.samples) > 0:
            out = add_noise_at_snr(out, noise, snr)
    if rng.uniform() < policy.reverb_prob:
        decay = rng.uniform(*policy.rir_decay_ms)
        out = reverb(out, synth_rir(decay, policy.rir_taps, int(rng.integers(2**31)), out.sample_rate))
    return out


def tile_to(wave: Waveform, n: int) -> Waveform:
    if len(wave) >= n:
        return wave
    reps = -(-n // len(wave))
    return Waveform(np.tile(wave.samples, reps)[:n], wave.sample_rate)


def make_view(
    wave: Waveform,
    start: int,
    n: int,
    policy: AugmentPolicy,
    rng: np.random.Generator,
    noise_bank: NoiseBank | None = None,
    n_mels: int = 80,
) -> FeatureMatrix:
    """Crop, augment and featurize one view."""
    crop = Waveform(wave.samples[start:start + n], wave.sample_rate)
    if policy.strategy == "wav":
        crop = augment_waveform(crop, policy, rng, noise_bank)
    feat = instance_normalize(fbank(crop, n_mels=n_mels))
    if policy.strategy == "spec":
        feat = spec_augment(feat, rng, policy.time_mask_max, policy.freq_mask_max)
    elif policy.strategy == "shuffle":
        feat = shuffle_features(feat, rng, policy.shuffle_segment)
    return feat


def multicrop(
    wave: Waveform,
    policy: AugmentPolicy,
    rng: np.random.Generator,
    noise_bank: NoiseBank | None = None,
    global_seconds: float = 4.0,
    local_seconds: float = 2.0,
    n_mels: int = 80,
    utt_id: int | str = 0,
) -> ViewSet:
    """Two global and four local independently augmented crops of one utterance."""
    sr = wave.sample_rate
    n_global = int(round(global_seconds * sr))
    n_local = int(round(local_seconds * sr))
    wave = tile_to(wave, n_global)
    starts_g = [int(rng.integers(0, len(wave) - n_global + 1)) for _ in range(2)]
    starts_l = [int(rng.integers(0, len(wave) - n_local + 1)) for _ in range(4)]
    # child generators keep the six views' augmentation draws independent
    children = rng.spawn(6)
    globals_ = [make_view(wave, s, n_global, policy, r, noise_bank, n_mels) for s, r in zip(starts_g, children[:2])]
    locals_ = [make_view(wave, s, n_local, policy, r, noise_bank, n_mels) for s, r in zip(starts_l, children[2:])]
    return ViewSet(globals_, locals_, utt_id, starts_g, starts_l)
