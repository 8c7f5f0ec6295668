"""Log mel filterbank features, instance normalization and a synthetic speaker corpus."""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

LOG_FLOOR = 1e-10
NORM_EPS = 1e-5


class AudioInputError(ValueError):
    """Audio is empty, too short, or in an unsupported container."""


class FeatureFileError(ValueError):
    """Feature cache file is malformed or truncated."""


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise AudioInputError("waveform must be a non-empty 1-d sequence")
        if self.sample_rate <= 0:
            raise AudioInputError(f"sample rate must be positive, got {self.sample_rate}")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def seconds(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class FeatureMatrix:
    frames: np.ndarray
    frame_len_ms: float = 25.0
    frame_shift_ms: float = 10.0

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int, sample_rate: int) -> np.ndarray:
    """Center frequency (Hz) of each triangular filter."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    return edges[1:-1]


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """(n_fft//2 + 1, n_mels) triangular filters spanning 0 Hz to Nyquist on the HTK mel scale."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling)).T


def fbank(
    wave: Waveform,
    n_mels: int = 80,
    win_ms: float = 25.0,
    shift_ms: float = 10.0,
    preemphasis: float = 0.0,
    dither: float = 0.0,
    rng: np.random.Generator | None = None,
) -> FeatureMatrix:
    """Log mel filterbank energies of a waveform.

    Frames are taken without padding, so ``T = 1 + (N - win) // shift``. Each
    frame is Hann-windowed, its magnitude spectrum pooled by the mel filters
    and compressed with ``log(x + 1e-10)``. Pre-emphasis and dither are off by
    default; dither draws from ``rng`` (seeded with 0 when omitted).
    """
    sr = wave.sample_rate
    win = int(round(sr * win_ms / 1000.0))
    hop = int(round(sr * shift_ms / 1000.0))
    x = wave.samples
    if x.size < win:
        raise AudioInputError(f"waveform has {x.size} samples, shorter than one {win}-sample window")
    if dither > 0:
        x = x + dither * (rng or np.random.default_rng(0)).standard_normal(x.size)
    if preemphasis > 0:
        x = np.concatenate([x[:1], x[1:] - preemphasis * x[:-1]])
    n_frames = 1 + (x.size - win) // hop
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:n_frames]
    n_fft = 1 << (win - 1).bit_length()
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(win) / win)
    mag = np.abs(np.fft.rfft(frames * window, n=n_fft, axis=1))
    energies = mag @ _cached_filterbank(n_mels, n_fft, sr)
    return FeatureMatrix(np.log(energies + LOG_FLOOR), frame_len_ms=win_ms, frame_shift_ms=shift_ms)


_FB_CACHE: dict[tuple[int, int, int], np.ndarray] = {}


def _cached_filterbank(n_mels: int, n_fft: int, sr: int) -> np.ndarray:
    key = (n_mels, n_fft, sr)
    if key not in _FB_CACHE:
        _FB_CACHE[key] = mel_filterbank(n_mels, n_fft, sr)
    return _FB_CACHE[key]


def instance_normalize(feat: FeatureMatrix) -> FeatureMatrix:
    """Per-utterance, per-dimension mean and variance normalization."""
    x = feat.frames
    mu = x.mean(axis=0, keepdims=True)
    var = x.var(axis=0, keepdims=True)
    return FeatureMatrix((x - mu) / np.sqrt(var + NORM_EPS), feat.frame_len_ms, feat.frame_shift_ms)


# -- feature cache -------------------------------------------------------

_FEAT_MAGIC = "RDINO-FEAT"


def save_features(feat: FeatureMatrix, path) -> None:
    t, f = feat.frames.shape
    with open(path, "wb") as fh:
        fh.write(f"{_FEAT_MAGIC} v1 {t} {f}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(feat.frames, dtype="<f4").tobytes())


def load_features(path) -> FeatureMatrix:
    raw = Path(path).read_bytes()
    head, sep, body = raw.partition(b"\n")
    parts = head.decode("ascii", errors="replace").split()
    if not sep or len(parts) != 4 or parts[0] != _FEAT_MAGIC:
        raise FeatureFileError(f"{path}: not a feature cache file")
    if parts[1] != "v1":
        raise FeatureFileError(f"{path}: unsupported version {parts[1]}")
    t, f = int(parts[2]), int(parts[3])
    if len(body) != 4 * t * f:
        raise FeatureFileError(f"{path}: expected {4 * t * f} payload bytes, found {len(body)}")
    return FeatureMatrix(np.frombuffer(body, dtype="<f4").reshape(t, f).copy())


# -- PCM audio -----------------------------------------------------------


def read_wav(path) -> Waveform:
    """Read a 16-bit mono PCM WAV file into [-1, 1) floats."""
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2 or fh.getcomptype() != "NONE":
            raise AudioInputError(f"{path}: only 16-bit mono PCM is supported")
        sr = fh.getframerate()
        data = fh.readframes(fh.getnframes())
    if not data:
        raise AudioInputError(f"{path}: no audio frames")
    return Waveform(np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0, sr)


def write_wav(path, wave_: Waveform) -> None:
    pcm = np.clip(np.round(wave_.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(wave_.sample_rate)
        fh.writeframes(pcm.tobytes())


# -- synthetic speakers --------------------------------------------------

# neutral-adult vowel formant table (Hz); speakers rescale it by vocal tract length
_VOWELS = np.array(
    [
        [730, 1090, 2440],
        [270, 2290, 3010],
        [300, 870, 2240],
        [530, 1840, 2480],
        [570, 840, 2410],
        [660, 1720, 2410],
        [490, 1350, 1690],
    ],
    dtype=np.float64,
)


@dataclass
class SynthSpeakerSpec:
    f0_range: tuple[float, float]
    tract_scale: float
    vowel_formants: np.ndarray  # (n_vowels, 3) in Hz
    bandwidths: np.ndarray  # (3,) in Hz
    fixed_formant: float  # vowel-independent upper resonance, Hz
    tilt: float  # one-pole source lowpass coefficient
    breathiness: float
    seed: int = 0
    vowel_weights: np.ndarray = field(default_factory=lambda: np.ones(len(_VOWELS)) / len(_VOWELS))


def make_speaker(seed: int, speaker: int) -> SynthSpeakerSpec:
    rng = np.random.default_rng([seed, speaker, 1])
    f0 = rng.uniform(85.0, 240.0)
    scale = rng.uniform(0.82, 1.22)
    formants = _VOWELS * scale * rng.uniform(0.92, 1.08, size=_VOWELS.shape)
    return SynthSpeakerSpec(
        f0_range=(f0 * 0.95, f0 * 1.05),
        tract_scale=scale,
        vowel_formants=formants,
        bandwidths=rng.uniform([50, 70, 110], [110, 150, 220]),
        fixed_formant=rng.uniform(3000.0, 5000.0),
        tilt=rng.uniform(0.6, 0.95),
        breathiness=rng.uniform(0.002, 0.03),
        seed=seed * 100003 + speaker,
        vowel_weights=_subset_weights(rng, len(_VOWELS), 3),
    )


def _subset_weights(rng, n, k):
    w = np.zeros(n)
    w[rng.choice(n, size=k, replace=False)] = 1.0 / k
    return w


def _resonator(freq: float, bw: float, sr: int) -> tuple[np.ndarray, np.ndarray]:
    r = np.exp(-np.pi * bw / sr)
    theta = 2 * np.pi * freq / sr
    a = np.array([1.0, -2 * r * np.cos(theta), r * r])
    return np.array([a.sum()]), a


def synth_utterance(spk: SynthSpeakerSpec, seconds: float, rng: np.random.Generator, sample_rate: int = 16000) -> np.ndarray:
    """Continuously voiced syllable train through speaker-specific formant filters.

    Each 40-120 ms syllable picks one of the speaker's vowels and carries a
    slow F0 vibrato. Source phase runs on across syllable boundaries.
    """
    n = int(round(seconds * sample_rate))
    out = np.zeros(n)
    # per-utterance jitter of the speaker's operating point
    f0_base = rng.uniform(*spk.f0_range)
    formant_jitter = rng.uniform(0.985, 1.015)
    pos = 0
    phase = rng.uniform(0, 1)
    while pos < n:
        seg = min(int(sample_rate * rng.uniform(0.04, 0.12)), n - pos)
        t = np.arange(seg) / sample_rate
        f0 = f0_base * (1 + 0.06 * np.sin(2 * np.pi * rng.uniform(2, 5) * t + rng.uniform(0, 6.3)))
        inst = phase + np.cumsum(f0) / sample_rate
        phase = inst[-1] % 1.0
        pulses = np.diff(np.floor(inst), prepend=np.floor(inst[0])).astype(np.float64)
        src = lfilter([1.0], [1.0, -spk.tilt], pulses)
        src = src + spk.breathiness * rng.standard_normal(seg)
        vowel = rng.choice(len(spk.vowel_formants), p=spk.vowel_weights)
        y = src
        for f, bw in zip(spk.vowel_formants[vowel] * formant_jitter, spk.bandwidths):
            b, a = _resonator(min(f, 0.45 * sample_rate), bw, sample_rate)
            y = lfilter(b, a, y)
        b, a = _resonator(spk.fixed_formant, 250.0, sample_rate)
        y = y + 0.5 * lfilter(b, a, src)
        out[pos:pos + seg] = y * np.sin(np.pi * np.linspace(0, 1, seg)) ** 0.5
        pos += seg
    peak = np.max(np.abs(out))
    return 0.8 * out / peak if peak > 0 else out


def synth_corpus(
    n_speakers: int,
    utts_per_speaker: int,
    utt_seconds: float,
    seed: int,
    sample_rate: int = 16000,
) -> list[tuple[int, Waveform]]:
    """Deterministic list of ``(speaker_id, Waveform)`` pairs, speaker-major."""
    corpus = []
    for s in range(n_speakers):
        spk = make_speaker(seed, s)
        for u in range(utts_per_speaker):
            rng = np.random.default_rng([seed, s, u, 2])
            corpus.append((s, Waveform(synth_utterance(spk, utt_seconds, rng, sample_rate), sample_rate)))
    return corpus
