"""Waveform I/O, spectrogram baseline, normalization, noise mixing and the toy corpus."""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

SAMPLE_RATE = 16000
STD_FLOOR = 1e-8
PCM_SCALE = 32768.0


class AudioFormatError(ValueError):
    """WAV file or waveform that violates the PCM16 mono 16 kHz contract."""


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate != SAMPLE_RATE:
            raise AudioFormatError(f"sample_rate must be {SAMPLE_RATE}, got {self.sample_rate}")
        if self.samples.size < 1:
            raise AudioFormatError("waveform must contain at least one sample")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_ms(self) -> float:
        return 1000.0 * self.samples.size / self.sample_rate


@dataclass
class Utterance:
    id: str
    waveform: Waveform
    transcript: str


@dataclass
class Corpus:
    utterances: list[Utterance]
    alphabet: str

    def __post_init__(self):
        allowed = set(self.alphabet)
        for u in self.utterances:
            if not u.transcript:
                raise ValueError(f"utterance {u.id} has an empty transcript")
            bad = set(u.transcript) - allowed
            if bad:
                raise ValueError(f"utterance {u.id} uses characters outside the alphabet: {sorted(bad)}")

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def __getitem__(self, i):
        return self.utterances[i]


@dataclass
class FeatureMap:
    """Activations of shape ``[frames, features]`` at a fixed frame period."""

    frames: np.ndarray
    ms_per_frame: Fraction
    feature_labels: Optional[list] = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.ms_per_frame = Fraction(self.ms_per_frame)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"feature map needs shape [T>=1, F], got {self.frames.shape}")
        if self.ms_per_frame <= 0:
            raise ValueError("ms_per_frame must be positive")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_features(self) -> int:
        return self.frames.shape[1]


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray = field(default_factory=lambda: np.ones(1))

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.std = np.maximum(np.atleast_1d(np.asarray(self.std, dtype=np.float64)), STD_FLOOR)


# --- WAV -------------------------------------------------------------------

def read_wav(path: Union[str, Path]) -> Waveform:
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getcomptype() != "NONE":
                raise AudioFormatError(f"{path}: encoding must be PCM, got {wf.getcomptype()}")
            if wf.getnchannels() != 1:
                raise AudioFormatError(f"{path}: channels must be 1, got {wf.getnchannels()}")
            if wf.getsampwidth() != 2:
                raise AudioFormatError(f"{path}: sample width must be 16 bits, got {8 * wf.getsampwidth()}")
            if wf.getframerate() != SAMPLE_RATE:
                raise AudioFormatError(f"{path}: sample rate must be {SAMPLE_RATE}, got {wf.getframerate()}")
            raw = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        raise AudioFormatError(f"{path}: not a RIFF/WAV file ({exc})") from exc
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / PCM_SCALE)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    scaled = np.round(np.asarray(samples, dtype=np.float64) * PCM_SCALE)
    return np.clip(scaled, -32768, 32767).astype("<i2")


def write_wav(path: Union[str, Path], w: Waveform) -> None:
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(SAMPLE_RATE)
        wf.writeframes(to_pcm16(w.samples).tobytes())


# --- spectrogram -----------------------------------------------------------

def ms_to_samples(ms) -> int:
    """Convert milliseconds to a whole number of samples at 16 kHz."""
    n = Fraction(ms).limit_denominator(1000) * SAMPLE_RATE / 1000
    if n.denominator != 1 or n <= 0:
        raise ValueError(f"{ms} ms is not a positive whole number of samples at {SAMPLE_RATE} Hz")
    return int(n)


def frame_signal(x: np.ndarray, window: int, hop: int) -> np.ndarray:
    if x.size < window:
        raise ValueError(f"signal of {x.size} samples is shorter than one window ({window})")
    n = (x.size - window) // hop + 1
    return np.lib.stride_tricks.sliding_window_view(x, window)[::hop][:n]


def spectrogram(w: Waveform, window_ms=20, hop_ms=10) -> FeatureMap:
    """Linear magnitude STFT with a periodic Hann window and no padding."""
    win = ms_to_samples(window_ms)
    hop = ms_to_samples(hop_ms)
    frames = frame_signal(w.samples, win, hop)
    taper = np.hanning(win + 1)[:-1]
    mags = np.abs(np.fft.rfft(frames * taper, axis=1))
    freqs = list(np.fft.rfftfreq(win, d=1.0 / SAMPLE_RATE))
    return FeatureMap(mags, Fraction(hop_ms).limit_denominator(1000), freqs)


# --- normalization ---------------------------------------------------------

def _as_matrix(item) -> np.ndarray:
    if isinstance(item, FeatureMap):
        return item.frames
    if isinstance(item, Waveform):
        return item.samples.reshape(-1, 1)
    arr = np.asarray(item, dtype=np.float64)
    return arr.reshape(-1, 1) if arr.ndim == 1 else arr


def fit_norm_stats(items: Sequence) -> NormStats:
    """Per-feature mean/std over every frame of every item.

    Waveforms count as a single feature, so their stats are global scalars.
    """
    if len(items) == 0:
        raise ValueError("cannot fit normalization stats on an empty corpus")
    mats = [_as_matrix(it) for it in items]
    width = mats[0].shape[1]
    if any(m.shape[1] != width for m in mats):
        raise ValueError("all items must have the same feature count")
    total = np.sum([m.shape[0] for m in mats])
    if total < 2:
        raise ValueError("need at least 2 frames to fit normalization stats")
    mu = np.sum([m.sum(axis=0) for m in mats], axis=0) / total
    var = np.sum([((m - mu) ** 2).sum(axis=0) for m in mats], axis=0) / total
    return NormStats(mu, np.sqrt(var))


def apply_norm(item, stats: NormStats):
    if isinstance(item, FeatureMap):
        return FeatureMap((item.frames - stats.mean) / stats.std, item.ms_per_frame, item.feature_labels)
    if isinstance(item, Waveform):
        return Waveform((item.samples - stats.mean[0]) / stats.std[0], item.sample_rate)
    return (np.asarray(item, dtype=np.float64) - stats.mean) / stats.std


# --- augmentation ----------------------------------------------------------

def power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


def noise_gain(signal: np.ndarray, noise: np.ndarray, snr_db: float) -> float:
    p_sig, p_noise = power(signal), power(noise)
    if p_sig == 0.0:
        raise ValueError("signal has zero power; SNR is undefined")
    if p_noise == 0.0:
        raise ValueError("noise has zero power; SNR is undefined")
    return float(np.sqrt(p_sig / (p_noise * 10.0 ** (snr_db / 10.0))))


def mix_noise(signal: Waveform, noise: Waveform, snr_db: float,
              rng: Optional[np.random.Generator] = None,
              return_components: bool = False):
    """Add ``noise`` to ``signal`` scaled so that the component SNR is ``snr_db``.

    The noise is cropped to the signal length at an offset drawn from ``rng``
    (offset 0 when no generator is given).
    """
    n = len(signal)
    if len(noise) < n:
        raise ValueError(f"noise ({len(noise)} samples) shorter than signal ({n})")
    offset = 0
    if rng is not None and len(noise) > n:
        offset = int(rng.integers(0, len(noise) - n + 1))
    crop = noise.samples[offset:offset + n]
    g = noise_gain(signal.samples, crop, snr_db)
    scaled = g * crop
    mixed = Waveform(signal.samples + scaled)
    if return_components:
        return mixed, scaled
    return mixed


def measured_snr_db(signal: np.ndarray, scaled_noise: np.ndarray) -> float:
    return 10.0 * np.log10(power(signal) / power(scaled_noise))


def white_noise(n_samples: int, seed: int, amplitude: float = 0.3) -> Waveform:
    rng = np.random.default_rng(seed)
    return Waveform(amplitude * rng.standard_normal(n_samples))


# --- synthetic corpus ------------------------------------------------------

TONE_MS = 120
GAP_MS = 30
TONE_AMPLITUDE = 0.5
DEFAULT_ALPHABET = "abcdefghij"


@dataclass
class CorpusConfig:
    n_utts: int = 64
    alphabet_size: int = 6
    min_chars: int = 3
    max_chars: int = 6
    seed: int = 0

    def validate(self) -> None:
        if not 2 <= self.alphabet_size <= len(DEFAULT_ALPHABET):
            raise ValueError(f"alphabet_size must be in [2, {len(DEFAULT_ALPHABET)}], got {self.alphabet_size}")
        if self.n_utts < 1:
            raise ValueError(f"n_utts must be >= 1, got {self.n_utts}")
        if not 1 <= self.min_chars <= self.max_chars:
            raise ValueError(f"need 1 <= min_chars <= max_chars, got {self.min_chars}, {self.max_chars}")


def char_frequencies(index: int) -> tuple[float, float]:
    return 400.0 + 300.0 * index, 1200.0 + 450.0 * index


def render_transcript(transcript: str, alphabet: str) -> Waveform:
    """Two-tone burst (120 ms) plus 30 ms of silence per character."""
    tone_n = TONE_MS * SAMPLE_RATE // 1000
    gap_n = GAP_MS * SAMPLE_RATE // 1000
    t = np.arange(tone_n) / SAMPLE_RATE
    pieces = []
    for ch in transcript:
        f1, f2 = char_frequencies(alphabet.index(ch))
        pieces.append(TONE_AMPLITUDE * (np.sin(2 * np.pi * f1 * t) + np.sin(2 * np.pi * f2 * t)))
        pieces.append(np.zeros(gap_n))
    return Waveform(np.concatenate(pieces))


def synth_corpus(config: CorpusConfig) -> Corpus:
    """Deterministic toy corpus; RNG is numpy's PCG64 seeded with ``config.seed``."""
    config.validate()
    alphabet = DEFAULT_ALPHABET[: config.alphabet_size]
    rng = np.random.default_rng(config.seed)
    utts = []
    width = len(str(config.n_utts - 1))
    for i in range(config.n_utts):
        length = int(rng.integers(config.min_chars, config.max_chars + 1))
        transcript = "".join(alphabet[j] for j in rng.integers(0, len(alphabet), size=length))
        utts.append(Utterance(f"utt{i:0{width}d}", render_transcript(transcript, alphabet), transcript))
    return Corpus(utts, alphabet)


def sortagrad_order(corpus) -> list[int]:
    """Indices ordered by sample count, ties broken by utterance id."""
    utts = list(corpus)
    if not utts:
        raise ValueError("corpus is empty")
    return sorted(range(len(utts)), key=lambda i: (len(utts[i].waveform), utts[i].id))


# --- manifest --------------------------------------------------------------

MANIFEST_NAME = "manifest.tsv"


def write_corpus(corpus: Corpus, out_dir: Union[str, Path]) -> Path:
    out = Path(out_dir)
    out.mkdir(exist_ok=True)
    (out / "wav").mkdir(exist_ok=True)
    lines = []
    for u in corpus:
        rel = f"wav/{u.id}.wav"
        write_wav(out / rel, u.waveform)
        lines.append(f"{u.id}\t{rel}\t{u.transcript}\n")
    path = out / MANIFEST_NAME
    path.write_text("".join(lines), encoding="utf-8")
    (out / "alphabet.txt").write_text(corpus.alphabet + "\n", encoding="utf-8")
    return path


def read_corpus(corpus_dir: Union[str, Path]) -> Corpus:
    root = Path(corpus_dir)
    manifest = root / MANIFEST_NAME
    utts = []
    for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise ValueError(f"{manifest}:{lineno}: expected 3 tab-separated fields, got {len(fields)}")
        uid, wav_path, transcript = fields
        utts.append(Utterance(uid, read_wav(root / wav_path), transcript))
    alpha_file = root / "alphabet.txt"
    if alpha_file.exists():
        alphabet = alpha_file.read_text(encoding="utf-8").strip()
    else:
        alphabet = "".join(sorted({c for u in utts for c in u.transcript}))
    return Corpus(utts, alphabet)
