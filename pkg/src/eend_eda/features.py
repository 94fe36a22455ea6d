"""Log-Mel features, frame splicing and subsampling, and feature/WAV file I/O.

Feature files are little-endian binary::

    uint32 T, uint32 F, float64 frame_period, then T*F float32 values (row-major)
"""
from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import get_window, resample_poly

SAMPLE_RATE = 8000
N_MELS = 23
CONTEXT = 7
LOG_FLOOR = 1e-10
_HEADER = struct.Struct("<IId")


class InputTooShortError(ValueError):
    """The clip is shorter than one analysis window."""


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).ravel()
        if self.samples.size == 0:
            raise ValueError("audio clip has no samples")


@dataclass
class FeatureSequence:
    frames: np.ndarray  # (T, F)
    frame_period: float

    def __post_init__(self):
        self.frames = np.atleast_2d(np.asarray(self.frames, dtype=np.float64))

    @property
    def num_frames(self):
        return self.frames.shape[0]

    @property
    def dim(self):
        return self.frames.shape[1]


def hz_to_mel(f):
    return 1127.0 * np.log1p(np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * np.expm1(np.asarray(m, dtype=np.float64) / 1127.0)


def mel_filterbank(n_mels=N_MELS, n_fft=256, sample_rate=SAMPLE_RATE, fmin=0.0, fmax=None):
    """Triangular filters (n_mels, n_fft // 2 + 1) equally spaced on the Mel scale."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def log_mel(clip, n_mels=N_MELS, win=0.025, hop=0.010, n_fft=256):
    """Per-frame log Mel-filterbank energies (T', n_mels) of a Hann-windowed power spectrum."""
    win_len = int(round(win * clip.sample_rate))
    hop_len = int(round(hop * clip.sample_rate))
    x = clip.samples
    if x.size < win_len:
        raise InputTooShortError(f"{x.size} samples is shorter than one {win_len}-sample window")
    n_frames = (x.size - win_len) // hop_len + 1
    idx = np.arange(win_len)[None, :] + hop_len * np.arange(n_frames)[:, None]
    frames = x[idx] * get_window("hann", win_len)
    power = np.abs(np.fft.rfft(frames, n=max(n_fft, win_len), axis=1)) ** 2
    fb = mel_filterbank(n_mels, max(n_fft, win_len), clip.sample_rate)
    return np.log(np.maximum(power @ fb.T, LOG_FLOOR))


def splice_subsample(raw, context=CONTEXT, factor=10, hop=0.010):
    """Concatenate each frame with ``context`` neighbours on both sides, then keep every ``factor``-th.

    Edges are padded by repeating the first/last frame.  Output has
    ceil(T' / factor) frames of (2 * context + 1) * dim values.
    """
    raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
    n = raw.shape[0]
    padded = np.pad(raw, ((context, context), (0, 0)), mode="edge")
    keep = np.arange(0, n, factor)
    win = np.arange(2 * context + 1)
    spliced = padded[keep[:, None] + win[None, :]].reshape(len(keep), -1)
    return FeatureSequence(spliced, hop * factor)


def mean_normalize(frames):
    """Subtract the per-recording mean of every feature dimension."""
    frames = np.asarray(frames, dtype=np.float64)
    return frames - frames.mean(axis=0, keepdims=True)


def featurize(clip, factor=10):
    if clip.sample_rate == 2 * SAMPLE_RATE:
        clip = decimate_by_two(clip)
    if clip.sample_rate != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz audio, got {clip.sample_rate} Hz")
    return splice_subsample(log_mel(clip), factor=factor)


def decimate_by_two(clip):
    """Anti-aliased 2:1 downsampling (16 kHz to 8 kHz)."""
    return AudioClip(resample_poly(clip.samples, 1, 2), clip.sample_rate // 2)


def read_wav(path):
    """16-bit PCM WAV as floats in [-1, 1); multiple channels are averaged."""
    with wave.open(str(path), "rb") as w:
        if w.getsampwidth() != 2:
            raise ValueError(f"{path}: only 16-bit PCM is supported")
        channels, rate = w.getnchannels(), w.getframerate()
        data = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
    samples = data.reshape(-1, channels).mean(axis=1) / 32768.0
    return AudioClip(samples, rate)


def write_wav(path, clip):
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(clip.sample_rate)
        w.writeframes(pcm.tobytes())


def write_features(path, seq):
    frames = np.asarray(seq.frames, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(frames.shape[0], frames.shape[1], float(seq.frame_period)))
        fh.write(np.ascontiguousarray(frames).tobytes())
    return Path(path)


def read_features(path):
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise ValueError(f"{path}: truncated feature header")
    n, dim, period = _HEADER.unpack_from(blob)
    body = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size)
    if body.size != n * dim:
        raise ValueError(f"{path}: expected {n * dim} values, found {body.size}")
    return FeatureSequence(body.reshape(n, dim).astype(np.float64), period)
