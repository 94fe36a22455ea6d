"""Simulated multi-talker mixtures.

Each speaker gets a sequence of utterances, every utterance preceded by a
silence whose length is exponentially distributed with mean ``beta``; the
speaker tracks are then mixed.  Larger ``beta`` gives less overlap.

Two signal models stand in for real single-speaker corpora:

* ``feature``: frames are drawn directly in a 345-dim log-energy-like space.
  Each speaker has a Gaussian mean vector; active speakers and a noise floor
  are combined by adding linear energies (``logaddexp``), so an overlapped
  frame is close to the element-wise maximum of its sources.
* ``waveform``: 8 kHz audio from a harmonic source at the speaker's
  fundamental frequency, shaped by formant-like resonators and a syllabic
  envelope, plus low-level white noise.  Features are then extracted with
  the regular front end.
"""
from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .features import SAMPLE_RATE, AudioClip, FeatureSequence, featurize, write_features, write_wav
from .rttm import Annotation, Segment, rasterize, write_labels, write_rttm
from .scoring import to_ticks

FEATURE_DIM = 345
NOISE_LEVEL = -3.0  # mean log energy of the feature-mode noise floor
NOISE_SD = 1.0
WITHIN_SPEAKER_SD = 1.0
SPEAKER_MEAN_SD = 1.0


@dataclass
class SimConfig:
    num_speakers: int = 2
    num_mixtures: int = 100
    beta: float = 2.0
    min_utterances: int = 10
    max_utterances: int = 30
    min_duration: float = 1.0
    max_duration: float = 5.0
    seed: int = 0
    mode: str = "feature"
    crop: float = 0.0  # truncate every mixture to this many seconds (0: no cropping)
    frame_period: float = 0.1
    speaker_pool: int = 0  # 0: fresh speakers for every mixture
    speaker_seed: int = -1  # seeds the speaker profiles; -1 means use ``seed``

    def __post_init__(self):
        if self.num_speakers < 1:
            raise ValueError("need at least one speaker")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.mode not in ("feature", "waveform"):
            raise ValueError(f"unknown simulation mode {self.mode!r}")
        if not 1 <= self.min_utterances <= self.max_utterances:
            raise ValueError("invalid utterance-count range")
        if not 0 < self.min_duration <= self.max_duration:
            raise ValueError("invalid utterance-duration range")
        if self.speaker_pool and self.speaker_pool < self.num_speakers:
            raise ValueError("speaker pool smaller than the number of speakers per mixture")

    @property
    def profile_seed(self):
        return self.seed if self.speaker_seed < 0 else self.speaker_seed


@dataclass(frozen=True)
class SyntheticSpeakerProfile:
    key: tuple
    mean: np.ndarray  # feature-mode mean vector
    f0: float  # waveform-mode fundamental frequency, Hz
    formants: tuple  # waveform-mode resonance centers, Hz

    @classmethod
    def from_key(cls, key, feat_dim=FEATURE_DIM):
        rng = np.random.default_rng(list(key))
        mean = rng.normal(0.0, SPEAKER_MEAN_SD, feat_dim)
        f0 = float(rng.uniform(90.0, 260.0))
        formants = tuple(float(f) for f in np.sort(rng.uniform([300, 900, 2000], [900, 2200, 3500])))
        return cls(tuple(key), mean, f0, formants)


@dataclass
class Mixture:
    recording_id: str
    annotation: Annotation
    features: FeatureSequence
    audio: AudioClip | None = None


def sample_gaps(count, beta, rng):
    """``count`` i.i.d. exponential silences with mean ``beta`` seconds."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    return rng.exponential(beta, size=count)


def speaker_track(config, rng):
    """(onset, offset) pairs of one speaker's utterances, each preceded by a silence."""
    n = int(rng.integers(config.min_utterances, config.max_utterances + 1))
    gaps = sample_gaps(n, config.beta, rng)
    durations = rng.uniform(config.min_duration, config.max_duration, size=n)
    offsets = np.cumsum(gaps + durations)
    return list(zip(offsets - durations, offsets))


def recording_id(config, index):
    return f"sim{config.num_speakers}spk_b{config.beta:g}_s{config.seed}_{index:05d}"


def mixture_speakers(config, index, rng):
    if config.speaker_pool:
        ids = rng.choice(config.speaker_pool, size=config.num_speakers, replace=False)
        keys = [(config.profile_seed, int(i)) for i in ids]
    else:
        keys = [(config.profile_seed, index, k) for k in range(config.num_speakers)]
    return keys


def mixture_timing(config, index):
    """Reference annotation of mixture ``index`` plus what is needed to render its signal.

    Returns ``(annotation, names, keys, end, rng)``; the random stream
    depends only on (seed, index) and continues into signal rendering.
    """
    rng = np.random.default_rng([config.seed, index])
    keys = mixture_speakers(config, index, rng)
    names = ["spk" + "-".join(str(k) for k in key[1:]) for key in keys]
    tracks = [speaker_track(config, rng) for _ in keys]
    end = max(t[-1][1] for t in tracks)
    if config.crop > 0:
        end = min(end, config.crop)
    segments = []
    for name, track in zip(names, tracks):
        for on, off in track:
            if on < end:
                segments.append(Segment(name, float(on), float(min(off, end) - on)))
    segments.sort(key=lambda s: (s.onset, s.speaker))
    return Annotation(recording_id(config, index), segments), names, keys, end, rng


def build_mixture(config, index):
    """Mixture number ``index`` of the corpus: signal, features and exact reference."""
    annotation, names, keys, end, rng = mixture_timing(config, index)
    profiles = [SyntheticSpeakerProfile.from_key(k) for k in keys]
    rec = annotation.recording_id
    if config.mode == "feature":
        feats = _feature_signal(config, annotation, names, profiles, end, rng)
        return Mixture(rec, annotation, feats)
    audio = _waveform_signal(annotation, names, profiles, end, rng)
    return Mixture(rec, annotation, featurize(audio), audio)


def _feature_signal(config, annotation, names, profiles, end, rng):
    n_frames = max(int(np.ceil(end / config.frame_period - 1e-9)), 1)
    active = rasterize(annotation, config.frame_period, n_frames, names).matrix.astype(bool)
    out = rng.normal(NOISE_LEVEL, NOISE_SD, (n_frames, FEATURE_DIM))
    for row, prof in zip(active, profiles):
        draw = prof.mean + rng.normal(0.0, WITHIN_SPEAKER_SD, (n_frames, FEATURE_DIM))
        out[row] = np.logaddexp(out[row], draw[row])
    return FeatureSequence(out, config.frame_period)


def _utterance_wave(prof, n, rng):
    t = np.arange(n) / SAMPLE_RATE
    vibrato = 1.0 + 0.03 * np.sin(2 * np.pi * rng.uniform(3, 6) * t + rng.uniform(0, 2 * np.pi))
    phase = 2 * np.pi * np.cumsum(prof.f0 * vibrato) / SAMPLE_RATE
    src = sum(np.sin(k * phase) / k for k in range(1, int(SAMPLE_RATE / 2 / (prof.f0 * 1.05))))
    for fc in prof.formants:
        r = 0.97
        theta = 2 * np.pi * fc / SAMPLE_RATE
        src = lfilter([1 - r], [1, -2 * r * np.cos(theta), r * r], src)
    envelope = 0.55 + 0.45 * np.sin(2 * np.pi * rng.uniform(3, 5) * t + rng.uniform(0, 2 * np.pi))
    return src * envelope / (np.max(np.abs(src)) + 1e-12)


def _waveform_signal(annotation, names, profiles, end, rng):
    total = int(np.ceil(end * SAMPLE_RATE))
    mix = np.zeros(total)
    lookup = dict(zip(names, profiles))
    for seg in annotation.segments:
        a = int(round(seg.onset * SAMPLE_RATE))
        b = min(int(round(seg.offset * SAMPLE_RATE)), total)
        if b > a:
            mix[a:b] += 0.3 * _utterance_wave(lookup[seg.speaker], b - a, rng)
    mix += rng.normal(0.0, 1e-3, total)
    return AudioClip(np.clip(mix, -1.0, 1.0 - 1.0 / 32768), SAMPLE_RATE)


def _union_ticks(segments):
    out = []
    for a, b in sorted(segments):
        if out and a <= out[-1][1]:
            out[-1][1] = max(out[-1][1], b)
        else:
            out.append([a, b])
    return out


def overlap_ratio(annotations):
    """Percent of speech time (at least one speaker) with two or more speakers active."""
    if isinstance(annotations, Annotation):
        annotations = [annotations]
    overlapped = speech = 0
    for ann in annotations:
        per_spk = {}
        for seg in ann.segments:
            per_spk.setdefault(seg.speaker, []).append((to_ticks(seg.onset), to_ticks(seg.offset)))
        events = []
        for ivs in per_spk.values():
            for a, b in _union_ticks(ivs):
                events += [(a, 1), (b, -1)]
        events.sort()
        count, prev = 0, None
        for t, delta in events:
            if prev is not None and t > prev:
                if count >= 1:
                    speech += t - prev
                if count >= 2:
                    overlapped += t - prev
            count += delta
            prev = t
    if speech == 0:
        raise ValueError("overlap ratio is undefined without speech")
    return 100.0 * overlapped / speech


def _write_one(args):
    config, index, out = args
    mix = build_mixture(config, index)
    rec = mix.recording_id
    feat_path = out / "feats" / f"{rec}.feat"
    write_features(feat_path, mix.features)
    if mix.audio is not None:
        write_wav(out / "wav" / f"{rec}.wav", mix.audio)
    names = mix.annotation.speakers
    labels = rasterize(mix.annotation, mix.features.frame_period, mix.features.num_frames, names)
    write_labels(out / "labels" / f"{rec}.lab", labels)
    return mix.annotation


def write_corpus(config, out_dir, jobs=1):
    """Write features, frame labels, reference RTTM and a manifest; returns the manifest path.

    Output depends only on ``config`` (not on ``jobs``), byte for byte.
    """
    out = Path(out_dir)
    for sub in ("feats", "labels") + (("wav",) if config.mode == "waveform" else ()):
        (out / sub).mkdir(parents=True, exist_ok=True)
    tasks = [(config, i, out) for i in range(config.num_mixtures)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            annotations = list(pool.map(_write_one, tasks))
    else:
        annotations = [_write_one(t) for t in tasks]
    write_rttm(out / "ref.rttm", annotations)
    lines = [f"feats/{a.recording_id}.feat\tlabels/{a.recording_id}.lab\t{a.recording_id}" for a in annotations]
    manifest = out / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    (out / "sim_config.json").write_text(json.dumps(asdict(config), sort_keys=True, indent=1) + "\n")
    return manifest
