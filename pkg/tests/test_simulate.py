import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eend_eda.features import read_features
from eend_eda.rttm import Annotation, Segment, rasterize, read_labels, read_rttm, segmentize
from eend_eda.scoring import der
from eend_eda.simulate import (FEATURE_DIM, SimConfig, SyntheticSpeakerProfile, build_mixture,
                               mixture_timing, overlap_ratio, sample_gaps, write_corpus)


def corpus_overlap(beta, count=200, num_speakers=2, seed=0):
    cfg = SimConfig(num_speakers=num_speakers, beta=beta, num_mixtures=count, seed=seed)
    return overlap_ratio([mixture_timing(cfg, i)[0] for i in range(count)])


class TestGaps:
    def test_mean_two(self):
        gaps = sample_gaps(10_000, 2.0, np.random.default_rng(0))
        assert abs(gaps.mean() - 2.0) < 0.1 and np.all(gaps >= 0)

    def test_five_speaker_beta(self):
        gaps = sample_gaps(10_000, 13.0, np.random.default_rng(1))
        assert abs(gaps.mean() - 13.0) < 0.65

    def test_deterministic(self):
        a = sample_gaps(50, 2.0, np.random.default_rng(7))
        assert np.array_equal(a, sample_gaps(50, 2.0, np.random.default_rng(7)))

    def test_nonpositive_beta(self):
        with pytest.raises(ValueError):
            sample_gaps(3, 0.0, np.random.default_rng(0))
        with pytest.raises(ValueError):
            SimConfig(beta=-1.0)


class TestOverlapRatio:
    def test_coincident(self):
        ann = Annotation("r", [Segment("a", 1.0, 2.0), Segment("b", 1.0, 2.0)])
        assert overlap_ratio(ann) == 100.0

    def test_disjoint(self):
        ann = Annotation("r", [Segment("a", 0.0, 1.0), Segment("b", 2.0, 1.0)])
        assert overlap_ratio(ann) == 0.0

    def test_no_speech(self):
        with pytest.raises(ValueError):
            overlap_ratio(Annotation("r", []))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_matches_millisecond_raster(self, seed):
        rng = np.random.default_rng(seed)
        segs = [Segment(f"s{k}", float(rng.uniform(0, 20)), float(rng.uniform(0.05, 5)))
                for k in range(3) for _ in range(int(rng.integers(1, 5)))]
        ann = Annotation("r", segs)
        n = int(np.ceil(ann.end() * 1000)) + 1
        counts = np.zeros(n, dtype=int)
        for spk in {s.speaker for s in segs}:
            on = np.zeros(n, dtype=bool)
            for s in segs:
                if s.speaker == spk:
                    on[int(round(s.onset * 1000)):int(round(s.offset * 1000))] = True
            counts += on
        brute = 100.0 * (counts >= 2).sum() / (counts >= 1).sum()
        assert abs(overlap_ratio(ann) - brute) < 0.1


class TestCorpusStatistics:
    def test_single_speaker_never_overlaps(self):
        assert corpus_overlap(2.0, count=50, num_speakers=1) == 0.0

    def test_two_speaker_overlap_target(self):
        assert 30.0 <= corpus_overlap(2.0) <= 38.0

    def test_overlap_falls_with_beta(self):
        ratios = [corpus_overlap(b, num_speakers=2) for b in (2.0, 3.0, 5.0)]
        assert ratios[0] > ratios[1] > ratios[2]

    def test_utterance_ranges(self):
        cfg = SimConfig()
        for i in range(20):
            ann = mixture_timing(cfg, i)[0]
            for spk in ann.speakers:
                segs = [s for s in ann.segments if s.speaker == spk]
                assert 10 <= len(segs) <= 30
                assert all(1.0 - 1e-9 <= s.duration <= 5.0 + 1e-9 for s in segs)

    def test_crop(self):
        cfg = SimConfig(crop=50.0)
        for i in range(10):
            mix = build_mixture(cfg, i)
            assert mix.annotation.end() <= 50.0 + 1e-9 and mix.features.num_frames == 500


class TestMixture:
    def test_reference_scores_perfectly_against_itself(self):
        mix = build_mixture(SimConfig(), 3)
        act = rasterize(mix.annotation, 0.1, mix.features.num_frames)
        ann = segmentize(act, mix.recording_id)
        assert der(ann, ann, collar=0.0).der == 0.0
        assert der(mix.annotation, mix.annotation, collar=0.0).der == 0.0

    def test_feature_shape_and_finite(self):
        mix = build_mixture(SimConfig(num_speakers=3), 0)
        assert mix.features.dim == FEATURE_DIM and mix.features.frame_period == 0.1
        assert np.all(np.isfinite(mix.features.frames))
        assert len(mix.annotation.speakers) == 3

    def test_active_frames_carry_speaker_energy(self):
        mix = build_mixture(SimConfig(), 1)
        act = rasterize(mix.annotation, 0.1, mix.features.num_frames).matrix
        level = mix.features.frames.mean(axis=1)
        assert level[act.any(axis=0)].mean() > level[~act.any(axis=0)].mean() + 1.0

    def test_deterministic(self):
        a, b = build_mixture(SimConfig(seed=5), 2), build_mixture(SimConfig(seed=5), 2)
        assert a.annotation == b.annotation and np.array_equal(a.features.frames, b.features.frames)

    def test_seed_changes_output(self):
        a, b = build_mixture(SimConfig(seed=5), 2), build_mixture(SimConfig(seed=6), 2)
        assert a.annotation != b.annotation

    def test_distinct_profiles(self):
        keys = [(0, i, k) for i in range(5) for k in range(3)]
        means = [SyntheticSpeakerProfile.from_key(k).mean for k in keys]
        for i in range(len(means)):
            for j in range(i + 1, len(means)):
                assert not np.array_equal(means[i], means[j])

    def test_speaker_pool(self):
        cfg = SimConfig(speaker_pool=4, num_mixtures=10)
        names = {s for i in range(10) for s in mixture_timing(cfg, i)[0].speakers}
        assert names <= {f"spk{i}" for i in range(4)}

    def test_waveform_mode(self):
        mix = build_mixture(SimConfig(mode="waveform", crop=6.0, min_utterances=2, max_utterances=3), 0)
        assert mix.audio.sample_rate == 8000
        assert np.max(np.abs(mix.audio.samples)) < 1.0
        assert mix.features.dim == 345 and mix.features.frame_period == pytest.approx(0.1)
        assert np.all(np.isfinite(mix.features.frames))


def digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_corpus_regeneration_is_byte_identical(tmp_path):
    cfg = SimConfig(num_mixtures=4, crop=20.0, seed=9)
    write_corpus(cfg, tmp_path / "a")
    write_corpus(cfg, tmp_path / "b", jobs=2)
    assert digest(tmp_path / "a") == digest(tmp_path / "b")


def test_corpus_layout(tmp_path):
    cfg = SimConfig(num_mixtures=3, crop=15.0)
    manifest = write_corpus(cfg, tmp_path)
    lines = manifest.read_text().splitlines()
    assert len(lines) == 3
    refs = {a.recording_id: a for a in read_rttm(tmp_path / "ref.rttm")}
    for line in lines:
        feat, lab, rec = line.split("\t")
        feats = read_features(tmp_path / feat)
        labels = read_labels(tmp_path / lab)
        assert labels.num_frames == feats.num_frames
        assert rasterize(refs[rec], 0.1, feats.num_frames, labels.speakers).matrix.tolist() == \
            labels.matrix.tolist()
    assert json.loads((tmp_path / "sim_config.json").read_text())["num_mixtures"] == 3


def test_waveform_corpus(tmp_path):
    cfg = SimConfig(num_mixtures=1, mode="waveform", crop=5.0, min_utterances=2, max_utterances=2)
    write_corpus(cfg, tmp_path)
    assert len(list((tmp_path / "wav").glob("*.wav"))) == 1
