import numpy as np
import pytest
from pydantic import ValidationError

from schemas.models import FeatureConfig
from services.exceptions import DimensionMismatch, EmptyStream, TooShort
from services.features import (
    CmvnStats, cmvn_apply, cmvn_fit, extract_features, log_mel, mel_center_frequencies, normalize_length,
)
from services.ontology import ClipRecord

CONFIG = FeatureConfig()


def tone(frequency: float, seconds: float = 10.0, sample_rate: int = 16000) -> np.ndarray:
    t = np.arange(int(seconds * sample_rate)) / sample_rate
    return 0.5 * np.sin(2 * np.pi * frequency * t)


def test_frame_count_and_padding():
    features = log_mel(tone(440.0), CONFIG)
    assert features.shape == (1000, 64)
    assert features.dtype == np.float32
    # 160000 samples give floor((160000 - 400) / 160) + 1 = 998 frames, the rest is floor padding
    np.testing.assert_allclose(features[998:], np.log(CONFIG.energy_floor), rtol=1e-6)
    assert np.all(features[:998].max(axis=1) > np.log(CONFIG.energy_floor))


def test_tone_peaks_in_matching_mel_bin():
    features = log_mel(tone(1000.0), CONFIG)
    peak = int(np.argmax(features[:998].mean(axis=0)))
    centers = mel_center_frequencies(CONFIG)
    assert centers[max(peak - 1, 0)] <= 1000.0 <= centers[min(peak + 1, len(centers) - 1)]


def test_silence_is_the_energy_floor():
    features = log_mel(np.zeros(16000 * 10), CONFIG)
    np.testing.assert_allclose(features, np.log(CONFIG.energy_floor), rtol=1e-6)


def test_short_and_multichannel_input_rejected():
    with pytest.raises(TooShort):
        log_mel(np.zeros(CONFIG.win_length - 1), CONFIG)
    with pytest.raises(DimensionMismatch):
        log_mel(np.zeros((2, 16000)), CONFIG)


def test_normalize_length_pads_and_centre_truncates():
    np.testing.assert_array_equal(normalize_length(np.arange(3.0), 5), [0, 1, 2, 0, 0])
    np.testing.assert_array_equal(normalize_length(np.arange(6.0), 2), [2, 3])


def test_feature_config_invariants():
    with pytest.raises(ValidationError):
        FeatureConfig(window_ms=10.0, hop_ms=10.0)
    with pytest.raises(ValidationError):
        FeatureConfig(n_mels=0)
    assert CONFIG.n_frames == 1000


def test_cmvn_constant_clip():
    stats = cmvn_fit([np.full((10, 4), 3.0)])
    np.testing.assert_allclose(stats.mean, 3.0)
    np.testing.assert_allclose(stats.variance, 0.0)
    assert stats.count == 10


def test_cmvn_two_point_distribution():
    stats = cmvn_fit([np.zeros((5, 3)), np.full((5, 3), 2.0)])
    np.testing.assert_allclose(stats.mean, 1.0)
    np.testing.assert_allclose(stats.variance, 1.0)


def test_cmvn_matches_two_pass_oracle(rng):
    clips = [rng.normal(loc=i, scale=1 + i, size=(20 + 7 * i, 6)) for i in range(5)]
    frames = np.vstack(clips)
    mean = frames.sum(axis=0) / len(frames)
    variance = ((frames - mean) ** 2).sum(axis=0) / len(frames)
    stats = cmvn_fit(iter(clips))
    np.testing.assert_allclose(stats.mean, mean, rtol=1e-10)
    np.testing.assert_allclose(stats.variance, variance, rtol=1e-10)


def test_cmvn_apply_standardises(rng):
    clip = rng.normal(5.0, 3.0, size=(200, 4))
    normalised = cmvn_apply(clip, cmvn_fit([clip]))
    np.testing.assert_allclose(normalised.mean(axis=0), 0.0, atol=1e-8)
    np.testing.assert_allclose(normalised.var(axis=0), 1.0, rtol=1e-6)


def test_cmvn_errors():
    with pytest.raises(EmptyStream):
        cmvn_fit([])
    with pytest.raises(DimensionMismatch):
        cmvn_apply(np.zeros((3, 5)), cmvn_fit([np.zeros((3, 4))]))


def test_cmvn_stats_round_trip():
    stats = cmvn_fit([np.arange(12.0).reshape(4, 3)])
    restored = CmvnStats.from_dict(stats.to_dict())
    np.testing.assert_allclose(restored.mean, stats.mean)
    assert restored.count == 4


def test_extract_features_fits_cmvn_on_given_clips_only():
    config = FeatureConfig(clip_seconds=0.5, n_mels=16)
    clips = [ClipRecord(f"c{i}", [1]) for i in range(3)]
    waves = {"c0": tone(500.0, 0.5), "c1": tone(2000.0, 0.5), "c2": 10 * tone(4000.0, 0.5)}
    stats = extract_features(clips, lambda clip: waves[clip.clip_id], config, fit_on=["c0", "c1"])
    assert stats.count == 2 * config.n_frames
    fitted = np.vstack([clips[0].features, clips[1].features])
    np.testing.assert_allclose(fitted.mean(axis=0), 0.0, atol=1e-4)
    assert clips[2].features.shape == (config.n_frames, 16)
