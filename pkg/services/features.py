"""
Log-mel filterbank energies and global CMVN.

Waveforms are length-normalised to the configured clip (zero-padded at the
end, centre-truncated when longer) before framing; the frame axis is then
padded with the log energy floor up to the config-derived frame count.
"""

import logging
from dataclasses import dataclass, asdict
from typing import Callable, Dict, Iterable, List, Optional

import librosa
import numpy as np

from schemas.models import FeatureConfig
from services.exceptions import TooShort, EmptyStream, DimensionMismatch, InvalidConfig
from services.ontology import ClipRecord

logger = logging.getLogger(__name__)

CMVN_EPSILON = 1e-8


def normalize_length(waveform: np.ndarray, target: int) -> np.ndarray:
    if len(waveform) >= target:
        start = (len(waveform) - target) // 2
        return waveform[start:start + target]
    return np.pad(waveform, (0, target - len(waveform)))


def mel_filterbank(config: FeatureConfig) -> np.ndarray:
    return librosa.filters.mel(sr=config.sample_rate, n_fft=config.win_length, n_mels=config.n_mels,
                               fmin=config.fmin, fmax=config.fmax)


def mel_center_frequencies(config: FeatureConfig) -> np.ndarray:
    """Centre frequency (Hz) of each mel bin"""
    fmax = config.fmax if config.fmax is not None else config.sample_rate / 2.0
    edges = librosa.mel_frequencies(n_mels=config.n_mels + 2, fmin=config.fmin, fmax=fmax)
    return edges[1:-1]


def log_mel(waveform: np.ndarray, config: FeatureConfig) -> np.ndarray:
    """Log mel-filterbank energies, shape [n_frames x n_mels], float32"""
    waveform = np.asarray(waveform, dtype=np.float64)
    if waveform.ndim != 1:
        raise DimensionMismatch("waveform must be mono (1-D)")
    if len(waveform) < config.win_length:
        raise TooShort(f"waveform has {len(waveform)} samples, one window needs {config.win_length}")
    if not np.all(np.isfinite(waveform)):
        raise InvalidConfig("waveform contains non-finite samples")

    waveform = normalize_length(waveform, config.clip_samples)
    spectrum = librosa.stft(waveform, n_fft=config.win_length, hop_length=config.hop_length,
                            win_length=config.win_length, window="hann", center=False)
    power = np.abs(spectrum) ** 2
    energies = mel_filterbank(config) @ power
    features = np.log(np.maximum(energies, config.energy_floor)).T

    n_frames = config.n_frames
    if features.shape[0] >= n_frames:
        features = features[:n_frames]
    else:
        pad = np.full((n_frames - features.shape[0], config.n_mels), np.log(config.energy_floor))
        features = np.vstack([features, pad])
    return features.astype(np.float32)


@dataclass
class CmvnStats:
    mean: np.ndarray
    variance: np.ndarray
    count: int

    @classmethod
    def from_frames(cls, frames: np.ndarray) -> "CmvnStats":
        frames = np.asarray(frames, dtype=np.float64)
        return cls(mean=frames.mean(axis=0), variance=frames.var(axis=0), count=frames.shape[0])

    def merge(self, other: "CmvnStats") -> "CmvnStats":
        """Combine partial moments (Chan et al. parallel update)"""
        if self.mean.shape != other.mean.shape:
            raise DimensionMismatch("cannot merge CMVN stats over different bins")
        total = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.count / total)
        m2 = self.variance * self.count + other.variance * other.count + delta ** 2 * self.count * other.count / total
        return CmvnStats(mean=mean, variance=m2 / total, count=total)

    def to_dict(self) -> Dict:
        return {"mean": self.mean.tolist(), "variance": self.variance.tolist(), "count": int(self.count)}

    @classmethod
    def from_dict(cls, data: Dict) -> "CmvnStats":
        stats = cls(mean=np.asarray(data["mean"], dtype=np.float64),
                    variance=np.asarray(data["variance"], dtype=np.float64),
                    count=int(data["count"]))
        if np.any(stats.variance < 0) or stats.count <= 0:
            raise InvalidConfig("CMVN stats need non-negative variance and positive count")
        return stats


def cmvn_fit(features: Iterable[np.ndarray]) -> CmvnStats:
    """Per-bin mean and (population) variance over every frame of every clip"""
    stats: Optional[CmvnStats] = None
    for matrix in features:
        matrix = np.asarray(matrix)
        if matrix.ndim != 2 or matrix.shape[0] == 0:
            continue
        partial = CmvnStats.from_frames(matrix)
        stats = partial if stats is None else stats.merge(partial)
    if stats is None:
        raise EmptyStream("cmvn_fit needs at least one frame")
    return stats


def cmvn_apply(features: np.ndarray, stats: CmvnStats, epsilon: float = CMVN_EPSILON) -> np.ndarray:
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[1] != stats.mean.shape[0]:
        raise DimensionMismatch(f"features {features.shape} vs CMVN over {stats.mean.shape[0]} bins")
    out = (features - stats.mean) / np.sqrt(stats.variance + epsilon)
    return out.astype(features.dtype if features.dtype.kind == "f" else np.float64)


def load_waveform(path: str, config: FeatureConfig) -> np.ndarray:
    waveform, _ = librosa.load(path, sr=config.sample_rate, mono=True)
    return waveform


def extract_features(clips: List[ClipRecord], load_audio: Callable[[ClipRecord], np.ndarray],
                     config: FeatureConfig, fit_on: Optional[Iterable[str]] = None) -> CmvnStats:
    """Compute log-mel features for every clip, fit CMVN on `fit_on` clip ids and normalise all clips in place"""
    for i, clip in enumerate(clips):
        clip.features = log_mel(load_audio(clip), config)
        if (i + 1) % 500 == 0:
            logger.info(f"Extracted features for {i + 1}/{len(clips)} clips")

    fit_ids = set(fit_on) if fit_on is not None else None
    stats = cmvn_fit(clip.features for clip in clips if fit_ids is None or clip.clip_id in fit_ids)
    for clip in clips:
        clip.features = cmvn_apply(clip.features, stats)
    logger.info(f"CMVN fitted on {stats.count} frames; applied to {len(clips)} clips")
    return stats
