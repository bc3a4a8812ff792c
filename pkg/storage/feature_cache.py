"""
On-disk dataset layout:

    <root>/vocabulary.json
    <root>/manifest.jsonl
    <root>/ontology.json        (optional; needed for domain splits)
    <root>/cmvn.json            (optional)
    <root>/features/<clip_id>.npy   float32 [frames x mel-bins]
"""

import logging
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from services.exceptions import CheckpointIoError, DimensionMismatch
from services.features import CmvnStats
from services.ontology import ClipRecord, EventVocabulary, OntologyForest
from storage.manifests import (
    read_json, write_json, load_ontology, load_vocabulary, read_manifest, save_ontology, save_vocabulary,
    write_manifest,
)

logger = logging.getLogger(__name__)


class FeatureStore(Mapping):
    """clip_id -> feature matrix, one .npy file per clip, loaded lazily and kept in memory"""

    def __init__(self, root: str, shape: Optional[Tuple[int, int]] = None):
        self.root = Path(root)
        self.shape = shape
        self._cache: Dict[str, np.ndarray] = {}

    def path_for(self, clip_id: str) -> Path:
        return self.root / f"{clip_id}.npy"

    def save(self, clip_id: str, features: np.ndarray) -> str:
        features = np.ascontiguousarray(features, dtype=np.float32)
        self._check(clip_id, features)
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.path_for(clip_id)
        np.save(path, features)
        self._cache[clip_id] = features
        return str(path)

    def _check(self, clip_id: str, features: np.ndarray):
        if features.ndim != 2 or (self.shape is not None and tuple(features.shape) != tuple(self.shape)):
            raise DimensionMismatch(f"Features for {clip_id} have shape {features.shape}, expected {self.shape}")

    def __getitem__(self, clip_id: str) -> np.ndarray:
        if clip_id not in self._cache:
            path = self.path_for(clip_id)
            if not path.exists():
                raise KeyError(clip_id)
            try:
                features = np.load(path).astype(np.float32, copy=False)
            except (OSError, ValueError) as e:
                raise CheckpointIoError(f"Cannot read features {path}: {e}")
            self._check(clip_id, features)
            self._cache[clip_id] = features
        return self._cache[clip_id]

    def __contains__(self, clip_id) -> bool:
        return clip_id in self._cache or self.path_for(clip_id).exists()

    def __iter__(self) -> Iterator[str]:
        return (path.stem for path in sorted(self.root.glob("*.npy")))

    def __len__(self) -> int:
        return sum(1 for _ in self.root.glob("*.npy"))


@dataclass
class Dataset:
    vocabulary: EventVocabulary
    clips: List[ClipRecord]
    features: Mapping
    forest: Optional[OntologyForest] = None
    cmvn: Optional[CmvnStats] = None


def save_dataset(root: str, vocabulary: EventVocabulary, clips: Sequence[ClipRecord],
                 forest: Optional[OntologyForest] = None, cmvn: Optional[CmvnStats] = None) -> str:
    """Write every clip's in-memory features plus the manifest files"""
    base = Path(root)
    store = FeatureStore(str(base / "features"))
    for clip in clips:
        if clip.features is None:
            raise DimensionMismatch(f"Clip {clip.clip_id} has no features to save")
        clip.feature_path = str(Path("features") / f"{clip.clip_id}.npy")
        store.save(clip.clip_id, clip.features)
    save_vocabulary(vocabulary, str(base / "vocabulary.json"))
    write_manifest(clips, str(base / "manifest.jsonl"))
    if forest is not None:
        save_ontology(forest, str(base / "ontology.json"))
    if cmvn is not None:
        write_json(str(base / "cmvn.json"), cmvn.to_dict())
    logger.info(f"Saved dataset with {len(clips)} clips to {root}")
    return str(base)


def load_dataset(root: str) -> Dataset:
    base = Path(root)
    if not (base / "manifest.jsonl").exists():
        raise CheckpointIoError(f"{root} has no manifest.jsonl")
    vocabulary = load_vocabulary(str(base / "vocabulary.json"))
    clips = read_manifest(str(base / "manifest.jsonl"), vocabulary)
    forest = load_ontology(str(base / "ontology.json")) if (base / "ontology.json").exists() else None
    cmvn = CmvnStats.from_dict(read_json(str(base / "cmvn.json"))) if (base / "cmvn.json").exists() else None
    logger.info(f"Loaded dataset from {root}: {len(vocabulary)} events, {len(clips)} clips")
    return Dataset(vocabulary=vocabulary, clips=clips, features=FeatureStore(str(base / "features")),
                   forest=forest, cmvn=cmvn)
