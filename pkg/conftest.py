import numpy as np
import pytest
import torch

from schemas.models import BackboneConfig, EpisodeConfig, ExperimentSpec, FeatureConfig, PretrainConfig, RunConfig
from services.sampler import split_classes
from services.synthetic import generate_synthetic_dataset, synthetic_ontology
from storage.feature_cache import save_dataset

TINY_FEATURES = FeatureConfig(n_mels=32, clip_seconds=0.32)
TINY_EPISODES = EpisodeConfig(ways=2, shots=1, query_positives=3, neg_support=3, neg_query=5)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture
def tiny_features() -> FeatureConfig:
    return TINY_FEATURES


@pytest.fixture
def tiny_backbone() -> BackboneConfig:
    return BackboneConfig.for_features(TINY_FEATURES, channels=[4, 8], embedding_dim=8)


@pytest.fixture
def tiny_dataset():
    """8 events x 12 clips, 32 frames x 32 mels, two pattern families"""
    return generate_synthetic_dataset(8, 12, 0.0, seed=0, n_domains=2, feature_config=TINY_FEATURES)


@pytest.fixture
def tiny_split(tiny_dataset):
    vocabulary, clips = tiny_dataset
    return split_classes(vocabulary, clips, (4, 2, 2), seed=0)


@pytest.fixture
def tiny_feature_map(tiny_dataset):
    _, clips = tiny_dataset
    return {clip.clip_id: clip.features for clip in clips}


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


@pytest.fixture
def small_run_config(tmp_path, tiny_backbone) -> str:
    """RunConfig file sized for the tiny dataset: 4/2/2 events, 2-way episodes, two pre-training epochs"""
    config = RunConfig(
        features=TINY_FEATURES,
        backbone=tiny_backbone,
        pretrain=PretrainConfig(epochs=2, batch_size=8),
        experiment=ExperimentSpec(name="small", shots=[1], methods=["nn"], class_sizes=(4, 2, 2), ways=2,
                                  query_positives=3, neg_support={1: 3}, neg_query=5),
    )
    path = tmp_path / "run_config.json"
    config.dump(str(path))
    return str(path)


@pytest.fixture
def tiny_data_dir(tmp_path, tiny_dataset) -> str:
    vocabulary, clips = tiny_dataset
    forest, _ = synthetic_ontology(len(vocabulary), 2)
    return save_dataset(str(tmp_path / "data"), vocabulary, clips, forest)
