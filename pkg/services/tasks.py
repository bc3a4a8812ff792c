"""
Episode tensors and the interface every few-shot method implements.

A method only ever receives the labelled support set and the unlabelled
query features; query labels stay with the evaluator.
"""

import logging
import zlib
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, Mapping

import numpy as np
import torch

from services.exceptions import DimensionMismatch
from services.sampler import Episode

logger = logging.getLogger(__name__)


@dataclass
class TaskTensors:
    support_x: torch.Tensor  # [n_support, frames, mels]
    support_y: torch.Tensor  # [n_support, K]
    query_x: torch.Tensor    # [n_query, frames, mels]
    query_y: torch.Tensor    # [n_query, K]

    @property
    def ways(self) -> int:
        return self.support_y.shape[1]

    def to(self, device: torch.device) -> "TaskTensors":
        return TaskTensors(self.support_x.to(device), self.support_y.to(device),
                           self.query_x.to(device), self.query_y.to(device))


def materialize(episode: Episode, features: Mapping[str, np.ndarray],
                dtype: torch.dtype = torch.float32) -> TaskTensors:
    """Resolve clip ids to feature matrices"""
    def stack(items) -> torch.Tensor:
        try:
            arrays = [features[item.clip_id] for item in items]
        except KeyError as e:
            raise DimensionMismatch(f"No features for clip {e}")
        return torch.as_tensor(np.stack(arrays), dtype=dtype)

    return TaskTensors(
        support_x=stack(episode.support),
        support_y=torch.as_tensor(episode.support_labels(), dtype=dtype),
        query_x=stack(episode.query),
        query_y=torch.as_tensor(episode.query_labels(), dtype=dtype),
    )


class FewShotMethod(ABC):
    """A scorer for new tasks: support set in, [n_query x K] probabilities out"""

    name: str = "method"

    @abstractmethod
    def predict(self, support_x: torch.Tensor, support_y: torch.Tensor, query_x: torch.Tensor) -> torch.Tensor:
        ...

    def describe(self) -> Dict:
        return {"method": self.name}


class ConstantScorer(FewShotMethod):
    """Scores every query 0.5: chance-level reference"""

    name = "constant"

    def predict(self, support_x, support_y, query_x):
        return torch.full((query_x.shape[0], support_y.shape[1]), 0.5)


class RandomScorer(FewShotMethod):
    """Uniform random scores; each task draws from its own stream keyed on the seed and the task's tensors

    Scores for a task are the same whatever order or thread it is evaluated in.
    """

    name = "random"

    def __init__(self, seed: int = 0):
        self.seed = seed

    def task_generator(self, support_y: torch.Tensor, query_x: torch.Tensor) -> torch.Generator:
        key = zlib.crc32(query_x.detach().cpu().numpy().tobytes())
        key = zlib.crc32(support_y.detach().cpu().numpy().tobytes(), key)
        state = np.random.SeedSequence([self.seed, key]).generate_state(1, dtype=np.uint64)[0]
        return torch.Generator().manual_seed(int(state))

    def predict(self, support_x, support_y, query_x):
        generator = self.task_generator(support_y, query_x)
        return torch.rand(query_x.shape[0], support_y.shape[1], generator=generator)

    def describe(self) -> Dict:
        return {"method": self.name, "seed": self.seed}
