"""
ROC-AUC per task and evaluation of a method over a frozen meta-set.

Task AUC is the mean of per-event AUCs over the query rows (pooled mode
flattens all (query, event) pairs instead).
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np
import torch
from scipy.stats import rankdata

from services.exceptions import DegenerateLabels, ShapeMismatch
from services.sampler import Episode
from services.tasks import FewShotMethod, materialize

logger = logging.getLogger(__name__)


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """P(random positive outranks random negative), ties count 1/2 (Mann-Whitney U / (n1 n0))"""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ShapeMismatch(f"{scores.shape[0]} scores for {labels.shape[0]} labels")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("ROC-AUC needs at least one positive and one negative label")
    ranks = rankdata(scores)  # midranks for ties
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def task_auc(probabilities: np.ndarray, labels: np.ndarray, pooled: bool = False) -> float:
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels)
    if probabilities.shape != labels.shape or probabilities.ndim != 2:
        raise ShapeMismatch(f"probabilities {probabilities.shape} vs labels {labels.shape}")
    if pooled:
        return roc_auc(probabilities.ravel(), labels.ravel())
    return float(np.mean([roc_auc(probabilities[:, k], labels[:, k]) for k in range(labels.shape[1])]))


@dataclass
class EvalResult:
    method: str
    per_task_auc: List[float]
    setting: str = ""
    seed: int = 0
    config: Dict[str, Any] = field(default_factory=dict)

    @property
    def mean_auc(self) -> float:
        return float(np.mean(self.per_task_auc)) if self.per_task_auc else float("nan")

    @property
    def std_error(self) -> float:
        n = len(self.per_task_auc)
        if n < 2:
            return 0.0
        return float(np.std(self.per_task_auc, ddof=1) / math.sqrt(n))

    def to_dict(self) -> Dict:
        result = asdict(self)
        result["mean_auc"] = self.mean_auc
        result["std_error"] = self.std_error
        return result

    @classmethod
    def from_dict(cls, data: Dict) -> "EvalResult":
        return cls(method=data["method"], per_task_auc=list(data["per_task_auc"]),
                   setting=data.get("setting", ""), seed=int(data.get("seed", 0)),
                   config=data.get("config", {}))


def score_episode(method: FewShotMethod, episode: Episode, features: Mapping[str, np.ndarray],
                  pooled: bool = False) -> float:
    task = materialize(episode, features)
    # the method sees the support set and query features only
    probabilities = method.predict(task.support_x, task.support_y, task.query_x)
    probabilities = probabilities.detach().cpu().numpy() if isinstance(probabilities, torch.Tensor) else probabilities
    if probabilities.shape != tuple(task.query_y.shape):
        raise ShapeMismatch(f"{method.name} returned {probabilities.shape}, expected {tuple(task.query_y.shape)}")
    return task_auc(probabilities, task.query_y.numpy(), pooled=pooled)


def evaluate_method(method: FewShotMethod, meta_test: Sequence[Episode], features: Mapping[str, np.ndarray],
                    setting: str = "", seed: int = 0, pooled: bool = False, workers: int = 1,
                    config: Optional[Dict[str, Any]] = None) -> EvalResult:
    """Score every episode; any failing episode aborts the run"""
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_task = list(pool.map(lambda ep: score_episode(method, ep, features, pooled), meta_test))
    else:
        per_task = [score_episode(method, episode, features, pooled) for episode in meta_test]

    result = EvalResult(method=method.name, per_task_auc=per_task, setting=setting, seed=seed,
                        config=config if config is not None else method.describe())
    logger.info(f"Evaluated {method.name} [{setting}] on {len(per_task)} tasks: "
                f"mean AUC {result.mean_auc:.4f} +/- {result.std_error:.4f}")
    return result
