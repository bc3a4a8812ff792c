"""
Supervised baselines: pre-training over the aggregated training classes,
fine-tuning on a task's support set (FT-All / FT-Linear) and the
nearest-neighbour scorer.

NN probabilities: for each query q and event k,
    d^t_k = mean over support samples with y_k = t of dist(f(x_s), f(x_q))
    p(y_k = 1) = exp(-d^1_k) / (exp(-d^0_k) + exp(-d^1_k))
"""

import logging
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from schemas.models import BackboneConfig, FinetuneConfig, PretrainConfig
from services.backbone import (
    EventDetector, LossWeights, TrainStep, build_optimizer, clone_model, detect_scores, embed,
    frozen_batch_norm, gd_train, inference_mode, init_head, weighted_bce_with_logits,
)
from services.evaluation import evaluate_method
from services.exceptions import InvalidConfig, NoNegativeSupport, NoPositiveSupport, ShapeMismatch
from services.sampler import Episode, Partition
from services.tasks import FewShotMethod

logger = logging.getLogger(__name__)


class DistanceMetric(str, Enum):
    L2 = "l2"
    COSINE = "cosine"
    DOT = "dot"
    SQEUCLIDEAN = "sqeuclidean"


class FinetuneMode(str, Enum):
    ALL = "all"
    LINEAR = "linear"


def _safe_sqrt(x: torch.Tensor) -> torch.Tensor:
    # exact zero (and zero gradient) at coincident points
    positive = x > 0
    return torch.where(positive, torch.sqrt(torch.where(positive, x, torch.ones_like(x))), torch.zeros_like(x))


def pairwise_distance(a: torch.Tensor, b: torch.Tensor, metric: Union[str, DistanceMetric]) -> torch.Tensor:
    """[n, d] x [m, d] -> [n, m]"""
    metric = DistanceMetric(metric)
    if a.dim() != 2 or b.dim() != 2 or a.shape[1] != b.shape[1]:
        raise ShapeMismatch(f"cannot compare embeddings {tuple(a.shape)} and {tuple(b.shape)}")
    if metric in (DistanceMetric.L2, DistanceMetric.SQEUCLIDEAN):
        squared = ((a.unsqueeze(1) - b.unsqueeze(0)) ** 2).sum(dim=-1)
        return squared if metric == DistanceMetric.SQEUCLIDEAN else _safe_sqrt(squared)
    if metric == DistanceMetric.COSINE:
        return 1.0 - F.normalize(a, dim=-1) @ F.normalize(b, dim=-1).T
    return -(a @ b.T)


def nn_distances(query_embedding: torch.Tensor, support_embedding: torch.Tensor, support_y: torch.Tensor,
                 metric: Union[str, DistanceMetric] = DistanceMetric.COSINE) -> Tuple[torch.Tensor, torch.Tensor]:
    """Average distance of every query to the negative (d0) and positive (d1) support of each event

    Returns two [n_query, K] tensors.
    """
    if support_y.dim() != 2 or support_y.shape[0] != support_embedding.shape[0]:
        raise ShapeMismatch(f"support labels {tuple(support_y.shape)} vs {support_embedding.shape[0]} samples")
    positive = (support_y > 0.5).to(query_embedding.dtype)
    negative = 1.0 - positive
    n_pos = positive.sum(dim=0)
    n_neg = negative.sum(dim=0)
    for k in range(support_y.shape[1]):
        if n_pos[k] == 0:
            raise NoPositiveSupport(k)
        if n_neg[k] == 0:
            raise NoNegativeSupport(k)

    distances = pairwise_distance(query_embedding, support_embedding, metric)
    d1 = distances @ positive / n_pos
    d0 = distances @ negative / n_neg
    return d0, d1


def nn_probability(d0, d1) -> torch.Tensor:
    """softmax over (-d0, -d1), second component"""
    d0 = d0 if isinstance(d0, torch.Tensor) else torch.as_tensor(d0, dtype=torch.float64)
    d1 = torch.as_tensor(d1, dtype=d0.dtype, device=d0.device)
    return torch.softmax(torch.stack([-d0, -d1], dim=-1), dim=-1)[..., 1]


def nn_predict_episode(model: nn.Module, support_x: torch.Tensor, support_y: torch.Tensor,
                       query_x: torch.Tensor, metric: Union[str, DistanceMetric] = DistanceMetric.COSINE) -> torch.Tensor:
    support_embedding = embed(support_x, model)
    query_embedding = embed(query_x, model)
    d0, d1 = nn_distances(query_embedding, support_embedding, support_y, metric)
    return nn_probability(d0, d1)


# Pre-training
def _stack(partition: Partition, features: Mapping[str, np.ndarray], rows: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(np.stack([features[partition.clips[i].clip_id] for i in rows]), dtype=torch.float32)


def _held_out_loss(model: EventDetector, x: torch.Tensor, y: torch.Tensor, weights: LossWeights,
                   batch_size: int) -> float:
    total = 0.0
    with inference_mode(model), torch.no_grad():
        for start in range(0, x.shape[0], batch_size):
            logits = model(x[start:start + batch_size])
            total += float(weighted_bce_with_logits(logits, y[start:start + batch_size], weights, reduction="sum"))
    return total / x.shape[0]


def pretrain_detector(partition: Partition, features: Mapping[str, np.ndarray], config: PretrainConfig,
                      backbone: BackboneConfig, seed: int = 0,
                      history: Optional[List[TrainStep]] = None) -> EventDetector:
    """|C_train|-way detector trained on every training clip; best held-out epoch is returned"""
    if not partition.events or len(partition.clips) < 2:
        raise InvalidConfig(f"Pre-training needs a non-empty training partition "
                            f"({len(partition.events)} events, {len(partition.clips)} clips)")

    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    columns = partition.vocabulary.indices(partition.events)
    labels = torch.as_tensor(partition.label_matrix()[:, columns], dtype=torch.float32)

    order = rng.permutation(len(partition.clips))
    n_hold = min(len(order) - 1, max(1, int(round(config.holdout_fraction * len(order)))))
    hold_rows, train_rows = order[:n_hold], order[n_hold:]
    hold_x, hold_y = _stack(partition, features, hold_rows), labels[hold_rows]
    train_x, train_y = _stack(partition, features, train_rows), labels[train_rows]

    model = EventDetector(backbone, n_out=len(partition.events))
    model.head = init_head(backbone.embedding_dim, len(partition.events), rng)
    weights = LossWeights.uniform(len(partition.events), config.pos_weight)
    optimizer = build_optimizer(model.parameters(), config.optimizer, config.lr)

    def loss_fn(m, batch):
        x, y = batch
        return weighted_bce_with_logits(m(x), y, weights)

    best_loss = _held_out_loss(model, hold_x, hold_y, weights, config.batch_size)
    initial_loss = best_loss
    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    stale = 0
    logger.info(f"Pre-training {len(partition.events)}-way detector on {len(train_rows)} clips "
                f"({n_hold} held out), initial held-out BCE {initial_loss:.4f}")

    for epoch in range(config.epochs):
        perm = torch.as_tensor(rng.permutation(len(train_rows)))
        batches = [(train_x[perm[i:i + config.batch_size]], train_y[perm[i:i + config.batch_size]])
                   for i in range(0, len(train_rows), config.batch_size)]
        model.train()
        gd_train(model, loss_fn, batches, steps=len(batches), lr=config.lr, optimizer=optimizer, history=history)

        held_out = _held_out_loss(model, hold_x, hold_y, weights, config.batch_size)
        logger.info(f"epoch {epoch + 1}/{config.epochs} held-out BCE {held_out:.4f}")
        if held_out < best_loss:
            best_loss = held_out
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                logger.info(f"Early stop after epoch {epoch + 1}")
                break

    model.load_state_dict(best_state)
    model.eval()
    logger.info(f"Pre-training done: held-out BCE {initial_loss:.4f} -> {best_loss:.4f}")
    return model


def replace_head(model: EventDetector, new_width: int, rng: Union[np.random.Generator, int]) -> EventDetector:
    """Copy of the model with theta untouched and a freshly initialised width-`new_width` head"""
    replaced = clone_model(model)
    replaced.head = init_head(model.config.embedding_dim, new_width, rng)
    return replaced


def finetune_on_support(model: EventDetector, support_x: torch.Tensor, support_y: torch.Tensor,
                        mode: Union[str, FinetuneMode], epochs: int, config: Optional[FinetuneConfig] = None,
                        weights: Optional[LossWeights] = None) -> EventDetector:
    """Full-batch fine-tuning on the support set; the input model is never modified

    mode=linear freezes theta (the embeddings are computed once); mode=all
    trains theta and phi. Batch-norm statistics stay frozen in both modes.
    """
    mode = FinetuneMode(mode)
    config = config or FinetuneConfig()
    if model.n_out != support_y.shape[1]:
        raise ShapeMismatch(f"head width {model.n_out} vs {support_y.shape[1]} target events")
    tuned = clone_model(model)
    if epochs == 0:
        return tuned
    weights = weights or LossWeights.uniform(support_y.shape[1], config.pos_weight)

    if mode == FinetuneMode.LINEAR:
        support_embedding = embed(support_x, tuned)
        gd_train(tuned, lambda m, _: weighted_bce_with_logits(m.head(support_embedding), support_y, weights),
                 None, steps=epochs, lr=config.lr_linear, optimizer=config.optimizer,
                 parameters=tuned.head.parameters())
    else:
        with frozen_batch_norm(tuned):
            gd_train(tuned, lambda m, _: weighted_bce_with_logits(m(support_x), support_y, weights),
                     None, steps=epochs, lr=config.lr_all, optimizer=config.optimizer)
    return tuned


class FineTuneBaseline(FewShotMethod):
    """FT-All / FT-Linear: new K-way head on the pre-trained model, tuned per task"""

    def __init__(self, pretrained: EventDetector, mode: Union[str, FinetuneMode],
                 config: Optional[FinetuneConfig] = None, seed: int = 0):
        self.pretrained = pretrained
        self.mode = FinetuneMode(mode)
        self.config = config or FinetuneConfig()
        self.seed = seed
        self.name = f"ft-{self.mode.value}"

    def predict(self, support_x, support_y, query_x):
        # same head initialisation for every task keeps tasks independent of evaluation order
        model = replace_head(self.pretrained, support_y.shape[1], self.seed)
        model = finetune_on_support(model, support_x, support_y, self.mode, self.config.epochs, self.config)
        with inference_mode(model), torch.no_grad():
            return detect_scores(query_x, model, support_y.shape[1])

    def describe(self) -> Dict:
        return {"method": self.name, "seed": self.seed, **self.config.model_dump()}


class NearestNeighborBaseline(FewShotMethod):
    name = "nn"

    def __init__(self, model: nn.Module, metric: Union[str, DistanceMetric] = DistanceMetric.COSINE):
        self.model = model
        self.metric = DistanceMetric(metric)

    def predict(self, support_x, support_y, query_x):
        return nn_predict_episode(self.model, support_x, support_y, query_x, self.metric)

    def describe(self) -> Dict:
        return {"method": self.name, "metric": self.metric.value}


def select_metric(model: nn.Module, meta_val: Sequence[Episode], features: Mapping[str, np.ndarray],
                  metrics: Sequence[str] = ("l2", "cosine", "dot")) -> Tuple[DistanceMetric, Dict[str, float]]:
    """Metric with the best meta-validation mean AUC (ties keep the earlier metric)"""
    if not meta_val:
        raise InvalidConfig("metric selection needs a non-empty meta-validation set")
    scores: Dict[str, float] = {}
    for metric in metrics:
        result = evaluate_method(NearestNeighborBaseline(model, metric), meta_val, features, setting="meta-val")
        scores[DistanceMetric(metric).value] = result.mean_auc
    best = max(scores, key=lambda m: (scores[m], -list(scores).index(m)))
    logger.info(f"NN metric selection: {scores} -> {best}")
    return DistanceMetric(best), scores
