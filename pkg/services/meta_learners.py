"""
Episodic learners: average-distance prototypical network, MetaOptNet with
the differentiable per-event SVM, and MAML, plus the meta-training loop
shared by all three.

Batch-norm layers run on their running statistics during every episode-level
computation (support batches are too small to normalise over).
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
from torch.func import functional_call

from config.settings import settings
from schemas.models import BackboneConfig, MamlConfig, MetaOptConfig, MetaTrainConfig, ProtoConfig, RunConfig
from services.backbone import (
    EventDetector, LossWeights, TrainStep, bce_terms, bce_terms_with_logits, build_optimizer, embed,
    frozen_batch_norm, init_head, snapshot_state,
)
from services.baselines import DistanceMetric, nn_distances, nn_probability, pairwise_distance
from services.evaluation import evaluate_method
from services.exceptions import (
    IncompatibleCheckpoint, InvalidConfig, NoNegativeSupport, NoPositiveSupport, NonFiniteLoss, ShapeMismatch,
    SolverFailure,
)
from services.sampler import Episode
from services.svm import svm_decision
from services.tasks import FewShotMethod, TaskTensors, materialize

logger = logging.getLogger(__name__)


@dataclass
class EpisodeLossReport:
    loss: torch.Tensor
    per_event: torch.Tensor
    grad_norm: Optional[float] = None

    @property
    def value(self) -> float:
        return float(self.loss.detach())

    def to_dict(self) -> Dict:
        return {"loss": self.value, "per_event": self.per_event.detach().cpu().tolist(), "grad_norm": self.grad_norm}


def _embedder_of(model: nn.Module) -> nn.Module:
    return model.embedder if isinstance(model, EventDetector) else model


def _report(terms: torch.Tensor, reduction: str) -> EpisodeLossReport:
    if reduction == "mean":
        per_event = terms.mean(dim=0)
    elif reduction == "sum":
        per_event = terms.sum(dim=0)
    else:
        raise InvalidConfig(f"unknown reduction {reduction}")
    loss = per_event.sum()
    if not bool(torch.isfinite(loss)):
        raise NonFiniteLoss(0)
    return EpisodeLossReport(loss=loss, per_event=per_event)


def _backward(report: EpisodeLossReport, parameters: Sequence[torch.nn.Parameter]) -> EpisodeLossReport:
    report.loss.backward()
    grads = [p.grad.detach().flatten() for p in parameters if p.grad is not None]
    report.grad_norm = float(torch.cat(grads).norm()) if grads else 0.0
    return report


def _episode_embeddings(model: nn.Module, support_x: torch.Tensor,
                        query_x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    embedder = _embedder_of(model)
    with frozen_batch_norm(embedder):
        return embedder(support_x), embedder(query_x)


# Prototypical network
def proto_probabilities(support_embedding: torch.Tensor, support_y: torch.Tensor, query_embedding: torch.Tensor,
                        metric: Union[str, DistanceMetric] = DistanceMetric.COSINE,
                        distance_mode: str = "average") -> torch.Tensor:
    """average: mean distance to the labelled support subsets; prototype: distance to their mean embedding"""
    if distance_mode == "average":
        d0, d1 = nn_distances(query_embedding, support_embedding, support_y, metric)
        return nn_probability(d0, d1)
    if distance_mode != "prototype":
        raise InvalidConfig(f"unknown distance mode {distance_mode}")

    positive = (support_y > 0.5).to(support_embedding.dtype)
    negative = 1.0 - positive
    n_pos, n_neg = positive.sum(dim=0), negative.sum(dim=0)
    for k in range(support_y.shape[1]):
        if n_pos[k] == 0:
            raise NoPositiveSupport(k)
        if n_neg[k] == 0:
            raise NoNegativeSupport(k)
    positive_protos = (positive.T @ support_embedding) / n_pos[:, None]
    negative_protos = (negative.T @ support_embedding) / n_neg[:, None]
    d1 = pairwise_distance(query_embedding, positive_protos, metric)
    d0 = pairwise_distance(query_embedding, negative_protos, metric)
    return nn_probability(d0, d1)


def proto_predict(model: nn.Module, support_x: torch.Tensor, support_y: torch.Tensor, query_x: torch.Tensor,
                  metric: Union[str, DistanceMetric] = DistanceMetric.COSINE,
                  distance_mode: str = "average") -> torch.Tensor:
    return proto_probabilities(embed(support_x, model), support_y, embed(query_x, model), metric, distance_mode)


def proto_episode_loss(model: nn.Module, task: TaskTensors, weights: Optional[LossWeights] = None,
                       metric: Union[str, DistanceMetric] = DistanceMetric.COSINE, distance_mode: str = "average",
                       reduction: str = "mean", weight_negatives: bool = False,
                       backward: bool = False) -> EpisodeLossReport:
    """Cross-entropy of the query labels, differentiable through support and query embeddings"""
    support_embedding, query_embedding = _episode_embeddings(model, task.support_x, task.query_x)
    probabilities = proto_probabilities(support_embedding, task.support_y, query_embedding, metric, distance_mode)
    report = _report(bce_terms(probabilities, task.query_y, weights, weight_negatives), reduction)
    return _backward(report, list(model.parameters())) if backward else report


# MetaOptNet
def metaopt_decisions(model: nn.Module, task: TaskTensors, lam: float,
                      config: Optional[MetaOptConfig] = None) -> torch.Tensor:
    config = config or MetaOptConfig()
    support_embedding, query_embedding = _episode_embeddings(model, task.support_x, task.query_x)
    return svm_decision(support_embedding, query_embedding, task.support_y, lam,
                        config.max_iter, config.tol, config.jitter)


def metaopt_predict(model: nn.Module, support_x: torch.Tensor, support_y: torch.Tensor, query_x: torch.Tensor,
                    lam: float = 0.1, config: Optional[MetaOptConfig] = None) -> torch.Tensor:
    """sigmoid((w1 - w0).f(x)) per event"""
    config = config or MetaOptConfig()
    decisions = svm_decision(embed(support_x, model), embed(query_x, model), support_y, lam,
                             config.max_iter, config.tol, config.jitter)
    return torch.sigmoid(decisions)


def metaopt_episode_loss(model: nn.Module, task: TaskTensors, lam: float, weights: Optional[LossWeights] = None,
                         config: Optional[MetaOptConfig] = None, reduction: str = "mean",
                         weight_negatives: bool = False, backward: bool = False) -> EpisodeLossReport:
    decisions = metaopt_decisions(model, task, lam, config)
    report = _report(bce_terms_with_logits(decisions, task.query_y, weights, weight_negatives), reduction)
    return _backward(report, list(model.parameters())) if backward else report


# MAML
@dataclass
class MamlState:
    """Initial parameters live in `model`; adapted parameters are derived per support set"""
    model: nn.Module
    inner_steps: int = 5
    inner_lr: float = 0.01
    first_order: bool = False

    def __post_init__(self):
        if self.inner_steps < 0:
            raise InvalidConfig("inner_steps must be >= 0")
        if self.inner_lr < 0:
            raise InvalidConfig("inner_lr must be >= 0")

    def initial_params(self) -> Dict[str, torch.Tensor]:
        return dict(self.model.named_parameters())

    def buffers(self) -> Dict[str, torch.Tensor]:
        return dict(self.model.named_buffers())


def _forward(state: MamlState, params: Mapping[str, torch.Tensor], x: torch.Tensor) -> torch.Tensor:
    with frozen_batch_norm(state.model):
        return functional_call(state.model, (dict(params), state.buffers()), (x,))


def maml_adapt(state: MamlState, support_x: torch.Tensor, support_y: torch.Tensor,
               weights: Optional[LossWeights] = None, create_graph: bool = False) -> Dict[str, torch.Tensor]:
    """N full-batch gradient steps on the support loss, starting from the model's parameters

    create_graph=True keeps the unrolled graph for second-order meta-gradients.
    """
    if support_x.shape[0] == 0:
        raise InvalidConfig("MAML adaptation needs a non-empty support set")
    params = state.initial_params()
    names = list(params)
    for step in range(state.inner_steps):
        loss = bce_terms_with_logits(_forward(state, params, support_x), support_y, weights).sum(dim=-1).mean()
        if not bool(torch.isfinite(loss)):
            raise NonFiniteLoss(step)
        grads = torch.autograd.grad(loss, [params[n] for n in names], create_graph=create_graph, allow_unused=True)
        params = {
            n: params[n] if g is None else params[n] - state.inner_lr * (g if create_graph else g.detach())
            for n, g in zip(names, grads)
        }
    return params


def maml_query_loss(state: MamlState, tasks: Sequence[TaskTensors], reduction: str = "mean",
                    pos_weight: float = 1.0, weight_negatives: bool = False) -> torch.Tensor:
    """Mean over tasks of the query loss at the adapted parameters, differentiable wrt the initial ones"""
    if not tasks:
        raise InvalidConfig("empty episode batch")
    total = 0.0
    try:
        for task in tasks:
            weights = LossWeights.uniform(task.ways, pos_weight)
            adapted = maml_adapt(state, task.support_x, task.support_y, weights, create_graph=not state.first_order)
            logits = _forward(state, adapted, task.query_x)
            total = total + _report(bce_terms_with_logits(logits, task.query_y, weights, weight_negatives), reduction).loss
    except RuntimeError as e:
        if "out of memory" in str(e):
            logger.error("Out of memory while unrolling MAML; retry with first_order=True or fewer inner steps")
        raise
    return total / len(tasks)


def maml_meta_gradient(state: MamlState, tasks: Sequence[TaskTensors], reduction: str = "mean",
                       pos_weight: float = 1.0, weight_negatives: bool = False) -> Tuple[float, Dict[str, torch.Tensor]]:
    loss = maml_query_loss(state, tasks, reduction, pos_weight, weight_negatives)
    params = state.initial_params()
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    return float(loss.detach()), {
        name: torch.zeros_like(p) if g is None else g for (name, p), g in zip(params.items(), grads)
    }


def maml_meta_step(state: MamlState, tasks: Sequence[TaskTensors], optimizer: torch.optim.Optimizer,
                   reduction: str = "mean", pos_weight: float = 1.0,
                   weight_negatives: bool = False) -> EpisodeLossReport:
    """One outer update of (theta_0, phi_0); only the initial parameters persist"""
    loss, grads = maml_meta_gradient(state, tasks, reduction, pos_weight, weight_negatives)
    optimizer.zero_grad()
    for name, p in state.initial_params().items():
        p.grad = grads[name].detach().clone()
    norm = float(torch.cat([g.flatten() for g in grads.values()]).norm())
    optimizer.step()
    return EpisodeLossReport(loss=torch.tensor(loss), per_event=torch.zeros(0), grad_norm=norm)


def maml_predict(state: MamlState, support_x: torch.Tensor, support_y: torch.Tensor,
                 query_x: torch.Tensor) -> torch.Tensor:
    with torch.enable_grad():
        adapted = maml_adapt(state, support_x, support_y)
    with torch.no_grad():
        logits = _forward(state, {n: p.detach() for n, p in adapted.items()}, query_x)
    if logits.shape[-1] != support_y.shape[1]:
        raise ShapeMismatch(f"MAML head width {logits.shape[-1]} vs {support_y.shape[1]} target events")
    return torch.sigmoid(logits)


# Learners
class MetaLearner(FewShotMethod):
    """Wraps a model with one episodic loss; trained by train_meta"""

    def __init__(self, model: nn.Module, meta_train: Optional[MetaTrainConfig] = None):
        self.model = model
        self.meta_train = meta_train or MetaTrainConfig()

    def parameters(self) -> List[torch.nn.Parameter]:
        return [p for p in self.model.parameters() if p.requires_grad]

    def weights_for(self, task: TaskTensors) -> LossWeights:
        return LossWeights.uniform(task.ways, self.meta_train.pos_weight)

    def episode_loss(self, task: TaskTensors) -> EpisodeLossReport:
        raise NotImplementedError

    def batch_loss(self, tasks: Sequence[TaskTensors]) -> torch.Tensor:
        return sum(self.episode_loss(task).loss for task in tasks) / len(tasks)

    def meta_step(self, tasks: Sequence[TaskTensors], optimizer: torch.optim.Optimizer) -> EpisodeLossReport:
        """One outer update on a batch of tasks"""
        optimizer.zero_grad()
        loss = self.batch_loss(tasks)
        if not bool(torch.isfinite(loss)):
            raise NonFiniteLoss(0)
        report = _backward(EpisodeLossReport(loss=loss, per_event=torch.zeros(0)), self.parameters())
        optimizer.step()
        return report


class ProtoLearner(MetaLearner):
    name = "proto"

    def __init__(self, model: nn.Module, config: Optional[ProtoConfig] = None,
                 meta_train: Optional[MetaTrainConfig] = None):
        super().__init__(model, meta_train)
        self.config = config or ProtoConfig()

    def episode_loss(self, task):
        return proto_episode_loss(self.model, task, self.weights_for(task), self.config.metric,
                                  self.config.distance_mode, self.meta_train.reduction, self.meta_train.weight_negatives)

    def predict(self, support_x, support_y, query_x):
        return proto_predict(self.model, support_x, support_y, query_x, self.config.metric, self.config.distance_mode)

    def describe(self):
        return {"method": self.name, **self.config.model_dump()}


class MetaOptLearner(MetaLearner):
    name = "metaopt"

    def __init__(self, model: nn.Module, config: Optional[MetaOptConfig] = None,
                 meta_train: Optional[MetaTrainConfig] = None, lam: Optional[float] = None):
        super().__init__(model, meta_train)
        self.config = config or MetaOptConfig()
        self.lam = lam if lam is not None else self.config.lam

    def episode_loss(self, task):
        return metaopt_episode_loss(self.model, task, self.lam, self.weights_for(task), self.config,
                                    self.meta_train.reduction, self.meta_train.weight_negatives)

    def batch_loss(self, tasks):
        losses = []
        for task in tasks:
            try:
                losses.append(self.episode_loss(task).loss)
            except SolverFailure as e:
                logger.warning(f"Skipping meta-train task: {e}")
        if not losses:
            raise SolverFailure(f"SVM solver failed on all {len(tasks)} tasks of the batch")
        return sum(losses) / len(losses)

    def predict(self, support_x, support_y, query_x):
        return metaopt_predict(self.model, support_x, support_y, query_x, self.lam, self.config)

    def describe(self):
        return {"method": self.name, "lam": self.lam, "max_iter": self.config.max_iter, "tol": self.config.tol}


class MamlLearner(MetaLearner):
    name = "maml"

    def __init__(self, model: nn.Module, config: Optional[MamlConfig] = None,
                 meta_train: Optional[MetaTrainConfig] = None):
        super().__init__(model, meta_train)
        self.config = config or MamlConfig()
        self.state = MamlState(model, self.config.inner_steps, self.config.inner_lr, self.config.first_order)

    def batch_loss(self, tasks):
        return maml_query_loss(self.state, tasks, self.meta_train.reduction, self.meta_train.pos_weight,
                               self.meta_train.weight_negatives)

    def episode_loss(self, task):
        return EpisodeLossReport(loss=self.batch_loss([task]), per_event=torch.zeros(0))

    def meta_step(self, tasks, optimizer):
        return maml_meta_step(self.state, tasks, optimizer, self.meta_train.reduction, self.meta_train.pos_weight,
                              self.meta_train.weight_negatives)

    def predict(self, support_x, support_y, query_x):
        return maml_predict(self.state, support_x, support_y, query_x)

    def describe(self):
        return {"method": self.name, **self.config.model_dump()}


def new_meta_model(method: str, backbone: BackboneConfig, ways: int, seed: int = 0) -> EventDetector:
    """Randomly initialised model; only MAML carries a (K-way) head"""
    torch.manual_seed(seed)
    model = EventDetector(backbone, n_out=ways if method == "maml" else 0)
    if method == "maml":
        model.head = init_head(backbone.embedding_dim, ways, np.random.default_rng(seed))
    return model


def init_from_pretrained(pretrained: EventDetector, method: str, ways: int,
                         backbone: Optional[BackboneConfig] = None, seed: int = 0) -> EventDetector:
    """theta copied from the pre-trained model; MAML gets a fresh K-way head, proto/metaopt none"""
    backbone = backbone or pretrained.config
    if pretrained.config.model_dump() != backbone.model_dump():
        raise IncompatibleCheckpoint(f"pre-trained backbone {pretrained.config.model_dump()} does not match "
                                     f"{backbone.model_dump()}")
    model = new_meta_model(method, backbone, ways, seed)
    try:
        model.embedder.load_state_dict({k: v.detach().clone() for k, v in pretrained.embedder.state_dict().items()})
    except RuntimeError as e:
        raise IncompatibleCheckpoint(f"cannot copy pre-trained embedder: {e}")
    logger.info(f"Initialised {method} from pre-trained embedder (embedding_dim={backbone.embedding_dim})")
    return model


def build_learner(method: str, model: nn.Module, config: RunConfig, lam: Optional[float] = None) -> MetaLearner:
    if method == "proto":
        return ProtoLearner(model, config.proto, config.meta_train)
    if method == "metaopt":
        return MetaOptLearner(model, config.metaopt, config.meta_train, lam)
    if method == "maml":
        return MamlLearner(model, config.maml, config.meta_train)
    raise InvalidConfig(f"{method} is not a meta-learner")


@dataclass
class TrainingOutcome:
    initial_auc: float
    best_auc: float
    best_step: int
    history: List[TrainStep] = field(default_factory=list)
    validation: List[Tuple[int, float]] = field(default_factory=list)


def train_meta(learner: MetaLearner, meta_train: Sequence[Episode], meta_val: Sequence[Episode],
               features: Mapping[str, np.ndarray], config: Optional[MetaTrainConfig] = None) -> TrainingOutcome:
    """Iterate meta-train episodes in batches; keep the parameters with the best meta-validation mean AUC"""
    config = config or learner.meta_train
    if not meta_train or not meta_val:
        raise InvalidConfig("meta-training needs non-empty meta-train and meta-val sets")

    batches = [list(meta_train[i:i + config.episode_batch]) for i in range(0, len(meta_train), config.episode_batch)]
    optimizer = build_optimizer(learner.parameters(), config.optimizer, config.lr)

    def validate() -> float:
        learner.model.eval()
        return evaluate_method(learner, meta_val, features, setting="meta-val").mean_auc

    initial_auc = best_auc = validate()
    best_state = snapshot_state(learner.model)
    outcome = TrainingOutcome(initial_auc=initial_auc, best_auc=best_auc, best_step=0)
    logger.info(f"Meta-training {learner.name} on {len(meta_train)} episodes, initial meta-val AUC {initial_auc:.4f}")

    done = 0
    while done < len(batches):
        chunk = batches[done:done + config.validate_every]
        learner.model.train()
        for batch in chunk:
            last_finite = snapshot_state(learner.model)
            try:
                report = learner.meta_step([materialize(episode, features) for episode in batch], optimizer)
            except NonFiniteLoss:
                learner.model.load_state_dict(last_finite)
                logger.error(f"Non-finite meta-loss at step {done}; restored last finite parameters")
                raise NonFiniteLoss(done, last_finite)
            outcome.history.append(TrainStep(step=done, loss=report.value, lr=optimizer.param_groups[0]["lr"]))
            done += 1
            if done % settings.LOG_EVERY == 0:
                logger.info(f"{learner.name} step {done}/{len(batches)} loss={report.value:.5f}")
        auc = validate()
        outcome.validation.append((done, auc))
        logger.info(f"{learner.name} step {done}/{len(batches)}: meta-val AUC {auc:.4f} (best {best_auc:.4f})")
        if auc > best_auc:
            best_auc = auc
            outcome.best_step = done
            best_state = snapshot_state(learner.model)

    learner.model.load_state_dict(best_state)
    learner.model.eval()
    outcome.best_auc = best_auc
    return outcome


def select_lambda(model: nn.Module, meta_val: Sequence[Episode], features: Mapping[str, np.ndarray],
                  config: Optional[MetaOptConfig] = None) -> Tuple[float, Dict[float, float]]:
    """Grid value of lambda with the best meta-validation mean AUC"""
    config = config or MetaOptConfig()
    scores: Dict[float, float] = {}
    for lam in config.lam_grid:
        learner = MetaOptLearner(model, config, lam=lam)
        scores[lam] = evaluate_method(learner, meta_val, features, setting="meta-val").mean_auc
    best = max(config.lam_grid, key=lambda lam: (scores[lam], -config.lam_grid.index(lam)))
    logger.info(f"lambda selection: {scores} -> {best}")
    return best, scores
