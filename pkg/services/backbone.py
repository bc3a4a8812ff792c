"""
CNN backbone f = [f_theta, f_phi]: a block CNN embedder and a linear
detection head, the weighted BCE detection loss and a generic gradient
descent trainer shared by pre-training, fine-tuning and meta-training.
"""

import contextlib
import copy
import itertools
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from config.settings import settings
from schemas.models import BackboneConfig
from services.exceptions import ShapeMismatch, DomainError, NonFiniteLoss, InvalidConfig

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


class ConvBlock(nn.Sequential):
    """conv 3x3 -> ReLU -> BatchNorm -> max-pool 3x3"""

    def __init__(self, in_channels: int, out_channels: int, conv_kernel: int = 3, pool_kernel: int = 3):
        super().__init__(
            nn.Conv2d(in_channels, out_channels, conv_kernel, padding=conv_kernel // 2),
            nn.ReLU(),
            nn.BatchNorm2d(out_channels),
            # ceil_mode keeps the 64-bin frequency axis alive through four 3x pools
            nn.MaxPool2d(pool_kernel, ceil_mode=True),
        )


class Embedder(nn.Module):
    """f_theta: [batch, frames, mels] -> [batch, embedding_dim]"""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        blocks = []
        in_channels = 1
        for out_channels in config.channels:
            blocks.append(ConvBlock(in_channels, out_channels, config.conv_kernel, config.pool_kernel))
            in_channels = out_channels
        self.blocks = nn.Sequential(*blocks)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(1)
        if x.dim() != 4 or x.shape[1] != 1 or tuple(x.shape[-2:]) != (self.config.input_frames, self.config.input_mels):
            raise ShapeMismatch(f"expected [batch, {self.config.input_frames}, {self.config.input_mels}], "
                                f"got {tuple(x.shape)}")
        return self.blocks(x).mean(dim=(2, 3))


class EventDetector(nn.Module):
    """Model parameters: theta = embedder.*, phi = head.* (head may be absent for embedding-only learners)"""

    def __init__(self, config: BackboneConfig, n_out: int = 0):
        super().__init__()
        self.config = config
        self.embedder = Embedder(config)
        self.head: Optional[nn.Linear] = nn.Linear(config.embedding_dim, n_out) if n_out > 0 else None

    @property
    def n_out(self) -> int:
        return self.head.out_features if self.head is not None else 0

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.head is None:
            raise ShapeMismatch("model has no detection head")
        return self.head(self.embedder(x))

    def theta(self) -> Dict[str, torch.Tensor]:
        return self.embedder.state_dict()

    def phi(self) -> Dict[str, torch.Tensor]:
        return self.head.state_dict() if self.head is not None else {}


@dataclass
class LossWeights:
    """Per-event positive weights w_c > 0"""
    w: torch.Tensor

    def __post_init__(self):
        self.w = torch.as_tensor(self.w, dtype=torch.get_default_dtype())
        if self.w.dim() != 1 or not bool(torch.all(self.w > 0)):
            raise InvalidConfig("loss weights must be a strictly positive vector")

    @classmethod
    def uniform(cls, n_events: int, value: float = 1.0) -> "LossWeights":
        return cls(torch.full((n_events,), float(value)))


def default_device() -> torch.device:
    return torch.device(settings.DEVICE)


@contextlib.contextmanager
def inference_mode(model: nn.Module):
    """Eval mode (batch-norm running stats) for the duration of the block"""
    was_training = model.training
    model.eval()
    try:
        yield model
    finally:
        model.train(was_training)


@contextlib.contextmanager
def frozen_batch_norm(model: nn.Module):
    """Batch-norm layers use (and keep) their running statistics; gradients still flow"""
    norms = [m for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    states = [m.training for m in norms]
    for m in norms:
        m.eval()
    try:
        yield model
    finally:
        for m, state in zip(norms, states):
            m.train(state)


def embed(x: torch.Tensor, model: Union[EventDetector, Embedder]) -> torch.Tensor:
    """Deterministic embedding in inference mode"""
    embedder = model.embedder if isinstance(model, EventDetector) else model
    with inference_mode(embedder), torch.no_grad():
        return embedder(x)


def detect_logits(x: torch.Tensor, model: EventDetector, n_events: Optional[int] = None) -> torch.Tensor:
    if n_events is not None and model.n_out != n_events:
        raise ShapeMismatch(f"head width {model.n_out} does not match {n_events} requested events")
    return model(x)


def detect_scores(x: torch.Tensor, model: EventDetector, n_events: Optional[int] = None) -> torch.Tensor:
    """Independent per-event probabilities (elementwise sigmoid, not softmax)"""
    return torch.sigmoid(detect_logits(x, model, n_events))


def _weights_for(weights: Optional[LossWeights], n_events: int, like: torch.Tensor) -> torch.Tensor:
    if weights is None:
        return torch.ones(n_events, dtype=like.dtype, device=like.device)
    if weights.w.shape[0] != n_events:
        raise ShapeMismatch(f"{weights.w.shape[0]} loss weights for {n_events} events")
    return weights.w.to(dtype=like.dtype, device=like.device)


def _reduce(per_sample: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "sum":
        return per_sample.sum()
    if reduction == "mean":
        return per_sample.mean()
    raise InvalidConfig(f"unknown reduction {reduction}")


def bce_terms(predictions: torch.Tensor, labels: torch.Tensor, weights: Optional[LossWeights] = None,
              weight_negatives: bool = False) -> torch.Tensor:
    """Per-entry -[w_c y_c log p_c + (1 - y_c) log(1 - p_c)], same shape as predictions

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the log.
    weight_negatives=True applies w_c to the negative term as well.
    """
    if predictions.shape != labels.shape:
        raise ShapeMismatch(f"predictions {tuple(predictions.shape)} vs labels {tuple(labels.shape)}")
    if not bool(torch.all(torch.isfinite(predictions))) or bool(torch.any((predictions < 0) | (predictions > 1))):
        raise DomainError("predictions must be finite probabilities in [0, 1]")
    w = _weights_for(weights, predictions.shape[-1], predictions)
    labels = labels.to(predictions.dtype)
    p = predictions.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    negative_weight = w if weight_negatives else 1.0
    return -(w * labels * torch.log(p) + negative_weight * (1 - labels) * torch.log1p(-p))


def bce_terms_with_logits(logits: torch.Tensor, labels: torch.Tensor, weights: Optional[LossWeights] = None,
                          weight_negatives: bool = False) -> torch.Tensor:
    if logits.shape != labels.shape:
        raise ShapeMismatch(f"logits {tuple(logits.shape)} vs labels {tuple(labels.shape)}")
    w = _weights_for(weights, logits.shape[-1], logits)
    labels = labels.to(logits.dtype)
    if weight_negatives:
        return w * F.binary_cross_entropy_with_logits(logits, labels, reduction="none")
    return F.binary_cross_entropy_with_logits(logits, labels, pos_weight=w, reduction="none")


def weighted_bce_loss(predictions: torch.Tensor, labels: torch.Tensor,
                      weights: Optional[LossWeights] = None, reduction: str = "mean",
                      weight_negatives: bool = False) -> torch.Tensor:
    """L = -sum_c [w_c y_c log p_c + (1 - y_c) log(1 - p_c)], summed over events

    reduction="sum" sums over samples too; "mean" averages over samples.
    """
    return _reduce(bce_terms(predictions, labels, weights, weight_negatives).sum(dim=-1), reduction)


def weighted_bce_with_logits(logits: torch.Tensor, labels: torch.Tensor,
                             weights: Optional[LossWeights] = None, reduction: str = "mean",
                             weight_negatives: bool = False) -> torch.Tensor:
    """Same loss as weighted_bce_loss, computed stably from logits"""
    return _reduce(bce_terms_with_logits(logits, labels, weights, weight_negatives).sum(dim=-1), reduction)


@dataclass
class TrainStep:
    step: int
    loss: float
    lr: float


def build_optimizer(parameters: Iterable[torch.nn.Parameter], name: str, lr: float,
                    momentum: float = 0.9) -> torch.optim.Optimizer:
    parameters = list(parameters)
    if name == "sgd":
        return torch.optim.SGD(parameters, lr=lr)
    if name == "momentum":
        return torch.optim.SGD(parameters, lr=lr, momentum=momentum)
    if name == "adam":
        return torch.optim.Adam(parameters, lr=lr)
    raise InvalidConfig(f"unknown optimizer {name}")


def snapshot_state(model: nn.Module) -> Dict[str, torch.Tensor]:
    return {name: value.detach().clone() for name, value in model.state_dict().items()}


def gd_train(model: nn.Module, loss_fn: Callable[[nn.Module, object], torch.Tensor],
             data: Optional[Sequence[object]], steps: int, lr: float, *,
             optimizer: Union[str, torch.optim.Optimizer] = "sgd",
             parameters: Optional[Iterable[torch.nn.Parameter]] = None,
             history: Optional[List[TrainStep]] = None,
             log_every: Optional[int] = None, step_offset: int = 0) -> nn.Module:
    """Run exactly `steps` updates of loss_fn(model, batch), cycling through `data`

    A non-finite loss restores the parameters of the last step whose loss was
    finite and raises NonFiniteLoss.
    """
    if steps < 0:
        raise InvalidConfig("steps must be >= 0")
    if steps == 0:
        return model

    params = list(parameters) if parameters is not None else [p for p in model.parameters() if p.requires_grad]
    opt = optimizer if isinstance(optimizer, torch.optim.Optimizer) else build_optimizer(params, optimizer, lr)
    batches: Iterator[object] = itertools.cycle(data) if data else itertools.repeat(None)
    log_every = log_every or settings.LOG_EVERY

    last_finite = snapshot_state(model)
    for step in range(steps):
        batch = next(batches)
        opt.zero_grad()
        loss = loss_fn(model, batch)
        if not torch.isfinite(loss):
            model.load_state_dict(last_finite)
            logger.error(f"Non-finite loss at step {step}; restored last finite parameters")
            raise NonFiniteLoss(step, last_finite)
        last_finite = snapshot_state(model)
        loss.backward()
        opt.step()

        current_lr = opt.param_groups[0]["lr"]
        if history is not None:
            history.append(TrainStep(step=step_offset + step, loss=float(loss.detach()), lr=current_lr))
        if (step + 1) % log_every == 0:
            logger.info(f"step {step_offset + step + 1}/{step_offset + steps} loss={float(loss.detach()):.5f}")
    return model


def init_head(in_features: int, out_features: int, rng: Union[np.random.Generator, int]) -> nn.Linear:
    """Linear head with weights and bias ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))"""
    if out_features < 1:
        raise InvalidConfig("head width must be >= 1")
    seed = int(rng.integers(2 ** 63 - 1)) if isinstance(rng, np.random.Generator) else int(rng)
    generator = torch.Generator().manual_seed(seed)
    bound = 1.0 / math.sqrt(in_features)
    head = nn.Linear(in_features, out_features)
    with torch.no_grad():
        head.weight.copy_((torch.rand(out_features, in_features, generator=generator) * 2 - 1) * bound)
        head.bias.copy_((torch.rand(out_features, generator=generator) * 2 - 1) * bound)
    return head


def clone_model(model: nn.Module) -> nn.Module:
    return copy.deepcopy(model)
