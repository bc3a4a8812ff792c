import ast
import math
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn as nn

from schemas.models import BackboneConfig
from services.backbone import (
    EventDetector, LossWeights, TrainStep, bce_terms, detect_scores, embed, frozen_batch_norm, gd_train,
    init_head, weighted_bce_loss, weighted_bce_with_logits,
)
from services.exceptions import DomainError, InvalidConfig, NonFiniteLoss, ShapeMismatch


def test_embedder_output_shape(tiny_backbone):
    model = EventDetector(tiny_backbone, n_out=3)
    x = torch.randn(5, tiny_backbone.input_frames, tiny_backbone.input_mels)
    assert model.embedder(x).shape == (5, 8)
    assert model(x).shape == (5, 3)


def test_full_size_backbone_embeds_ten_second_clips():
    config = BackboneConfig()
    model = EventDetector(config)
    assert embed(torch.randn(2, 1000, 64), model).shape == (2, 128)


def test_wrong_input_shape_rejected(tiny_backbone):
    model = EventDetector(tiny_backbone, n_out=2)
    with pytest.raises(ShapeMismatch):
        model(torch.randn(2, 10, tiny_backbone.input_mels))
    with pytest.raises(ShapeMismatch):
        EventDetector(tiny_backbone)(torch.randn(1, 32, 32))


def test_backbone_config_requires_matching_embedding():
    with pytest.raises(ValueError):
        BackboneConfig(channels=[4, 8], embedding_dim=16)


def test_embed_is_deterministic_and_restores_mode(tiny_backbone):
    model = EventDetector(tiny_backbone)
    model.train()
    x = torch.randn(4, 32, 32)
    first = embed(x, model)
    second = embed(x, model)
    torch.testing.assert_close(first, second)
    assert model.training
    assert not first.requires_grad


def test_detect_scores_are_independent_sigmoids(tiny_backbone):
    model = EventDetector(tiny_backbone, n_out=4).eval()
    x = torch.randn(3, 32, 32)
    scores = detect_scores(x, model, 4)
    torch.testing.assert_close(scores, torch.sigmoid(model(x)))
    assert torch.all((scores > 0) & (scores < 1))
    with pytest.raises(ShapeMismatch):
        detect_scores(x, model, 5)


def test_frozen_batch_norm_keeps_running_statistics(tiny_backbone):
    model = EventDetector(tiny_backbone, n_out=2).train()
    before = {k: v.clone() for k, v in model.state_dict().items() if "running" in k}
    with frozen_batch_norm(model):
        model(torch.randn(6, 32, 32) * 5 + 3).sum().backward()
    after = {k: v for k, v in model.state_dict().items() if "running" in k}
    for key in before:
        torch.testing.assert_close(before[key], after[key])
    assert all(m.training for m in model.modules() if isinstance(m, nn.BatchNorm2d))
    assert model.embedder.blocks[0][0].weight.grad is not None


def test_bce_examples():
    p = torch.tensor([[0.5, 0.9]])
    y = torch.tensor([[1.0, 0.0]])
    assert math.isclose(float(weighted_bce_loss(p, y)), math.log(2) - math.log(0.1), rel_tol=1e-6)
    doubled = weighted_bce_loss(p, y, LossWeights(torch.tensor([2.0, 2.0])))
    assert math.isclose(float(doubled), 2 * math.log(2) - math.log(0.1), rel_tol=1e-6)
    both = weighted_bce_loss(p, y, LossWeights(torch.tensor([2.0, 2.0])), weight_negatives=True)
    assert math.isclose(float(both), 2 * math.log(2) - 2 * math.log(0.1), rel_tol=1e-6)


def test_bce_clamps_certain_mistakes():
    loss = weighted_bce_loss(torch.tensor([[1.0, 0.0]]), torch.tensor([[0.0, 1.0]]))
    assert math.isfinite(float(loss))
    assert 30.0 < float(loss) < 33.0


def test_bce_reductions_and_errors():
    p = torch.full((4, 3), 0.5)
    y = torch.ones(4, 3)
    mean = weighted_bce_loss(p, y)
    total = weighted_bce_loss(p, y, reduction="sum")
    assert math.isclose(float(total), 4 * float(mean), rel_tol=1e-6)
    assert bce_terms(p, y).shape == (4, 3)
    with pytest.raises(DomainError):
        weighted_bce_loss(torch.tensor([[1.2]]), torch.tensor([[1.0]]))
    with pytest.raises(ShapeMismatch):
        weighted_bce_loss(p, torch.ones(4, 2))
    with pytest.raises(ShapeMismatch):
        weighted_bce_loss(p, y, LossWeights.uniform(2))
    with pytest.raises(InvalidConfig):
        LossWeights(torch.tensor([1.0, 0.0]))


def test_logit_loss_matches_probability_loss():
    logits = torch.randn(6, 3, dtype=torch.float64)
    y = (torch.rand(6, 3) > 0.5).double()
    weights = LossWeights(torch.tensor([1.0, 2.0, 3.0]))
    for weight_negatives in (False, True):
        torch.testing.assert_close(
            weighted_bce_with_logits(logits, y, weights, weight_negatives=weight_negatives),
            weighted_bce_loss(torch.sigmoid(logits), y, weights, weight_negatives=weight_negatives),
        )


def test_gd_train_minimises_a_quadratic():
    model = nn.Linear(1, 1, bias=False)
    history = []
    gd_train(model, lambda m, batch: ((m.weight - 3.0) ** 2).sum(), None, steps=100, lr=0.1,
             history=history, step_offset=10)
    assert math.isclose(float(model.weight), 3.0, abs_tol=1e-6)
    assert len(history) == 100
    assert isinstance(history[0], TrainStep)
    assert history[0].step == 10 and history[-1].step == 109
    assert history[-1].loss < history[0].loss


def test_gd_train_cycles_batches_and_handles_zero_steps():
    model = nn.Linear(1, 1, bias=False)
    seen = []

    def loss_fn(m, batch):
        seen.append(batch)
        return (m.weight ** 2).sum()
    before = model.weight.detach().clone()
    gd_train(model, loss_fn, [1, 2], steps=0, lr=0.1)
    torch.testing.assert_close(model.weight.detach(), before)
    gd_train(model, loss_fn, [1, 2], steps=5, lr=0.1)
    assert seen == [1, 2, 1, 2, 1]
    with pytest.raises(InvalidConfig):
        gd_train(model, loss_fn, None, steps=-1, lr=0.1)


def test_gd_train_restores_last_finite_state():
    model = nn.Linear(1, 1, bias=False)
    calls = {"n": 0}

    def loss_fn(m, batch):
        calls["n"] += 1
        if calls["n"] == 3:
            return m.weight.sum() * float("nan")
        return ((m.weight - 1.0) ** 2).sum()

    with pytest.raises(NonFiniteLoss) as info:
        gd_train(model, loss_fn, None, steps=5, lr=0.1)
    assert info.value.step == 2
    torch.testing.assert_close(model.weight.detach(), info.value.last_finite_state["weight"])
    assert torch.isfinite(model.weight).all()


def test_init_head_bounds_and_seed():
    head = init_head(16, 5, 3)
    bound = 1 / math.sqrt(16)
    assert head.weight.shape == (5, 16)
    assert float(head.weight.abs().max()) <= bound
    assert float(head.bias.abs().max()) <= bound
    torch.testing.assert_close(init_head(16, 5, 3).weight, head.weight)
    assert not torch.equal(init_head(16, 5, 4).weight, head.weight)
    assert init_head(16, 2, np.random.default_rng(0)).out_features == 2
    with pytest.raises(InvalidConfig):
        init_head(16, 0, 0)


def test_gd_train_restores_parameters_from_before_a_diverging_update():
    model = nn.Linear(1, 1, bias=False)
    with torch.no_grad():
        model.weight.zero_()

    # finite at zero, but the gradient of sqrt(|w|) there is not
    with pytest.raises(NonFiniteLoss) as info:
        gd_train(model, lambda m, batch: torch.sqrt(m.weight.abs()).sum(), None, steps=3, lr=0.1)
    assert info.value.step == 1
    assert float(model.weight) == 0.0
    assert float(info.value.last_finite_state["weight"]) == 0.0


def tiny_double_detector(n_out: int = 2) -> EventDetector:
    config = BackboneConfig(channels=[2, 3], embedding_dim=3, input_frames=9, input_mels=9)
    return EventDetector(config, n_out=n_out).double().eval()


def test_detect_scores_gradients_match_finite_differences():
    model = tiny_double_detector()
    x = torch.randn(1, 9, 9, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda inputs: detect_scores(inputs, model, 2), (x,), eps=1e-6, atol=1e-5)

    weight = model.head.weight.detach().clone().requires_grad_(True)
    with torch.no_grad():
        embedding = model.embedder(x.detach())

    def scores_for(head_weight):
        return torch.sigmoid(embedding @ head_weight.T + model.head.bias)
    assert torch.autograd.gradcheck(scores_for, (weight,), eps=1e-6, atol=1e-6)


@pytest.mark.parametrize("weight_negatives", [False, True])
def test_weighted_bce_gradients_match_finite_differences(weight_negatives):
    p = (0.05 + 0.9 * torch.rand(5, 3, dtype=torch.float64)).requires_grad_(True)
    y = (torch.rand(5, 3) > 0.5).double()
    weights = LossWeights(torch.tensor([1.0, 2.5, 0.5]))
    assert torch.autograd.gradcheck(
        lambda predictions: weighted_bce_loss(predictions, y, weights, weight_negatives=weight_negatives),
        (p,), eps=1e-6, atol=1e-6,
    )


def test_frozen_batch_norm_training_matches_inference(tiny_backbone):
    model = EventDetector(tiny_backbone, n_out=3)
    # move the running statistics away from their defaults first
    model.train()
    with torch.no_grad():
        for _ in range(3):
            model(torch.randn(8, 32, 32) * 2 + 1)
    x = torch.randn(4, 32, 32)
    model.train()
    with frozen_batch_norm(model):
        during_training = model(x)
    model.eval()
    torch.testing.assert_close(during_training, model(x))


def unused_imports(path: Path) -> list:
    tree = ast.parse(path.read_text())
    imported = set()
    for node in ast.walk(tree):
        if isinstance(node, ast.Import):
            imported.update((alias.asname or alias.name).split(".")[0] for alias in node.names)
        elif isinstance(node, ast.ImportFrom):
            imported.update(alias.asname or alias.name for alias in node.names)
    used = {node.id for node in ast.walk(tree) if isinstance(node, ast.Name)}
    return sorted(imported - used)


@pytest.mark.parametrize("module", ["services/backbone.py", "services/svm.py", "services/sampler.py",
                                    "services/meta_learners.py", "services/tasks.py"])
def test_service_modules_import_only_what_they_use(module):
    assert unused_imports(Path(__file__).parent / module) == []
