"""Toy model and finite-difference comparison shared by the gradient tests."""
import numpy as np
import torch

from saliency_peft.backbone import BackboneConfig, StageSpec, freeze_partition
from saliency_peft.decoders import DecoderConfig, finalize_mask
from saliency_peft.model import SaliencyModel, ModelConfig
from saliency_peft.objective import total_loss
from saliency_peft.peft import PeftConfig
from saliency_peft.prompts import CrossAttentionConfig, PromptSourceConfig, PromptsConfig

from . import oracles
from .conftest import random_inputs


def toy_config():
    return ModelConfig(
        BackboneConfig(
            input_resolution=32,
            stages=[StageSpec(1, 4, 1, 4), StageSpec(1, 4, 1, 2), StageSpec(1, 8, 1, 2), StageSpec(1, 8, 1, 2)],
            mlp_ratio=2,
            seed=3,
        ),
        PeftConfig(),
        PromptsConfig([
            PromptSourceConfig("vit", dim=4, grid=2),
            PromptSourceConfig("blip_plus", dim=4, grid=2, cross_attention=CrossAttentionConfig(1, 1, 3, 2)),
        ]),
        DecoderConfig(4, 4),
    )


def toy_problem():
    """float64 toy model with O(1) trainable weights, its partition and a loss closure."""
    cfg = toy_config()
    model = SaliencyModel(cfg).double()
    part = freeze_partition(model)
    # default init leaves many gradients near 1e-12, below finite-difference resolution
    gen = torch.Generator().manual_seed(11)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name in part.trainable_ids:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * 0.5)
    images, prompts, text = random_inputs(cfg, batch=1, seed=5, dtype=torch.float64)
    res = cfg.backbone.input_resolution
    gt = (torch.rand(1, 1, res, res, generator=torch.Generator().manual_seed(9)) > 0.5).double()

    def loss():
        return total_loss(finalize_mask(model(images, prompts, text), res), gt).total

    return model, part, loss


def gradient_check_errors(n=50, seed=0, step=1e-5):
    """Relative errors |a - n| / max(|a|, |n|) for n sampled trainable scalars."""
    model, part, loss = toy_problem()
    model.zero_grad()
    loss().backward()
    params = [(k, p) for k, p in model.named_parameters() if k in part.trainable_ids]
    sizes = np.array([p.numel() for _, p in params])
    offsets = np.cumsum(sizes) - sizes
    picks = np.random.default_rng(seed).choice(sizes.sum(), n, replace=False)
    errors = []
    for flat in picks:
        i = int(np.searchsorted(offsets, flat, side="right") - 1)
        p = params[i][1]
        j = int(flat - offsets[i])
        analytic = p.grad.view(-1)[j].item()
        numeric = oracles.central_difference(loss, p, j, step=step)
        errors.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-300))
    return errors


def trainable_count():
    model, part, _ = toy_problem()
    return sum(p.numel() for k, p in model.named_parameters() if k in part.trainable_ids)
