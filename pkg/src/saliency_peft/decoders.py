"""Mask heads turning backbone features into saliency logits."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import nn

from .backbone import ConfigError, bilinear
from .peft import channel_linear


@dataclass
class DecoderConfig:
    common_dim: int = 32
    fuse_dim: int = 32
    out_size: Optional[int] = None
    # single-scale head: factor of the first upsampling
    single_upsample: int = 2
    # test hook: drop the fuse normalization and activation
    nonlinear: bool = True

    def validate(self) -> None:
        for name in ("common_dim", "fuse_dim", "single_upsample"):
            if getattr(self, name) < 1:
                raise ConfigError(f"decoder.{name} must be positive")
        if self.out_size is not None and self.out_size < 1:
            raise ConfigError("decoder.out_size must be positive")


class ChannelNorm(nn.Module):
    """LayerNorm over channels at each position of a (B, C, h, w) grid."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, x):
        return self.norm(x.movedim(1, -1)).movedim(-1, 1)


class MultiScaleDecoder(nn.Module):
    """Project each stage to ``common_dim``, upsample to stage-1 size, concat, fuse, predict."""

    def __init__(self, stage_dims: Sequence[int], cfg: DecoderConfig):
        super().__init__()
        self.project = nn.ModuleList(nn.Linear(c, cfg.common_dim) for c in stage_dims)
        self.fuse = nn.Conv2d(len(stage_dims) * cfg.common_dim, cfg.fuse_dim, kernel_size=1)
        self.fuse_norm = ChannelNorm(cfg.fuse_dim)
        self.pred = nn.Conv2d(cfg.fuse_dim, 1, kernel_size=1)
        self.nonlinear = cfg.nonlinear

    def forward(self, features: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(features) != len(self.project):
            raise ValueError(f"expected {len(self.project)} stage features, got {len(features)}")
        squeeze = features[0].dim() == 3
        if squeeze:
            features = [f.unsqueeze(0) for f in features]
        size = features[0].shape[-2:]
        for i, f in enumerate(features):
            expected = (size[0] >> i, size[1] >> i)
            if tuple(f.shape[-2:]) != expected or f.shape[1] != self.project[i].in_features:
                raise ValueError(
                    f"stage {i} feature has shape {tuple(f.shape[1:])}, expected "
                    f"({self.project[i].in_features}, {expected[0]}, {expected[1]})"
                )
        aligned = [bilinear(channel_linear(proj, f), size) for proj, f in zip(self.project, features)]
        x = self.fuse(torch.cat(aligned, dim=1))
        if self.nonlinear:
            x = torch.relu(self.fuse_norm(x))
        logits = self.pred(x)
        return logits.squeeze(0) if squeeze else logits


class SingleScaleDecoder(nn.Module):
    """Per-feature two-conv branch, upsample, concat, one conv, upsample to input size."""

    def __init__(self, dim: int, n_features: int, cfg: DecoderConfig, out_size: int):
        super().__init__()
        mid = cfg.common_dim
        self.branches = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(dim, mid, 3, padding=1),
                nn.ReLU(),
                nn.Conv2d(mid, mid, 3, padding=1),
            )
            for _ in range(n_features)
        )
        self.pred = nn.Conv2d(n_features * mid, 1, kernel_size=1)
        self.upsample = cfg.single_upsample
        self.out_size = out_size

    def forward(self, features: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(features) != len(self.branches):
            raise ValueError(f"expected {len(self.branches)} layer features, got {len(features)}")
        squeeze = features[0].dim() == 3
        if squeeze:
            features = [f.unsqueeze(0) for f in features]
        h, w = features[0].shape[-2:]
        up = (h * self.upsample, w * self.upsample)
        x = torch.cat([bilinear(branch(f), up) for branch, f in zip(self.branches, features)], dim=1)
        logits = bilinear(self.pred(x), self.out_size)
        return logits.squeeze(0) if squeeze else logits


def finalize_mask(logits: torch.Tensor, out_size) -> torch.Tensor:
    """Sigmoid, then bilinear resize to ``out_size`` (int or (h, w)).

    Probabilities are clamped one machine epsilon inside (0, 1) so saturated
    logits never round to exactly 0 or 1.
    """
    squeeze = logits.dim() == 3
    x = logits.unsqueeze(0) if squeeze else logits
    if x.shape[1] != 1:
        raise ValueError(f"logits must be single-channel, got {x.shape[1]} channels")
    eps = torch.finfo(x.dtype).eps
    x = bilinear(torch.sigmoid(x).clamp(eps, 1 - eps), out_size)
    return x.squeeze(0) if squeeze else x
