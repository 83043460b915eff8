"""Block-level side connections: E-adapters and E-injectors.

Adapter residual (position-wise over the grid)::

    ad(F) = up(ReLU(mid(down(F))))

``down`` is shared by every site of a stage, ``mid`` and ``up`` belong to one
site.  Injector residual for prompt ``P_j``::

    inj_j = dim_proj_j(resize(standardize(P_j)))

and the feature entering block ``i`` is ``F_i + ad(F_i) + sum_j alpha_j * inj_j``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import torch
from torch import nn

from .backbone import ConfigError, ParamPartition, bilinear

ALPHA_LEARNED = "learned"
ALPHA_ZERO = "zero"


@dataclass
class PeftConfig:
    adapter_bottleneck_ratio: int = 4
    adapter_bias: bool = True
    # [stage, block] pairs; None attaches at every block boundary
    attachment_sites: Optional[list[list[int]]] = None
    alpha_init: float = 0.1
    # "zero" fixes alpha at 0 as a non-trainable buffer (injector ablation)
    alpha_mode: str = ALPHA_LEARNED

    def validate(self) -> None:
        if self.adapter_bottleneck_ratio < 2:
            raise ConfigError("peft.adapter_bottleneck_ratio must be >= 2 so bottleneck < embed_dim")
        if self.alpha_mode not in (ALPHA_LEARNED, ALPHA_ZERO):
            raise ConfigError(f"peft.alpha_mode must be 'learned' or 'zero', got {self.alpha_mode!r}")

    def sites(self, depths: Sequence[int]) -> list[tuple[int, int]]:
        if self.attachment_sites is None:
            return [(s, i) for s, d in enumerate(depths) for i in range(d)]
        out = []
        for pair in self.attachment_sites:
            s, i = (int(v) for v in pair)
            if not (0 <= s < len(depths) and 0 <= i < depths[s]):
                raise ConfigError(f"peft.attachment_sites entry {[s, i]} outside the backbone")
            out.append((s, i))
        return sorted(set(out))

    def bottleneck(self, embed_dim: int) -> int:
        return max(1, embed_dim // self.adapter_bottleneck_ratio)


def channel_linear(layer: nn.Linear, x: torch.Tensor) -> torch.Tensor:
    """Apply a linear layer over the channel axis of a ``(B, C, h, w)`` grid."""
    return layer(x.movedim(1, -1)).movedim(-1, 1)


class AdapterSite(nn.Module):
    def __init__(self, bottleneck: int, embed_dim: int, bias: bool = True):
        super().__init__()
        self.mid = nn.Linear(bottleneck, bottleneck, bias=bias)
        self.up = nn.Linear(bottleneck, embed_dim, bias=bias)


class StageAdapters(nn.Module):
    """One shared down-projection plus per-site mid/up layers for a stage."""

    def __init__(self, embed_dim: int, bottleneck: int, block_indices: Sequence[int], bias: bool = True):
        super().__init__()
        if bottleneck >= embed_dim:
            raise ConfigError(f"adapter bottleneck {bottleneck} must be < embed_dim {embed_dim}")
        self.down = nn.Linear(embed_dim, bottleneck, bias=bias)
        self.sites = nn.ModuleDict({str(i): AdapterSite(bottleneck, embed_dim, bias) for i in block_indices})

    def has_site(self, block_index: int) -> bool:
        return str(block_index) in self.sites

    def forward(self, feature: torch.Tensor, block_index: int) -> torch.Tensor:
        site = self.sites[str(block_index)]
        return adapter_forward(feature, self.down, site.mid, site.up)


def adapter_forward(feature: torch.Tensor, down: nn.Linear, mid: nn.Linear, up: nn.Linear) -> torch.Tensor:
    if feature.shape[-3] != down.in_features:
        raise ValueError(f"adapter expects {down.in_features} channels, got {feature.shape[-3]}")
    squeeze = feature.dim() == 3
    x = feature.unsqueeze(0) if squeeze else feature
    x = channel_linear(up, torch.relu(channel_linear(mid, channel_linear(down, x))))
    return x.squeeze(0) if squeeze else x


def standardize_channels(x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Zero-mean, unit-variance over the channel axis at every grid position."""
    mean = x.mean(dim=1, keepdim=True)
    var = x.var(dim=1, unbiased=False, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps)


class Injector(nn.Module):
    """Prompt transformation and channel projection for one (source, stage)."""

    def __init__(self, source_dim: int, embed_dim: int, alpha_init: float = 0.1, alpha_mode: str = ALPHA_LEARNED):
        super().__init__()
        self.dim_proj = nn.Linear(source_dim, embed_dim)
        alpha = torch.full((embed_dim,), float(alpha_init))
        if alpha_mode == ALPHA_ZERO:
            self.register_buffer("alpha", torch.zeros(embed_dim))
        else:
            self.alpha = nn.Parameter(alpha)

    def forward(self, prompt_grid: torch.Tensor, size) -> torch.Tensor:
        return injector_forward(prompt_grid, size, self.dim_proj)


def injector_forward(prompt_grid: torch.Tensor, size, dim_proj: nn.Linear) -> torch.Tensor:
    """``dim_proj(resize(standardize(prompt)))`` for a ``(B, C', h', w')`` prompt.

    The alpha scaling is applied later, in :func:`block_transition`.
    """
    if prompt_grid.shape[-1] == 0 or prompt_grid.shape[-2] == 0:
        raise ValueError("prompt feature has zero spatial extent")
    squeeze = prompt_grid.dim() == 3
    x = prompt_grid.unsqueeze(0) if squeeze else prompt_grid
    x = channel_linear(dim_proj, bilinear(standardize_channels(x), size))
    return x.squeeze(0) if squeeze else x


def scale_channels(x: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    return x * alpha.view(-1, 1, 1)


def transition_residual(
    adapter_residual: Optional[torch.Tensor],
    injector_residuals: Sequence[torch.Tensor],
    alphas: Sequence[torch.Tensor],
) -> Optional[torch.Tensor]:
    """``ad + sum_j alpha_j * inj_j``; the additive residual handed to the backbone hook."""
    if len(injector_residuals) != len(alphas):
        raise ValueError(f"{len(injector_residuals)} injector residuals but {len(alphas)} alphas")
    out = adapter_residual
    for inj, alpha in zip(injector_residuals, alphas):
        term = scale_channels(inj, alpha)
        out = term if out is None else out + term
    return out


def block_transition(
    feature: torch.Tensor,
    adapter_residual: Optional[torch.Tensor],
    injector_residuals: Sequence[torch.Tensor],
    alphas: Sequence[torch.Tensor],
) -> torch.Tensor:
    """Feature entering the next block: ``F + ad + sum_j alpha_j * inj_j``."""
    residual = transition_residual(adapter_residual, injector_residuals, alphas)
    if residual is None:
        return feature
    if residual.shape != feature.shape:
        raise ValueError(f"residual shape {tuple(residual.shape)} != feature shape {tuple(feature.shape)}")
    return feature + residual


PARAM_GROUPS = ("adapters", "injectors", "cross_attention", "decoder")


@dataclass
class TrainedParamReport:
    groups: dict[str, int] = field(default_factory=dict)
    total: int = 0

    @property
    def bytes_fp32(self) -> int:
        return 4 * self.total

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bytes_fp32"] = self.bytes_fp32
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        rows = [(g, n) for g, n in self.groups.items()] + [("total", self.total)]
        width = max(len(g) for g, _ in rows)
        lines = [f"{'group':<{width}}  {'params':>12}  {'bytes (fp32)':>14}"]
        for g, n in rows:
            lines.append(f"{g:<{width}}  {n:>12,d}  {4 * n:>14,d}")
        return "\n".join(lines)


def count_trained_params(model: nn.Module, partition: ParamPartition) -> TrainedParamReport:
    """Enumerate trainable parameters per group."""
    groups = {g: 0 for g in PARAM_GROUPS}
    for name, p in model.named_parameters():
        if name not in partition.trainable_ids:
            continue
        head = name.split(".", 1)[0]
        groups[head] = groups.get(head, 0) + p.numel()
    return TrainedParamReport(groups, sum(groups.values()))
