"""Toy transformer encoders with a block-boundary hook protocol.

Two layouts are supported:

* ``multi_scale``: four stages, each opened by a strided patch embedding, so
  stage outputs sit at 1/4, 1/8, 1/16 and 1/32 of the input resolution.
* ``single_scale``: one patch embedding followed by ``N`` blocks at a fixed
  token grid (ViT-like).

Every block boundary calls an optional ``transition_hook(feature, block_index,
stage_index)`` with the pre-block feature in grid layout ``(B, C, h, w)``.  The
hook returns an additive residual of the same shape (or ``None``) and the block
sees ``feature + residual``.  Side modules (adapters, injectors) plug in here
without touching backbone weights.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

TransitionHook = Callable[[torch.Tensor, int, int], Optional[torch.Tensor]]

MULTI_SCALE = "multi_scale"
SINGLE_SCALE = "single_scale"


class ConfigError(ValueError):
    """Invalid model or run configuration; the message names the field."""


class HookContractError(RuntimeError):
    pass


class PartitionError(RuntimeError):
    pass


@dataclass
class StageSpec:
    depth: int
    embed_dim: int
    num_heads: int
    reduction: int

    def validate(self, where: str) -> None:
        for name in ("depth", "embed_dim", "num_heads", "reduction"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{where}.{name} must be positive, got {getattr(self, name)}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"{where}.embed_dim ({self.embed_dim}) not divisible by "
                f"{where}.num_heads ({self.num_heads})"
            )


@dataclass
class BackboneConfig:
    kind: str = MULTI_SCALE
    input_resolution: int = 64
    stages: list[StageSpec] = field(
        default_factory=lambda: [
            StageSpec(2, 16, 1, 4),
            StageSpec(2, 32, 2, 2),
            StageSpec(2, 64, 4, 2),
            StageSpec(2, 128, 8, 2),
        ]
    )
    mlp_ratio: int = 4
    seed: int = 0

    def __post_init__(self):
        self.stages = [s if isinstance(s, StageSpec) else StageSpec(**s) for s in self.stages]

    @classmethod
    def single_scale_default(cls, input_resolution=64, patch=8, depth=12, dim=32, heads=2, seed=0):
        return cls(SINGLE_SCALE, input_resolution, [StageSpec(depth, dim, heads, patch)], seed=seed)

    def cumulative_reductions(self) -> list[int]:
        out, r = [], 1
        for s in self.stages:
            r *= s.reduction
            out.append(r)
        return out

    def stage_sizes(self) -> list[int]:
        return [self.input_resolution // r for r in self.cumulative_reductions()]

    def validate(self) -> None:
        if self.kind not in (MULTI_SCALE, SINGLE_SCALE):
            raise ConfigError(f"backbone.kind must be {MULTI_SCALE!r} or {SINGLE_SCALE!r}, got {self.kind!r}")
        if self.input_resolution < 1:
            raise ConfigError("backbone.input_resolution must be positive")
        if self.mlp_ratio < 1:
            raise ConfigError("backbone.mlp_ratio must be positive")
        for i, s in enumerate(self.stages):
            s.validate(f"backbone.stages[{i}]")
        if self.kind == MULTI_SCALE:
            if len(self.stages) != 4:
                raise ConfigError(f"backbone.stages: multi_scale needs exactly 4 stages, got {len(self.stages)}")
            if self.cumulative_reductions() != [4, 8, 16, 32]:
                raise ConfigError(
                    "backbone.stages[*].reduction: multi_scale stages must reduce by 4, 8, 16, 32 "
                    f"overall, got {self.cumulative_reductions()}"
                )
        else:
            if len(self.stages) != 1:
                raise ConfigError(f"backbone.stages: single_scale needs exactly 1 stage, got {len(self.stages)}")
            if self.stages[0].depth % 4:
                raise ConfigError(f"backbone.stages[0].depth must be divisible by 4, got {self.stages[0].depth}")
        largest = self.cumulative_reductions()[-1]
        if self.input_resolution % largest:
            raise ConfigError(
                f"backbone.input_resolution ({self.input_resolution}) not divisible by the "
                f"largest reduction factor ({largest})"
            )

    def decoder_layer_indices(self) -> list[int]:
        """Block indices feeding the single-scale decoder.

        Four features, one every ``depth // 4`` blocks, ending at the last one
        (``{2, 5, 8, 11}`` for depth 12).
        """
        depth = self.stages[0].depth
        step = depth // 4
        return [step * (k + 1) - 1 for k in range(4)]


@dataclass
class ParamPartition:
    frozen_ids: set[str]
    trainable_ids: set[str]


def generator_for(seed: int, stream: str) -> torch.Generator:
    """Independent deterministic RNG stream per (seed, component name)."""
    digest = hashlib.sha256(f"{seed}:{stream}".encode()).digest()
    g = torch.Generator()
    g.manual_seed(int.from_bytes(digest[:8], "little") & (2**63 - 1))
    return g


def init_module(module: nn.Module, generator: torch.Generator, std: float = 0.02) -> None:
    """Truncated-normal weights, zero biases, unit/zero norm affines."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d)):
            nn.init.trunc_normal_(m.weight, std=std, a=-2 * std, b=2 * std, generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.LayerNorm, nn.GroupNorm)):
            if m.weight is not None:
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)


def to_tokens(x: torch.Tensor) -> torch.Tensor:
    return x.flatten(2).transpose(1, 2)


def to_grid(x: torch.Tensor, h: int, w: int) -> torch.Tensor:
    return x.transpose(1, 2).reshape(x.shape[0], -1, h, w)


class SelfAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, c = x.shape
        hd = c // self.num_heads
        q, k, v = self.qkv(x).reshape(b, n, 3, self.num_heads, hd).permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * hd**-0.5
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class Block(nn.Module):
    """Pre-norm transformer block: x + MSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class PatchEmbed(nn.Module):
    def __init__(self, in_ch: int, dim: int, stride: int):
        super().__init__()
        self.proj = nn.Conv2d(in_ch, dim, kernel_size=stride, stride=stride)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        x = self.proj(x)
        h, w = x.shape[-2:]
        return to_grid(self.norm(to_tokens(x)), h, w)


class Stage(nn.Module):
    def __init__(self, in_ch: int, spec: StageSpec, mlp_ratio: int):
        super().__init__()
        self.embed = PatchEmbed(in_ch, spec.embed_dim, spec.reduction)
        self.blocks = nn.ModuleList(Block(spec.embed_dim, spec.num_heads, mlp_ratio) for _ in range(spec.depth))
        self.norm = nn.LayerNorm(spec.embed_dim)


class Backbone(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        config.validate()
        self.config = config
        in_ch = 3
        stages = []
        for spec in config.stages:
            stages.append(Stage(in_ch, spec, config.mlp_ratio))
            in_ch = spec.embed_dim
        self.stages = nn.ModuleList(stages)
        init_module(self, generator_for(config.seed, "backbone"))

    @property
    def kind(self) -> str:
        return self.config.kind

    def blocks(self):
        """Yield ``(stage_index, block_index, block)`` in forward order."""
        for s, stage in enumerate(self.stages):
            for i, blk in enumerate(stage.blocks):
                yield s, i, blk

    def forward(
        self,
        image: torch.Tensor,
        transition_hook: Optional[TransitionHook] = None,
        return_blocks: Optional[Sequence[int]] = None,
    ) -> list[torch.Tensor]:
        """Run the encoder.

        Returns the final (normed) feature of every stage, or, when
        ``return_blocks`` is given, the outputs of those block indices of the
        last stage (used by the single-scale decoder).
        """
        squeeze = image.dim() == 3
        if squeeze:
            image = image.unsqueeze(0)
        res = self.config.input_resolution
        if image.dim() != 4 or image.shape[1] != 3 or image.shape[-2:] != (res, res):
            raise ValueError(f"expected image of shape (3, {res}, {res}), got {tuple(image.shape)}")

        outputs, picked = [], []
        x = image
        for s, stage in enumerate(self.stages):
            x = stage.embed(x)
            h, w = x.shape[-2:]
            for i, blk in enumerate(stage.blocks):
                if transition_hook is not None:
                    residual = transition_hook(x, i, s)
                    if residual is not None:
                        if residual.shape != x.shape:
                            raise HookContractError(
                                f"hook residual shape {tuple(residual.shape)} != feature shape "
                                f"{tuple(x.shape)} at stage {s}, block {i}"
                            )
                        x = x + residual
                x = to_grid(blk(to_tokens(x)), h, w)
                if return_blocks is not None and s == len(self.stages) - 1 and i in return_blocks:
                    picked.append(x)
            x = to_grid(stage.norm(to_tokens(x)), h, w)
            outputs.append(x)

        result = picked if return_blocks is not None else outputs
        return [f.squeeze(0) for f in result] if squeeze else result


def build_backbone(config: BackboneConfig) -> Backbone:
    return Backbone(config)


# Submodule prefixes whose parameters are trained; everything under
# ``backbone`` is frozen.
TRAINABLE_GROUPS = ("adapters", "injectors", "cross_attention", "decoder")


def freeze_partition(model: nn.Module) -> ParamPartition:
    """Split parameters into frozen (backbone) and trainable (side modules).

    Sets ``requires_grad`` to match.  Raises :class:`PartitionError` for any
    parameter that belongs to neither group.
    """
    frozen, trainable = set(), set()
    if isinstance(model, Backbone):
        for name, p in model.named_parameters():
            p.requires_grad_(False)
            frozen.add(name)
        return ParamPartition(frozen, trainable)

    for name, p in model.named_parameters():
        head = name.split(".", 1)[0]
        if head == "backbone":
            p.requires_grad_(False)
            frozen.add(name)
        elif head in TRAINABLE_GROUPS:
            p.requires_grad_(True)
            trainable.add(name)
        else:
            raise PartitionError(f"parameter {name!r} is in neither the frozen nor the trainable group")
    return ParamPartition(frozen, trainable)


def frozen_digest(model: nn.Module, partition: ParamPartition) -> str:
    """SHA-256 over the raw bytes of every frozen parameter, in name order."""
    params = dict(model.named_parameters())
    h = hashlib.sha256()
    for name in sorted(partition.frozen_ids):
        t = params[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def bilinear(x: torch.Tensor, size) -> torch.Tensor:
    """Bilinear resize without corner alignment; identity when size matches."""
    if isinstance(size, int):
        size = (size, size)
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)
