"""External prompt features and the vision/text cross-attention interaction."""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from .backbone import ConfigError
from .harness.tensorfile import read_tensor

TOKENS = "tokens"
GRID = "grid"


class MissingPromptError(FileNotFoundError):
    pass


@dataclass
class PromptFeature:
    source: str
    layout: str
    data: torch.Tensor

    def __post_init__(self):
        if self.layout not in (TOKENS, GRID):
            raise ValueError(f"unknown prompt layout {self.layout!r}")
        if self.layout == TOKENS:
            if self.data.dim() != 2:
                raise ValueError(f"token prompt must be (T, dim), got {tuple(self.data.shape)}")
            side = math.isqrt(self.data.shape[0])
            if side * side != self.data.shape[0]:
                raise ValueError(f"token count {self.data.shape[0]} is not a square")
        elif self.data.dim() != 3:
            raise ValueError(f"grid prompt must be (dim, h, w), got {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise ValueError(f"prompt {self.source!r} has non-finite entries")

    @property
    def dim(self) -> int:
        return self.data.shape[1] if self.layout == TOKENS else self.data.shape[0]

    def as_grid(self) -> torch.Tensor:
        if self.layout == GRID:
            return self.data
        return tokens_to_grid(self.data)

    def as_tokens(self) -> torch.Tensor:
        if self.layout == TOKENS:
            return self.data
        return self.data.flatten(1).T


def tokens_to_grid(tokens: torch.Tensor) -> torch.Tensor:
    """``(..., T, dim)`` -> ``(..., dim, s, s)`` with ``s * s == T``."""
    t = tokens.shape[-2]
    side = math.isqrt(t)
    if side * side != t:
        raise ValueError(f"token count {t} is not a square")
    return tokens.transpose(-2, -1).reshape(*tokens.shape[:-2], tokens.shape[-1], side, side)


@dataclass
class TextEmbedding:
    data: torch.Tensor

    def __post_init__(self):
        if self.data.dim() != 2 or self.data.shape[0] < 1:
            raise ValueError(f"text embedding must be (tokens >= 1, dim), got {tuple(self.data.shape)}")

    @property
    def tokens(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass
class CrossAttentionConfig:
    layers: int = 1
    heads: int = 1
    text_dim: int = 32
    text_tokens: int = 8
    ff_ratio: int = 4

    def validate(self, width: int, where: str = "cross_attention") -> None:
        if self.layers < 1:
            raise ConfigError(f"{where}.layers must be >= 1")
        if self.heads < 1 or width % self.heads:
            raise ConfigError(f"{where}.heads ({self.heads}) must divide the prompt width ({width})")
        if self.text_dim < 1 or self.text_tokens < 1:
            raise ConfigError(f"{where}.text_dim and text_tokens must be positive")


@dataclass
class PromptSourceConfig:
    name: str
    dim: int = 32
    grid: int = 4
    layout: str = TOKENS
    provider: str = "synthetic"
    # synthetic only: "random" (seeded noise per image id) or "pooled" (patch projection of the image)
    synthetic_mode: str = "pooled"
    cross_attention: Optional[CrossAttentionConfig] = None

    def __post_init__(self):
        if isinstance(self.cross_attention, dict):
            self.cross_attention = CrossAttentionConfig(**self.cross_attention)

    def validate(self, where: str) -> None:
        if self.dim < 1 or self.grid < 1:
            raise ConfigError(f"{where}.dim and {where}.grid must be positive")
        if self.layout not in (TOKENS, GRID):
            raise ConfigError(f"{where}.layout must be 'tokens' or 'grid', got {self.layout!r}")
        if self.provider not in ("synthetic", "file"):
            raise ConfigError(f"{where}.provider must be 'synthetic' or 'file', got {self.provider!r}")
        if self.synthetic_mode not in ("random", "pooled"):
            raise ConfigError(f"{where}.synthetic_mode must be 'random' or 'pooled'")
        if self.cross_attention is not None:
            if self.layout != TOKENS:
                raise ConfigError(f"{where}: cross-attention needs a token-layout source")
            self.cross_attention.validate(self.dim, f"{where}.cross_attention")


@dataclass
class PromptsConfig:
    sources: list[PromptSourceConfig] = field(default_factory=list)
    prompts_dir: Optional[str] = None
    seed: int = 0

    def __post_init__(self):
        self.sources = [s if isinstance(s, PromptSourceConfig) else PromptSourceConfig(**s) for s in self.sources]

    def validate(self) -> None:
        names = [s.name for s in self.sources]
        if len(set(names)) != len(names):
            raise ConfigError(f"prompts.sources has duplicate names: {names}")
        for i, s in enumerate(self.sources):
            s.validate(f"prompts.sources[{i}]")
            if s.provider == "file" and not self.prompts_dir:
                raise ConfigError(f"prompts.prompts_dir is required by file source {s.name!r}")

    @classmethod
    def two_source_default(cls) -> "PromptsConfig":
        """ViT-like pooled tokens plus BLIP-like tokens refined by text cross-attention."""
        return cls(
            sources=[
                PromptSourceConfig("vit", dim=32, grid=4, synthetic_mode="pooled"),
                PromptSourceConfig("blip_plus", dim=32, grid=4, synthetic_mode="pooled",
                                   cross_attention=CrossAttentionConfig()),
            ]
        )


def _rng(*parts) -> np.random.Generator:
    keys = [p if isinstance(p, int) else zlib.crc32(str(p).encode()) for p in parts]
    return np.random.default_rng(keys)


class PromptProvider:
    """Supplies one source's prompt feature for an image.

    ``file`` reads ``<prompts_dir>/<source>/<image_id>.ten``; ``synthetic`` is a
    deterministic function of ``(seed, source, image_id)`` and, in ``pooled``
    mode, of the image itself.
    """

    def __init__(self, source: PromptSourceConfig, prompts_dir=None, seed: int = 0):
        self.source = source
        self.prompts_dir = Path(prompts_dir) if prompts_dir else None
        self.seed = seed
        self._projection = None

    def provide(self, image_id: str, image: Optional[torch.Tensor] = None) -> PromptFeature:
        src = self.source
        if src.provider == "file":
            path = self.prompts_dir / src.name / f"{image_id}.ten"
            if not path.exists():
                raise MissingPromptError(f"no {src.name!r} prompt for image {image_id!r} at {path}")
            data = torch.from_numpy(read_tensor(path))
        elif src.synthetic_mode == "random":
            n = src.grid * src.grid
            data = torch.from_numpy(_rng(self.seed, src.name, image_id).standard_normal((n, src.dim)).astype(np.float32))
            if src.layout == GRID:
                data = tokens_to_grid(data)
        else:
            if image is None:
                raise ValueError(f"pooled synthetic source {src.name!r} needs the image")
            data = self._pooled(image)
            if src.layout == GRID:
                data = tokens_to_grid(data)

        feature = PromptFeature(src.name, src.layout, data.float())
        if feature.dim != src.dim:
            raise ConfigError(f"prompt {src.name!r} for {image_id!r} has width {feature.dim}, config says {src.dim}")
        return feature

    def _pooled(self, image: torch.Tensor) -> torch.Tensor:
        g = self.source.grid
        c, h, w = image.shape
        if h % g or w % g:
            raise ConfigError(f"pooled source grid {g} must divide the image size {h}x{w}")
        kh, kw = h // g, w // g
        patches = image.reshape(c, g, kh, g, kw).permute(1, 3, 0, 2, 4).reshape(g * g, c * kh * kw)
        if self._projection is None or self._projection.shape[0] != patches.shape[1]:
            proj = _rng(self.seed, self.source.name, "projection").standard_normal((patches.shape[1], self.source.dim))
            self._projection = torch.from_numpy((proj / math.sqrt(patches.shape[1])).astype(np.float32))
        return patches.float() @ self._projection


class TextProvider:
    """Caption text embeddings: ``<prompts_dir>/text/<image_id>.ten`` or seeded synthetic rows."""

    def __init__(self, cfg: CrossAttentionConfig, provider: str = "synthetic", prompts_dir=None, seed: int = 0):
        self.cfg = cfg
        self.provider = provider
        self.prompts_dir = Path(prompts_dir) if prompts_dir else None
        self.seed = seed

    def provide(self, image_id: str) -> TextEmbedding:
        if self.provider == "file":
            path = self.prompts_dir / "text" / f"{image_id}.ten"
            if not path.exists():
                raise MissingPromptError(f"no text embedding for image {image_id!r} at {path}")
            data = torch.from_numpy(read_tensor(path))
        else:
            rows = _rng(self.seed, "text", image_id).standard_normal((self.cfg.text_tokens, self.cfg.text_dim))
            data = torch.from_numpy(rows.astype(np.float32))
        emb = TextEmbedding(data)
        if emb.dim != self.cfg.text_dim:
            raise ConfigError(f"text embedding for {image_id!r} has width {emb.dim}, config says {self.cfg.text_dim}")
        return emb


def stable_softmax(scores: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
    scores = scores - scores.amax(dim=-1, keepdim=True)
    e = scores.exp()
    return e / e.sum(dim=-1, keepdim=True)


class CrossAttentionLayer(nn.Module):
    """Pre-norm block: x + MHA(LN(x), text, text), then x + FF(LN(x))."""

    def __init__(self, width: int, text_dim: int, heads: int = 1, ff_ratio: int = 4):
        super().__init__()
        self.heads = heads
        self.norm_q = nn.LayerNorm(width)
        self.q = nn.Linear(width, width)
        self.k = nn.Linear(text_dim, width)
        self.v = nn.Linear(text_dim, width)
        self.out = nn.Linear(width, width)
        self.norm_ff = nn.LayerNorm(width)
        self.ff = nn.Sequential(nn.Linear(width, ff_ratio * width), nn.GELU(), nn.Linear(ff_ratio * width, width))

    def attend(self, x, text, key_mask=None):
        b, n, w = x.shape
        m = text.shape[1]
        hd = w // self.heads
        q = self.q(self.norm_q(x)).view(b, n, self.heads, hd).transpose(1, 2)
        k = self.k(text).view(b, m, self.heads, hd).transpose(1, 2)
        v = self.v(text).view(b, m, self.heads, hd).transpose(1, 2)
        mask = None if key_mask is None else key_mask[:, None, None, :]
        weights = stable_softmax((q @ k.transpose(-2, -1)) / math.sqrt(hd), mask)
        return self.out((weights @ v).transpose(1, 2).reshape(b, n, w))

    def forward(self, x, text, key_mask=None):
        x = x + self.attend(x, text, key_mask)
        return x + self.ff(self.norm_ff(x))


class CrossAttention(nn.Module):
    def __init__(self, width: int, cfg: CrossAttentionConfig):
        super().__init__()
        self.layers = nn.ModuleList(
            CrossAttentionLayer(width, cfg.text_dim, cfg.heads, cfg.ff_ratio) for _ in range(cfg.layers)
        )

    def forward(self, tokens: torch.Tensor, text: torch.Tensor, key_mask: Optional[torch.Tensor] = None):
        """``tokens`` (B, N, width) query the ``text`` rows (B, M, text_dim)."""
        if text.shape[-2] == 0:
            raise ValueError("text embedding is empty")
        squeeze = tokens.dim() == 2
        if squeeze:
            tokens, text = tokens.unsqueeze(0), text.unsqueeze(0)
            key_mask = None if key_mask is None else key_mask.unsqueeze(0)
        x = tokens
        for layer in self.layers:
            x = layer(x, text, key_mask)
        return x.squeeze(0) if squeeze else x


def cross_attend(vision: PromptFeature, text: TextEmbedding, module: CrossAttention, name: str = "blip_plus") -> PromptFeature:
    if vision.layout != TOKENS:
        raise ValueError("cross_attend needs token-layout vision features")
    if text.tokens == 0:
        raise ValueError("text embedding is empty")
    out = module(vision.data, text.data)
    return PromptFeature(name, TOKENS, out)
