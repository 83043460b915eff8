"""Assembled model: frozen backbone, adapters, injectors, cross-attention, decoder."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import torch
from torch import nn

from .backbone import (
    MULTI_SCALE,
    Backbone,
    BackboneConfig,
    ConfigError,
    generator_for,
    init_module,
)
from .decoders import DecoderConfig, MultiScaleDecoder, SingleScaleDecoder
from .peft import ALPHA_LEARNED, Injector, PeftConfig, StageAdapters, transition_residual
from .prompts import CrossAttention, PromptsConfig, tokens_to_grid


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    peft: PeftConfig = field(default_factory=PeftConfig)
    prompts: PromptsConfig = field(default_factory=PromptsConfig.two_source_default)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def validate(self) -> None:
        self.backbone.validate()
        self.peft.validate()
        self.prompts.validate()
        self.decoder.validate()
        self.peft.sites([s.depth for s in self.backbone.stages])
        for s in self.backbone.stages:
            if self.peft.bottleneck(s.embed_dim) >= s.embed_dim:
                raise ConfigError(f"peft.adapter_bottleneck_ratio leaves no bottleneck for embed_dim {s.embed_dim}")


class SaliencyModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        bb = config.backbone
        seed = bb.seed
        self.backbone = Backbone(bb)

        self.sites = config.peft.sites([s.depth for s in bb.stages])
        self.adapters = nn.ModuleDict()
        for s, spec in enumerate(bb.stages):
            blocks = [i for st, i in self.sites if st == s]
            if blocks:
                self.adapters[str(s)] = StageAdapters(
                    spec.embed_dim, config.peft.bottleneck(spec.embed_dim), blocks, config.peft.adapter_bias
                )
        init_module(self.adapters, generator_for(seed, "adapters"))

        self.injectors = nn.ModuleDict()
        self.cross_attention = nn.ModuleDict()
        sources = config.prompts.sources
        for src in sources:
            per_stage = nn.ModuleDict(
                {
                    str(s): Injector(src.dim, spec.embed_dim, config.peft.alpha_init, config.peft.alpha_mode)
                    for s, spec in enumerate(bb.stages)
                    if any(st == s for st, _ in self.sites)
                }
            )
            init_module(per_stage, generator_for(seed, f"injector:{src.name}"))
            if config.peft.alpha_mode == ALPHA_LEARNED:
                for inj in per_stage.values():
                    nn.init.constant_(inj.alpha, config.peft.alpha_init)
            self.injectors[src.name] = per_stage
            if src.cross_attention is not None:
                ca = CrossAttention(src.dim, src.cross_attention)
                init_module(ca, generator_for(seed, f"cross_attention:{src.name}"))
                self.cross_attention[src.name] = ca

        if bb.kind == MULTI_SCALE:
            self.decoder = MultiScaleDecoder([s.embed_dim for s in bb.stages], config.decoder)
            self.return_blocks = None
        else:
            self.return_blocks = bb.decoder_layer_indices()
            self.decoder = SingleScaleDecoder(
                bb.stages[0].embed_dim, len(self.return_blocks), config.decoder, bb.input_resolution
            )
        init_module(self.decoder, generator_for(seed, "decoder"))

    @property
    def source_names(self) -> list[str]:
        return [s.name for s in self.config.prompts.sources]

    def prompt_grids(
        self,
        prompts: Optional[Mapping[str, torch.Tensor]],
        text: Optional[Mapping[str, torch.Tensor]] = None,
        text_mask: Optional[Mapping[str, torch.Tensor]] = None,
    ) -> dict[str, torch.Tensor]:
        """Batched prompts as ``(B, dim, h, w)`` grids, cross-attending where configured."""
        grids = {}
        for src in self.config.prompts.sources:
            if prompts is None or src.name not in prompts:
                raise KeyError(f"missing prompt feature for source {src.name!r}")
            x = prompts[src.name]
            if src.layout == "tokens":
                if src.name in self.cross_attention:
                    if text is None or src.name not in text:
                        raise KeyError(f"missing text embedding for cross-attended source {src.name!r}")
                    mask = None if text_mask is None else text_mask.get(src.name)
                    x = self.cross_attention[src.name](x, text[src.name], mask)
                x = tokens_to_grid(x)
            grids[src.name] = x
        return grids

    def forward(self, images, prompts=None, text=None, text_mask=None) -> torch.Tensor:
        """Saliency logits; ``(B, 1, h, w)`` for a batch, ``(1, h, w)`` for one image."""
        squeeze = images.dim() == 3
        if squeeze:
            images = images.unsqueeze(0)
            prompts = None if prompts is None else {k: v.unsqueeze(0) for k, v in prompts.items()}
            text = None if text is None else {k: v.unsqueeze(0) for k, v in text.items()}
        grids = self.prompt_grids(prompts, text, text_mask) if self.config.prompts.sources else {}
        logits = self.decoder(self.backbone(images, self.make_hook(grids), self.return_blocks))
        return logits.squeeze(0) if squeeze else logits

    def make_hook(self, grids: Mapping[str, torch.Tensor]):
        sites = set(self.sites)
        cache: dict[int, list[torch.Tensor]] = {}
        names = list(grids)

        def hook(feature, block_index, stage_index):
            if (stage_index, block_index) not in sites:
                return None
            key = str(stage_index)
            ad = self.adapters[key](feature, block_index) if key in self.adapters else None
            if stage_index not in cache:
                size = feature.shape[-2:]
                cache[stage_index] = [self.injectors[n][key](grids[n], size) for n in names]
            alphas = [self.injectors[n][key].alpha for n in names]
            return transition_residual(ad, cache[stage_index], alphas)

        return hook

    def frozen_forward(self, images) -> torch.Tensor:
        """Backbone without side modules, straight into the decoder."""
        return self.decoder(self.backbone(images, None, self.return_blocks))


def build_model(config: ModelConfig) -> SaliencyModel:
    return SaliencyModel(config)


def _linear(i: int, o: int, bias: bool = True) -> int:
    return i * o + (o if bias else 0)


def expected_param_counts(config: ModelConfig) -> dict[str, int]:
    """Closed-form trainable parameter counts per group, from the config alone."""
    bb, peft = config.backbone, config.peft
    depths = [s.depth for s in bb.stages]
    sites = peft.sites(depths)
    bias = peft.adapter_bias

    adapters = injectors = cross = 0
    for s, spec in enumerate(bb.stages):
        n_sites = sum(1 for st, _ in sites if st == s)
        if not n_sites:
            continue
        c, b = spec.embed_dim, peft.bottleneck(spec.embed_dim)
        adapters += _linear(c, b, bias) + n_sites * (_linear(b, b, bias) + _linear(b, c, bias))
        for src in config.prompts.sources:
            injectors += _linear(src.dim, c) + (c if peft.alpha_mode == ALPHA_LEARNED else 0)

    for src in config.prompts.sources:
        ca = src.cross_attention
        if ca is None:
            continue
        w, t, hidden = src.dim, ca.text_dim, ca.ff_ratio * src.dim
        per_layer = (
            2 * w  # query norm
            + _linear(w, w) + 2 * _linear(t, w) + _linear(w, w)  # q, k, v, out
            + 2 * w  # ff norm
            + _linear(w, hidden) + _linear(hidden, w)
        )
        cross += ca.layers * per_layer

    dec = config.decoder
    if bb.kind == MULTI_SCALE:
        cd, fd = dec.common_dim, dec.fuse_dim
        decoder = sum(_linear(s.embed_dim, cd) for s in bb.stages)
        decoder += _linear(4 * cd, fd) + 2 * fd + _linear(fd, 1)
    else:
        c, m = bb.stages[0].embed_dim, dec.common_dim
        decoder = 4 * (_linear(9 * c, m) + _linear(9 * m, m)) + _linear(4 * m, 1)

    return {"adapters": adapters, "injectors": injectors, "cross_attention": cross, "decoder": decoder}
