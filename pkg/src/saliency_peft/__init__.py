"""Parameter-efficient salient object detection with external prompt features.

A frozen toy transformer encoder is steered by block-level adapters and by
injectors that add projected external prompt features at every block
boundary; a small head decodes the saliency mask.
"""
from .backbone import (
    Backbone,
    BackboneConfig,
    ConfigError,
    ParamPartition,
    StageSpec,
    build_backbone,
    freeze_partition,
)
from .decoders import DecoderConfig, finalize_mask
from .model import ModelConfig, SaliencyModel, build_model, expected_param_counts
from .objective import LossBreakdown, bce_loss, iou_loss, total_loss
from .peft import PeftConfig, TrainedParamReport, block_transition, count_trained_params
from .prompts import CrossAttentionConfig, PromptFeature, PromptsConfig, PromptSourceConfig, TextEmbedding

__version__ = "0.1.0"
