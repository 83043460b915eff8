"""
Trained-parameter budget per configuration
==========================================

The backbone is frozen, so what a configuration costs is the size of the
side modules: adapters, prompt injectors, text cross-attention and the
decoder.  Closed-form counts are checked against the instantiated model.
"""
import copy

from saliency_peft.backbone import freeze_partition
from saliency_peft.harness.config import RunConfig
from saliency_peft.model import SaliencyModel, expected_param_counts
from saliency_peft.peft import count_trained_params
from saliency_peft.prompts import CrossAttentionConfig, PromptSourceConfig, PromptsConfig

base = RunConfig().model_config()
vit = PromptSourceConfig("vit", dim=32, grid=4)
blip = PromptSourceConfig("blip_plus", dim=32, grid=4, cross_attention=CrossAttentionConfig())

rows = {
    "adapters only": [],
    "+ vit injector": [vit],
    "+ vit, blip_plus": [vit, blip],
}
for name, sources in rows.items():
    cfg = copy.deepcopy(base)
    cfg.prompts = PromptsConfig(sources=copy.deepcopy(sources))
    model = SaliencyModel(cfg)
    report = count_trained_params(model, freeze_partition(model))
    assert report.groups == expected_param_counts(cfg)
    frozen = sum(p.numel() for p in model.backbone.parameters())
    print(f"== {name}  (frozen backbone: {frozen} params)")
    print(report.table())
    print()

# a smaller bottleneck ratio widens every adapter
wide = copy.deepcopy(base)
wide.peft.adapter_bottleneck_ratio = 2
print("bottleneck ratio 2, adapters:", expected_param_counts(wide)["adapters"])
