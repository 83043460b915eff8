"""
How prompt injectors enter the frozen backbone
==============================================

Every block boundary receives ``adapter(F) + sum_j alpha_j * injector_j(P_j)``.
With alpha at zero the prompts have no effect at all; a learned alpha lets
them in gradually.
"""
import torch

from saliency_peft.harness.config import RunConfig
from saliency_peft.model import SaliencyModel
from saliency_peft.prompts import PromptsConfig

cfg = RunConfig().model_config()
model = SaliencyModel(cfg).eval()

g = torch.Generator().manual_seed(0)
res = cfg.backbone.input_resolution
images = torch.rand(1, 3, res, res, generator=g)
prompts = {s.name: torch.randn(1, s.grid * s.grid, s.dim, generator=g) for s in cfg.prompts.sources}
text = {
    s.name: torch.randn(1, s.cross_attention.text_tokens, s.cross_attention.text_dim, generator=g)
    for s in cfg.prompts.sources
    if s.cross_attention is not None
}

# the hook sees each stage's feature grid; record the residual norms it adds
norms = []
grids = model.prompt_grids(prompts, text)
hook = model.make_hook(grids)


def recording_hook(feature, block, stage):
    r = hook(feature, block, stage)
    norms.append((stage, block, float(feature.norm()), float(r.norm())))
    return r


with torch.no_grad():
    model.backbone(images, recording_hook)
print("stage block  |F|      |residual|")
for s, b, f, r in norms:
    print(f"{s:5d} {b:5d}  {f:8.3f} {r:8.3f}")

plain_cfg = RunConfig().model_config()
plain_cfg.prompts = PromptsConfig(sources=[])
plain = SaliencyModel(plain_cfg).eval()
with torch.no_grad():
    base = plain(images)
    for inj in (i for per in model.injectors.values() for i in per.values()):
        inj.alpha.zero_()
    silenced = model(images, prompts, text)
    for inj in (i for per in model.injectors.values() for i in per.values()):
        inj.alpha.fill_(1.0)
    loud = model(images, prompts, text)
print("\nalpha = 0 matches the adapter-only model:", torch.equal(silenced, base))
print(f"alpha = 1 moves the logits by {float((loud - base).abs().max()):.4f}")
