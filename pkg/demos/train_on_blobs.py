"""
Training on a synthetic blob corpus
===================================

Writes a small dataset of reddish ellipses on dark backgrounds, trains the
side modules for a few hundred steps, evaluates on held-out images and
saves one predicted saliency map.

    python3 demos/train_on_blobs.py [workdir] [steps]
"""
import sys
from pathlib import Path

from saliency_peft.harness.config import RunConfig
from saliency_peft.harness.data import make_blob_corpus
from saliency_peft.harness.training import evaluate, predict, train

work = Path(sys.argv[1] if len(sys.argv) > 1 else "blob_demo")
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 400

make_blob_corpus(work / "train", 50, size=64, seed=0)
make_blob_corpus(work / "test", 10, size=64, seed=1)

cfg = RunConfig()
cfg.steps = steps
cfg.paths.train_data = str(work / "train")
cfg.paths.out_dir = str(work / "run")
result = train(cfg)
print(f"loss over {steps} steps: {result.losses[0][2]:.3f} -> {result.losses[-1][2]:.3f}")
print("frozen backbone untouched:", result.frozen_before == result.frozen_after)

report = evaluate(result.checkpoint, work / "test", work / "eval")
print(f"held-out: MAE {report.mae:.4f}  max F {report.max_f:.4f}  max E {report.max_e:.4f}  S {report.s_measure:.4f}")

image = sorted((work / "test" / "images").iterdir())[0]
print("saliency map:", predict(result.checkpoint, image, work / "pred" / image.name))
