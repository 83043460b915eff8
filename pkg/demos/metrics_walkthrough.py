"""
Saliency metrics on hand-made masks
===================================

Four toy predictions against one ground truth, from perfect to inverted.
"""
import numpy as np

from saliency_peft.metrics import aggregate, evaluate_pair, f_beta

gt = np.zeros((16, 16), np.uint8)
gt[4:12, 5:11] = 1

rng = np.random.default_rng(0)
blurred = np.clip(gt + rng.normal(0, 0.25, gt.shape), 0, 1)
predictions = {
    "perfect": gt.astype(float),
    "noisy": blurred,
    "half": np.full(gt.shape, 0.5),
    "inverted": 1.0 - gt,
}

print(f"{'prediction':<10} {'MAE':>7} {'max F':>7} {'max E':>7} {'S':>7}")
for name, pred in predictions.items():
    r = aggregate([evaluate_pair(pred, gt)])
    print(f"{name:<10} {r.mae:7.4f} {r.max_f:7.4f} {r.max_e:7.4f} {r.s_measure:7.4f}")

# F weights precision over recall with beta^2 = 0.3
f, _ = f_beta(np.array([0.5, 0.9, 0.6]), np.array([0.5, 0.6, 0.9]))
print("\nF at (P, R) = (0.5, 0.5), (0.9, 0.6), (0.6, 0.9):", np.round(f, 4))

# the dataset report averages precision and recall per threshold before taking F
report = aggregate([evaluate_pair(p, gt) for p in predictions.values()], list(predictions))
best = int(np.argmax(report.f_beta))
print(f"\ndataset max F {report.max_f:.4f} at threshold {best}")
