"""Train a small digit classifier, then look inside one DRA attack.

Needs mlxtend for its 5000 bundled MNIST digits. Runs in about a minute on
one CPU:

    python demos/dra_anatomy.py
"""

import numpy as np
import torch
from mlxtend.data import mnist_data

from advtune.attacks import dra, retained_count
from advtune.data import LabeledDataset
from advtune.evaluation import ablation_p_sweep, evaluate_robustness
from advtune.models import ModelSpec, build_model
from advtune.training import TrainPlan, train_standard

X, y = mnist_data()
order = np.random.default_rng(0).permutation(len(y))
images = (X[order].reshape(-1, 1, 28, 28) / 255.0).astype(np.float32)
labels = y[order]
train = LabeledDataset(images[:4000], labels[:4000], "digits-train", 10)
test = LabeledDataset(images[4000:], labels[4000:], "digits-test", 10)

model = build_model(ModelSpec.for_dataset("small_cnn", "mnist"), seed=0)
train_standard(model, train, TrainPlan(epochs=8, lr=0.05))

# The L1 budget is per pixel: 0.1 per input, 78.4 in total.
eps = 0.1 * 784
x = torch.from_numpy(test.images[:8])
t = torch.from_numpy(test.labels[:8])

full = dra(model, x, t, eps, p=1.0, T=20)
sparse = dra(model, x, t, eps, p=2 / 3, T=20)
print(f"retained pixels at p=2/3: {retained_count(2 / 3, 784)} of 784")
# Clipping to [0, 1] leaves the realized L1 below the budget.
print(f"L1 of full perturbation:   {full.l1_norms.tolist()[:3]}")
print(f"L1 of masked perturbation: {sparse.l1_norms.tolist()[:3]}")
print("clean predictions:   ", model.predict(x).argmax(1).tolist())
print("after DRA (p=2/3):   ", model.predict(sparse.x_adv).argmax(1).tolist())

curve = ablation_p_sweep(model, test.subset(slice(0, 300)), eps, 20, [0.0, 1 / 6, 1 / 3, 2 / 3, 1.0])
for p, s in zip(curve.p_values, curve.success_rate_on_correct):
    print(f"p={p:.2f}  success on correct={s:.3f}")

report = evaluate_robustness(model, test.subset(slice(0, 300)), [0.0, 0.1, 0.2], iterations=10)
for cell in report.cells:
    print(f"PGD eps={cell.epsilon:.1f}  robust accuracy={cell.robust_accuracy:.3f}")
