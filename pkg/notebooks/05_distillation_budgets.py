"""
Distilling from a handful of samples per class
==============================================

With only b samples per class to show a small student, which ones should
they be?  Three choices: a seeded random draw, the samples closest to the
teacher's decision boundary, or the samples the teacher's trust score rates
highest.  The student learns from softened teacher outputs mixed with the
true labels, (1 - lam) * tau^2 * KL + lam * CE.
"""

import numpy as np

from advtrust.attacks import AttackConfig
from advtrust.config import ModelBlock
from advtrust.data import split, synth_shapes
from advtrust.distill import DistillConfig, distill, kd_loss
from advtrust.training import TrainConfig, accuracy, train
from advtrust.vulnerability import fit_normalization, raw_factors, score_profiles

# %%
# The loss on its own: at lam = 1 it is plain cross-entropy, at lam = 0 it
# is the temperature-scaled divergence, which vanishes when the student
# already agrees with the teacher.
s = np.array([[2.0, 0.5, -1.0]])
t = np.array([[1.0, 1.5, -0.5]])
for lam in (0.0, 0.2, 1.0):
    total, grad, kd, ce = kd_loss(s, t, [0], temperature=8.0, lam=lam)
    print(f"lam {lam:.1f}: total {total:.4f}  (kd {kd:.4f}, ce {ce:.4f})")
print("identical logits:", kd_loss(s, s, [0], 8.0, 0.0)[0])

# %%
# Teacher and profiles.  Normalisation here is fitted on the training split
# itself, since that is the pool the transfer set is drawn from.
data = synth_shapes(p=3, n_per_class=167, side=16, seed=0)
train_ds, _, test_ds = split(data, (0.6, 0.2, 0.2), seed=0)
teacher, _ = train(ModelBlock(preset="small_cnn", width=8).build((3, 16, 16), 3), train_ds,
                   TrainConfig(epochs=20, learning_rate=0.02))
attack = AttackConfig.pgd(epsilon=8 / 255, step_size=2 / 255, max_steps=20)
raws = raw_factors(teacher, train_ds.images, attack, train_ds.labels, train_ds.ids)
profiles = score_profiles(raws, fit_normalization(raws))
print(f"teacher accuracy {accuracy(teacher, test_ds.images, test_ds.labels):.3f}")

# %%
# Students at two budgets, one per strategy.
student = ModelBlock(preset="tiny_cnn", width=4).build((3, 16, 16), 3)
print("budget  strategy      student accuracy")
for budget in (10, 20):
    for strategy in ("random", "closest_ddb", "trust_topk"):
        cfg = DistillConfig(temperature=8.0, lam=0.2, budget=budget, strategy=strategy, epochs=60)
        net, log, transfer = distill(teacher, student, train_ds, profiles, cfg)
        print(f"{budget:6d}  {strategy:12s}  {accuracy(net, test_ds.images, test_ds.labels):.3f}"
              f"   ({transfer.ids.size} samples, final loss {log[-1].total:.3f})")
