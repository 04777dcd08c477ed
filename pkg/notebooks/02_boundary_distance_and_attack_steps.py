"""
Boundary distance versus attack steps
=====================================

An L-infinity PGD attack started at a sample and stopped at the first label
flip gives two numbers: how far the sample had to move (the L2 length of
the displacement, our estimate of its distance to the decision boundary)
and how many steps that took.  Samples close to the boundary should fall
quickly.
"""

import numpy as np

from advtrust import nn
from advtrust.attacks import AttackConfig, deepfool_attack, pgd_attack, steps_profile
from advtrust.config import ModelBlock
from advtrust.data import split, synth_shapes
from advtrust.training import TrainConfig, accuracy, train

# Synthetic 3-class images with a smooth blob cue and a fine grating cue.
data = synth_shapes(p=3, n_per_class=167, side=16, seed=0)
train_ds, cal_ds, test_ds = split(data, (0.6, 0.2, 0.2), seed=0)
spec = ModelBlock(preset="small_cnn", width=8).build((3, 16, 16), 3)
net, log = train(spec, train_ds, TrainConfig(epochs=20, learning_rate=0.02))
print(f"clean test accuracy {accuracy(net, test_ds.images, test_ds.labels):.3f}")

# %%
# One sample, both attacks.  PGD takes fixed-size sign steps; DeepFool
# linearises the classifier and jumps to the nearest linearised boundary,
# so it usually needs only a handful of iterations and lands closer.
x = test_ds.images[0]
pgd = AttackConfig.pgd(epsilon=8 / 255, step_size=2 / 255, max_steps=20)
df = AttackConfig.deepfool(max_steps=50, overshoot=0.02)
for name, res in (("pgd", pgd_attack(net, x, pgd)), ("deepfool", deepfool_attack(net, x, df))):
    print(f"{name:9s} success={res.success} steps={res.steps} delta={res.delta:.4f} "
          f"{res.original_pred}->{res.adversarial_pred}")

# %%
# Over the whole test split.  Failed attacks are censored at the budget
# ceiling (epsilon * sqrt(n) for PGD) and flagged as such.
prof = steps_profile(net, test_ds.images, pgd, labels=test_ds.labels, sample_ids=test_ds.ids)
d_f, steps = np.array(prof.d_f), np.array(prof.steps)
print(f"success rate {np.mean(prof.success):.2f}")
print(f"rank correlation between distance and steps {prof.rank_correlation:.3f}")
# PGD moves in sign steps, so the distance grows roughly with the step count;
# the spread within a row comes from how many pixels hit the clip bounds.
print("steps  count  mean d_f  censored")
for k in np.unique(steps):
    rows = steps == k
    print(f"{k:5d}  {rows.sum():5d}  {d_f[rows].mean():8.4f}  {int(np.sum(prof.censored[rows])):8d}")
