"""
Per-sample trust scores
=======================

Two raw factors describe how exposed a sample is: its distance to the
decision boundary d_f (small is bad) and its flipping frequency F (large is
bad: the decision hangs on fine detail).  Both are min-max scaled on a
held-out calibration split, F in reverse, and combined with a harmonic-mean
style score T = 2 d F / (d + F + 1e-5).  A 1-D two-means split on T then
separates trusted from non-trusted samples.
"""

import numpy as np

from advtrust import nn
from advtrust.attacks import AttackConfig
from advtrust.config import ModelBlock
from advtrust.data import split, synth_shapes
from advtrust.training import TrainConfig, accuracy, adversarial_train
from advtrust.vulnerability import fit_normalization, flagging_accuracy, kmeans2, raw_factors, score_profiles

data = synth_shapes(p=3, n_per_class=167, side=16, seed=0)
train_ds, cal_ds, test_ds = split(data, (0.6, 0.2, 0.2), seed=0)

# %%
# A mildly robust model: PGD adversarial training at a small budget.  Each
# mini-batch is the clean batch followed by its adversarial copy.
spec = ModelBlock(preset="small_cnn", width=8).build((3, 16, 16), 3)
adv = AttackConfig.pgd(epsilon=2 / 255, step_size=0.5 / 255, max_steps=7)
net, _ = adversarial_train(spec, train_ds, TrainConfig(epochs=20, learning_rate=0.02, adversarial=adv))
print(f"test accuracy {accuracy(net, test_ds.images, test_ds.labels):.3f}")

# %%
# Raw factors on the calibration split fix the scaling; test samples are
# then scored against those frozen statistics (values outside the
# calibration range clamp to 0 or 1).
attack = AttackConfig.pgd(epsilon=8 / 255, step_size=2 / 255, max_steps=20)
stats = fit_normalization(raw_factors(net, cal_ds.images, attack, cal_ds.labels, cal_ds.ids))
print(stats)
profiles = score_profiles(raw_factors(net, test_ds.images, attack, test_ds.labels, test_ds.ids), stats)
for p in profiles[:5]:
    print(f"id {p.sample_id:3d}  d_f {p.d_f:.3f}  F {p.F:2d}  d_hat {p.d_hat:.2f}  "
          f"F_hat {p.F_hat:.2f}  T {p.T:.3f}")

# %%
# Flag the low cluster of each score and see what fraction of the flagged
# samples the model actually gets wrong.  Chance level is the error rate.
preds = np.atleast_1d(nn.predict(net, test_ds.images))
print(f"error rate {100 * np.mean(preds != test_ds.labels):.1f}%")
for name in ("d_hat", "F_hat", "T"):
    scores = np.array([getattr(p, name) for p in profiles])
    part = kmeans2(scores, test_ds.ids)
    print(f"{name:6s} centroids {part.non_trust_centroid:.3f} / {part.trust_centroid:.3f}  "
          f"flagged {int((~part.trust).sum()):3d}  "
          f"flagging accuracy {flagging_accuracy(part, preds, test_ds.labels):.1f}%")
