"""
How much of the spectrum does a prediction need?
================================================

Images are split into square DCT bands: band k holds every coefficient
(u, v) with max(u, v) == k, so band 0 is the mean and band k_max the finest
detail.  Keeping bands from the top down and asking when the prediction
first matches the full-image one gives a per-sample flipping frequency F.
A large F means the decision is already fixed by fine detail alone.
"""

import numpy as np

from advtrust import spectral
from advtrust.config import ModelBlock
from advtrust.data import split, synth_shapes
from advtrust.training import TrainConfig, accuracy, train

# %%
# The band layout for an 8x8 image.
print(spectral.band_index(8, 8))

# %%
# A 16x16 image has 16 bands.  The transform is orthonormal, so the share
# of pixel energy kept by a low-pass reconstruction is easy to read off.
x = synth_shapes(p=3, n_per_class=1, side=16, seed=3).images[0].astype(np.float64)
for k in (0, 3, 7, 15):
    kept = (spectral.lowpass_keep(x, k) ** 2).sum() / (x**2).sum()
    print(f"keep bands 0..{k:2d}: {100 * kept:5.1f}% of the energy")

# %%
# Two models: one trained on images carrying both cues, one trained on
# images with the fine grating removed.  The second can only have learnt
# the smooth blob, so it should need more of the spectrum: a lower F.
spec = ModelBlock(preset="small_cnn", width=8).build((3, 16, 16), 3)
results = {}
for name, hf in (("both cues", 0.6), ("blob only", 0.0)):
    data = synth_shapes(p=3, n_per_class=167, side=16, seed=0, hf_strength=hf)
    train_ds, _, test_ds = split(data, (0.6, 0.2, 0.2), seed=0)
    net, _ = train(spec, train_ds, TrainConfig(epochs=20, learning_rate=0.02))
    F = spectral.flipping_frequencies(net, test_ds.images)
    results[name] = (net, test_ds, F)
    print(f"{name:10s} accuracy {accuracy(net, test_ds.images, test_ds.labels):.3f}  "
          f"mean F {F.mean():.2f} of k_max {spectral.k_max(test_ds.sample_shape)}")

# %%
# Per class, the average band requirement; correct_only restricts it to
# samples the model gets right.
net, test_ds, F = results["both cues"]
for c in range(3):
    rows = test_ds.labels == c
    req = spectral.avg_hf_band_requirement(net, test_ds.images[rows], test_ds.labels[rows], correct_only=True)
    print(f"class {c}: average high-frequency band requirement {req:.2f}")

# %%
# The cumulative sweep: accuracy when only bands j..k_max are kept.
for j, acc in spectral.band_sweep_accuracy(net, test_ds.images, test_ds.labels):
    print(f"bands {j:2d}..15  accuracy {acc:.3f}  " + "#" * int(40 * acc))
