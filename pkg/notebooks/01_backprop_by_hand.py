"""
Backpropagation by hand, checked by finite differences
=======================================================

The network code is plain numpy.  Every layer has a hand-written backward
pass, so the first thing worth seeing is that those gradients agree with
brute-force finite differences.
"""

import numpy as np

from advtrust import nn
from advtrust.config import ModelBlock

# A small CNN of the kind used throughout: two conv/relu/pool stages and a
# dense head, for 3-channel 16x16 images and 3 classes.
spec = ModelBlock(preset="small_cnn", width=4).build((3, 16, 16), 3)
net = nn.Network.create(spec, seed=0)
for i, layer in enumerate(spec.layers):
    print(i, layer)

# %%
# Forward pass and prediction on a random image.
x = np.random.default_rng(1).uniform(size=(3, 16, 16)).astype(np.float32)
logits = nn.forward(net, x)
print("logits", logits, "-> class", nn.predict(net, x))

# %%
# The gradient check perturbs every parameter in both directions.  It runs
# on a float64 copy of the network so rounding does not swamp the signal.
report = nn.gradient_check(net, x, label=2, step=1e-3, tol=1e-3)
for block, err in sorted(report.errors.items()):
    print(f"{block:12s} relative error {err:.2e}")
print("all blocks within tolerance:", report.ok)

# %%
# Input gradients are what the attacks use.  Row c of the input Jacobian is
# the gradient of logit c with respect to the image.
J = nn.input_jacobian(net.astype(np.float64), x.astype(np.float64))
print("jacobian shape", J.shape)
