"""
Frequency-domain view of images: orthonormal 2-D DCT, square-ring band
masks, flipping frequency and band sweeps.

Coefficient ``(u, v)`` belongs to band ``max(u, v)``; band 0 is the DC term
and ``k_max = max(H, W) - 1``.  A 32x32 image therefore has 32 bands.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import nn
from .errors import BandError, PreconditionError, ShapeError


@lru_cache(maxsize=32)
def dct_matrix(n):
    """Orthonormal DCT-II matrix ``C`` with ``coeffs = C @ signal``."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    C = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    C[0] /= np.sqrt(2.0)
    C.setflags(write=False)
    return C


def _check_spatial(x):
    x = np.asarray(x)
    if x.ndim < 2 or x.shape[-1] < 2 or x.shape[-2] < 2:
        raise ShapeError(f"need spatial extents >= 2 on the last two axes, got {x.shape}")
    return x


def dct2(image):
    """Per-channel orthonormal 2-D DCT-II over the last two axes (float64)."""
    x = _check_spatial(image).astype(np.float64, copy=False)
    Ch = dct_matrix(x.shape[-2])
    Cw = dct_matrix(x.shape[-1])
    return Ch @ x @ Cw.T


def idct2(coeffs):
    """Exact inverse of :func:`dct2`."""
    f = _check_spatial(coeffs).astype(np.float64, copy=False)
    Ch = dct_matrix(f.shape[-2])
    Cw = dct_matrix(f.shape[-1])
    return Ch.T @ f @ Cw


def k_max(shape):
    """Highest band index for spatial extents ``(..., H, W)``."""
    return max(shape[-2], shape[-1]) - 1


@lru_cache(maxsize=64)
def band_index(h, w):
    u = np.arange(h)[:, None]
    v = np.arange(w)[None, :]
    out = np.maximum(u, v)
    out.setflags(write=False)
    return out


def band_mask(h, w, keep_up_to):
    """Boolean mask of coefficients in bands ``0..keep_up_to``."""
    kmax = max(h, w) - 1
    if not 0 <= keep_up_to <= kmax:
        raise BandError(f"band {keep_up_to} outside [0, {kmax}]")
    return band_index(h, w) <= keep_up_to


def _reconstruct(coeffs, mask, dtype):
    return idct2(coeffs * mask).astype(dtype, copy=False)


def lowpass_keep(image, k):
    """Zero every band above ``k`` and transform back to pixels."""
    x = _check_spatial(image)
    h, w = x.shape[-2:]
    mask = band_mask(h, w, k)
    dtype = x.dtype if x.dtype.kind == "f" else np.float64
    return _reconstruct(dct2(x), mask, dtype)


def highpass_keep(image, j):
    """Keep only bands ``>= j``."""
    x = _check_spatial(image)
    h, w = x.shape[-2:]
    kmax = max(h, w) - 1
    if not 0 <= j <= kmax:
        raise BandError(f"band {j} outside [0, {kmax}]")
    dtype = x.dtype if x.dtype.kind == "f" else np.float64
    return _reconstruct(dct2(x), band_index(h, w) >= j, dtype)


def lowpass_stack(image, bands):
    """``lowpass_keep`` of one image for several bands, stacked on a new leading axis."""
    x = _check_spatial(image)
    h, w = x.shape[-2:]
    coeffs = dct2(x)
    ring = band_index(h, w)
    masks = np.stack([ring <= k for k in bands]).astype(np.float64)
    masks = masks.reshape((len(bands),) + (1,) * (x.ndim - 2) + (h, w))
    dtype = x.dtype if x.dtype.kind == "f" else np.float64
    return idct2(coeffs[None] * masks).astype(dtype, copy=False)


def _first_flip(preds, p0):
    # preds[t] is the prediction with bands 0..(kmax-1-t) kept
    kmax = preds.shape[0]
    changed = np.nonzero(preds != p0)[0]
    if changed.size == 0:
        return 0
    k = kmax - 1 - int(changed[0])
    return k + 1


def flipping_frequency(model, x):
    """
    Highest band whose removal changes the model's prediction.

    Bands are stripped from the top: for ``k = k_max-1, ..., 0`` the image is
    rebuilt from bands ``0..k``.  The first ``k`` at which the prediction
    departs from the full-spectrum prediction gives ``F = k + 1``.  If the
    prediction never changes, ``F = 0``.
    """
    x = np.asarray(x)
    p0 = nn.predict(model, x)
    kmax = k_max(x.shape)
    bands = list(range(kmax - 1, -1, -1))
    stack = lowpass_stack(x, bands)
    preds = np.atleast_1d(nn.predict(model, stack.astype(model.dtype)))
    return _first_flip(preds, p0)


def flipping_frequencies(model, images, chunk=64):
    """:func:`flipping_frequency` for every image in ``images`` (first axis)."""
    images = np.asarray(images)
    if images.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    kmax = k_max(images.shape)
    bands = list(range(kmax - 1, -1, -1))
    p0 = np.atleast_1d(nn.predict(model, images))
    out = np.empty(images.shape[0], dtype=np.int64)
    for start in range(0, images.shape[0], chunk):
        block = images[start : start + chunk]
        stacks = lowpass_stack(block, bands)  # (kmax, n, C, H, W)
        n = block.shape[0]
        flat = stacks.reshape((kmax * n,) + block.shape[1:]).astype(model.dtype)
        preds = np.atleast_1d(nn.predict(model, flat)).reshape(kmax, n)
        for j in range(n):
            out[start + j] = _first_flip(preds[:, j], p0[start + j])
    return out


def avg_hf_band_requirement(model, images, labels=None, correct_only=False):
    """
    Mean flipping frequency over a sample set.

    With ``correct_only`` only samples the model classifies correctly are
    averaged (``labels`` required).
    """
    images = np.asarray(images)
    if images.ndim == len(model.spec.input_shape):
        images = images[None]
    if images.shape[0] == 0:
        raise PreconditionError("average band requirement of an empty sample set")
    if correct_only:
        if labels is None:
            raise PreconditionError("correct_only requires labels")
        keep = np.atleast_1d(nn.predict(model, images)) == np.asarray(labels)
        images = images[keep]
        if images.shape[0] == 0:
            raise PreconditionError("no correctly classified samples to average")
    return float(flipping_frequencies(model, images).mean())


def band_sweep_accuracy(model, images, labels, chunk=256):
    """
    Accuracy on images rebuilt from bands ``>= j`` for ``j = k_max .. 0``.

    Returns a list of ``(j, accuracy)`` pairs, starting from the top band
    alone and accumulating towards the full spectrum.
    """
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.shape[0] == 0:
        raise PreconditionError("band sweep over an empty dataset")
    h, w = images.shape[-2:]
    kmax = max(h, w) - 1
    ring = band_index(h, w)
    coeffs = dct2(images)
    rows = []
    for j in range(kmax, -1, -1):
        if j == 0:
            # all bands: the original pixels, so j=0 is the clean accuracy exactly
            rebuilt = images
        else:
            rebuilt = idct2(coeffs * (ring >= j)).astype(images.dtype, copy=False)
        correct = 0
        for s in range(0, images.shape[0], chunk):
            pred = np.atleast_1d(nn.predict(model, rebuilt[s : s + chunk]))
            correct += int((pred == labels[s : s + chunk]).sum())
        rows.append((j, correct / images.shape[0]))
    return rows
