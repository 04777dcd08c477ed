"""
Minimal feed-forward classifier core with hand-written reverse mode.

Images are ``(C, H, W)`` arrays; a batch carries a leading ``B`` axis.
Arithmetic runs in the parameters' dtype (float32 by default); losses are
accumulated in float64.

Supported layer descriptors (plain dicts)::

    {"kind": "dense", "in": 128, "out": 10}
    {"kind": "conv2d", "in_ch": 3, "out_ch": 8, "kernel": 3, "stride": 1, "pad": 1}
    {"kind": "relu"}
    {"kind": "maxpool2d", "k": 2}
    {"kind": "flatten"}
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import LabelError, PreconditionError, ShapeError

DTYPE = np.float32

_PARAM_KINDS = ("dense", "conv2d")
_KINDS = ("dense", "conv2d", "relu", "maxpool2d", "flatten")
_REQUIRED = {
    "dense": ("in", "out"),
    "conv2d": ("in_ch", "out_ch", "kernel"),
    "relu": (),
    "maxpool2d": ("k",),
    "flatten": (),
}
_OPTIONAL = {"conv2d": {"stride": 1, "pad": 0}}


def _normalize_layer(desc):
    if not isinstance(desc, dict) or "kind" not in desc:
        raise ShapeError(f"layer descriptor must be a dict with a 'kind': {desc!r}")
    kind = desc["kind"]
    if kind not in _KINDS:
        raise ShapeError(f"unknown layer kind {kind!r}")
    out = {"kind": kind}
    for key in _REQUIRED[kind]:
        if key not in desc:
            raise ShapeError(f"{kind} layer is missing {key!r}")
        out[key] = int(desc[key])
    for key, default in _OPTIONAL.get(kind, {}).items():
        out[key] = int(desc.get(key, default))
    extra = set(desc) - set(out) - {"kind"}
    if extra:
        raise ShapeError(f"{kind} layer has unknown fields {sorted(extra)}")
    return out


def _out_shape(desc, shape):
    kind = desc["kind"]
    if kind == "dense":
        if shape != (desc["in"],):
            raise ShapeError(f"dense expects input ({desc['in']},), got {shape}")
        return (desc["out"],)
    if kind == "conv2d":
        if len(shape) != 3 or shape[0] != desc["in_ch"]:
            raise ShapeError(f"conv2d expects ({desc['in_ch']}, H, W), got {shape}")
        k, s, p = desc["kernel"], desc["stride"], desc["pad"]
        if k < 1 or s < 1 or p < 0:
            raise ShapeError(f"bad conv2d geometry {desc}")
        h = (shape[1] + 2 * p - k) // s + 1
        w = (shape[2] + 2 * p - k) // s + 1
        if h < 1 or w < 1:
            raise ShapeError(f"conv2d kernel larger than padded input {shape}")
        return (desc["out_ch"], h, w)
    if kind == "maxpool2d":
        k = desc["k"]
        if len(shape) != 3 or k < 1 or shape[1] < k or shape[2] < k:
            raise ShapeError(f"maxpool2d(k={k}) cannot pool shape {shape}")
        return (shape[0], shape[1] // k, shape[2] // k)
    if kind == "flatten":
        return (int(np.prod(shape)),)
    return shape


@dataclass(frozen=True)
class ModelSpec:
    """Layer list plus input geometry; validated on construction."""

    layers: tuple
    input_shape: tuple
    num_classes: int
    shapes: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        layers = tuple(_normalize_layer(d) for d in self.layers)
        in_shape = tuple(int(s) for s in self.input_shape)
        if not in_shape or any(s < 1 for s in in_shape):
            raise ShapeError(f"input_shape must have positive extents, got {self.input_shape}")
        if int(self.num_classes) < 2:
            raise ShapeError("num_classes must be at least 2")
        shapes = [in_shape]
        for desc in layers:
            shapes.append(_out_shape(desc, shapes[-1]))
        if shapes[-1] != (int(self.num_classes),):
            raise ShapeError(
                f"final layer emits {shapes[-1]}, expected ({self.num_classes},) logits"
            )
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "input_shape", in_shape)
        object.__setattr__(self, "num_classes", int(self.num_classes))
        object.__setattr__(self, "shapes", tuple(shapes))

    def param_shapes(self):
        """``{layer_index: {"W": shape, "b": shape}}`` for parameterized layers."""
        out = {}
        for i, d in enumerate(self.layers):
            if d["kind"] == "dense":
                out[i] = {"W": (d["out"], d["in"]), "b": (d["out"],)}
            elif d["kind"] == "conv2d":
                k = d["kernel"]
                out[i] = {"W": (d["out_ch"], d["in_ch"], k, k), "b": (d["out_ch"],)}
        return out

    def to_dict(self):
        return {
            "layers": [dict(d) for d in self.layers],
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["layers"]), tuple(d["input_shape"]), d["num_classes"])


def init_params(spec, seed=0, dtype=DTYPE):
    """He-uniform weights and zero biases, seeded."""
    rng = np.random.default_rng(seed)
    params = {}
    for i, shapes in spec.param_shapes().items():
        w_shape = shapes["W"]
        fan_in = int(np.prod(w_shape[1:]))
        bound = math.sqrt(6.0 / fan_in)
        params[i] = {
            "W": rng.uniform(-bound, bound, size=w_shape).astype(dtype),
            "b": np.zeros(shapes["b"], dtype=dtype),
        }
    return params


@dataclass
class Network:
    """A :class:`ModelSpec` bound to its parameters."""

    spec: ModelSpec
    params: dict

    def __post_init__(self):
        expected = self.spec.param_shapes()
        if set(self.params) != set(expected):
            raise ShapeError(
                f"parameter blocks {sorted(self.params)} do not match layers {sorted(expected)}"
            )
        for i, shapes in expected.items():
            for name, shape in shapes.items():
                got = np.shape(self.params[i][name])
                if got != shape:
                    raise ShapeError(f"layer {i} {name} has shape {got}, expected {shape}")

    @classmethod
    def create(cls, spec, seed=0):
        return cls(spec, init_params(spec, seed))

    @property
    def dtype(self):
        for block in self.params.values():
            return block["W"].dtype
        return np.dtype(DTYPE)

    def copy(self):
        return Network(self.spec, copy.deepcopy(self.params))

    def astype(self, dtype):
        params = {i: {k: v.astype(dtype) for k, v in blk.items()} for i, blk in self.params.items()}
        return Network(self.spec, params)

    def param_bytes(self):
        return b"".join(
            np.ascontiguousarray(self.params[i][n]).tobytes()
            for i in sorted(self.params)
            for n in ("W", "b")
        )

    def __call__(self, x):
        return forward(self, x)


# ---------------------------------------------------------------------------
# layer kernels


def _conv_windows(x, k, s, p):
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    return win[:, :, ::s, ::s], x.shape


def _conv_forward(x, W, b, s, p):
    k = W.shape[2]
    win, _ = _conv_windows(x, k, s, p)
    y = np.tensordot(win, W, axes=([1, 4, 5], [1, 2, 3]))  # (B, Ho, Wo, O)
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2)) + b[None, :, None, None]


def _conv_backward(g, x, W, s, p):
    k = W.shape[2]
    win, padded_shape = _conv_windows(x, k, s, p)
    ho, wo = g.shape[2], g.shape[3]
    dW = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
    db = g.sum(axis=(0, 2, 3))
    dxp = np.zeros(padded_shape, dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += np.einsum(
                "bohw,oc->bchw", g, W[:, :, i, j]
            )
    if p:
        dxp = dxp[:, :, p:-p, p:-p]
    return dxp, dW.astype(W.dtype), db.astype(W.dtype)


def _pool_forward(x, k):
    B, C, H, W = x.shape
    ho, wo = H // k, W // k
    blocks = (
        x[:, :, : ho * k, : wo * k]
        .reshape(B, C, ho, k, wo, k)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(B, C, ho, wo, k * k)
    )
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _pool_backward(g, idx, in_shape, k):
    B, C, H, W = in_shape
    ho, wo = g.shape[2], g.shape[3]
    blocks = np.zeros((B, C, ho, wo, k * k), dtype=g.dtype)
    np.put_along_axis(blocks, idx[..., None], g[..., None], axis=-1)
    dx = np.zeros(in_shape, dtype=g.dtype)
    dx[:, :, : ho * k, : wo * k] = (
        blocks.reshape(B, C, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, ho * k, wo * k)
    )
    return dx


# ---------------------------------------------------------------------------
# public operations


def _as_batch(net, x):
    x = np.asarray(x)
    shape = net.spec.input_shape
    if x.shape == shape:
        return x[None], False
    if x.ndim == len(shape) + 1 and x.shape[1:] == shape:
        return x, True
    raise ShapeError(f"input shape {x.shape} does not match model input {shape}")


def _run(net, xb, keep=False):
    h = xb.astype(net.dtype, copy=False)
    caches = []
    for i, d in enumerate(net.spec.layers):
        kind = d["kind"]
        cache = None
        if kind == "dense":
            blk = net.params[i]
            cache = h
            h = h @ blk["W"].T + blk["b"]
        elif kind == "conv2d":
            blk = net.params[i]
            cache = h
            h = _conv_forward(h, blk["W"], blk["b"], d["stride"], d["pad"])
        elif kind == "relu":
            cache = h > 0
            h = np.where(cache, h, 0).astype(h.dtype, copy=False)
        elif kind == "maxpool2d":
            in_shape = h.shape
            h, idx = _pool_forward(h, d["k"])
            cache = (idx, in_shape)
        elif kind == "flatten":
            cache = h.shape
            h = h.reshape(h.shape[0], -1)
        if keep:
            caches.append(cache)
    return h, caches


def forward(net, x):
    """Logits for one sample ``(p,)`` or a batch ``(B, p)``."""
    xb, batched = _as_batch(net, x)
    logits, _ = _run(net, xb)
    return logits if batched else logits[0]


def argmax_lowest(logits):
    """Row-wise argmax; ties resolve to the lowest class index."""
    # np.argmax already returns the first maximal index
    return np.argmax(np.asarray(logits), axis=-1)


def softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=np.float64)
    m = z.max(axis=axis, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=axis, keepdims=True))


def predict(net, x):
    """Predicted class index (argmax of softmax) per sample."""
    out = argmax_lowest(softmax(forward(net, x)))
    return int(out) if np.ndim(out) == 0 else out


def _check_labels(labels, p):
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        raise LabelError(f"labels must be integers, got dtype {labels.dtype}")
    if labels.size and (labels.min() < 0 or labels.max() >= p):
        raise LabelError(f"label out of range for {p} classes: {labels}")
    return labels


def cross_entropy(logits, label):
    """
    Softmax cross-entropy and its gradient with respect to the logits.

    For a batch ``(B, p)`` the loss is the batch mean and the gradient is
    scaled accordingly.
    """
    logits = np.asarray(logits)
    single = logits.ndim == 1
    z = logits[None] if single else logits
    y = _check_labels(np.atleast_1d(label), z.shape[-1])
    if y.shape[0] != z.shape[0]:
        raise LabelError(f"{y.shape[0]} labels for {z.shape[0]} logit rows")
    logp = log_softmax(z)
    rows = np.arange(z.shape[0])
    loss = float(-logp[rows, y].mean())
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    grad /= z.shape[0]
    grad = grad.astype(logits.dtype if logits.dtype.kind == "f" else np.float64)
    return loss, (grad[0] if single else grad)


def backward_logits(net, x, grad_logits):
    """
    Reverse pass for an arbitrary cotangent on the logits.

    Returns ``(input_gradient, parameter_gradients)``; the parameter gradients
    are summed over the batch.
    """
    xb, batched = _as_batch(net, x)
    g = np.asarray(grad_logits, dtype=net.dtype)
    if g.ndim == 1:
        g = g[None]
    logits, caches = _run(net, xb, keep=True)
    if g.shape != logits.shape:
        raise ShapeError(f"cotangent shape {g.shape} does not match logits {logits.shape}")
    grads = {}
    for i in range(len(net.spec.layers) - 1, -1, -1):
        d = net.spec.layers[i]
        kind = d["kind"]
        cache = caches[i]
        if kind == "dense":
            W = net.params[i]["W"]
            grads[i] = {"W": (g.T @ cache).astype(W.dtype), "b": g.sum(axis=0).astype(W.dtype)}
            g = g @ W
        elif kind == "conv2d":
            g, dW, db = _conv_backward(g, cache, net.params[i]["W"], d["stride"], d["pad"])
            grads[i] = {"W": dW, "b": db}
        elif kind == "relu":
            g = np.where(cache, g, 0).astype(g.dtype, copy=False)
        elif kind == "maxpool2d":
            idx, in_shape = cache
            g = _pool_backward(g, idx, in_shape, d["k"])
        elif kind == "flatten":
            g = g.reshape(cache)
    gx = g.astype(net.dtype, copy=False)
    return (gx if batched else gx[0]), grads


def backward(net, x, label):
    """Gradients of :func:`cross_entropy` w.r.t. the input and all parameters."""
    logits = forward(net, x)
    _, g = cross_entropy(logits, label)
    return backward_logits(net, x, g)


def loss_and_grads(net, x, label):
    logits = forward(net, x)
    loss, g = cross_entropy(logits, label)
    gx, grads = backward_logits(net, x, g)
    return loss, gx, grads


def input_jacobian(net, x):
    """Gradient of every logit w.r.t. a single input: shape ``(p, *input_shape)``."""
    x = np.asarray(x)
    if x.shape != net.spec.input_shape:
        raise ShapeError(f"input_jacobian takes one sample, got {x.shape}")
    p = net.spec.num_classes
    reps = np.repeat(x[None], p, axis=0)
    gx, _ = backward_logits(net, reps, np.eye(p, dtype=net.dtype))
    return gx


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckReport:
    errors: dict
    tol: float

    @property
    def failed(self):
        return [name for name, err in self.errors.items() if not err < self.tol]

    @property
    def ok(self):
        return not self.failed

    @property
    def max_error(self):
        return max(self.errors.values()) if self.errors else 0.0


def activation_margin(net, x):
    """
    Distance of an input to the nearest non-differentiable point: the
    smallest ReLU pre-activation magnitude or half-gap between the two
    largest entries of a max-pool window.

    Central differences are only meaningful when the probe cannot push an
    activation across this margin.
    """
    xb, _ = _as_batch(net, x)
    h = xb.astype(net.dtype, copy=False)
    margin = math.inf
    for i, d in enumerate(net.spec.layers):
        kind = d["kind"]
        if kind == "dense":
            h = h @ net.params[i]["W"].T + net.params[i]["b"]
        elif kind == "conv2d":
            h = _conv_forward(h, net.params[i]["W"], net.params[i]["b"], d["stride"], d["pad"])
        elif kind == "relu":
            margin = min(margin, float(np.abs(h).min()))
            h = np.maximum(h, 0)
        elif kind == "maxpool2d":
            k = d["k"]
            if k > 1:
                B, C, H, W = h.shape
                ho, wo = H // k, W // k
                blocks = (
                    h[:, :, : ho * k, : wo * k]
                    .reshape(B, C, ho, k, wo, k)
                    .transpose(0, 1, 2, 4, 3, 5)
                    .reshape(B, C, ho, wo, k * k)
                )
                top2 = np.sort(blocks, axis=-1)[..., -2:]
                gaps = top2[..., 1] - top2[..., 0]
                # windows zeroed by a ReLU tie harmlessly; the ReLU margin covers them
                gaps = gaps[top2[..., 1] != 0]
                if gaps.size:
                    margin = min(margin, float(gaps.min()) / 2)
            h, _ = _pool_forward(h, k)
        elif kind == "flatten":
            h = h.reshape(h.shape[0], -1)
    return margin


def relative_error(analytic, numeric, floor=1e-7):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def numeric_grad(f, arr, step, coords=None):
    """Central differences of scalar ``f()`` w.r.t. ``arr`` (perturbed in place)."""
    out = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    it = range(flat.size) if coords is None else coords
    for j in it:
        orig = flat[j]
        flat[j] = orig + step
        fp = f()
        flat[j] = orig - step
        fm = f()
        flat[j] = orig
        out.reshape(-1)[j] = (fp - fm) / (2 * step)
    return out


def gradient_check(net, x, label, step=1e-3, tol=1e-3, grad_fn=None, max_coords=None, seed=0):
    """
    Compare analytic gradients against central differences, per block.

    The check runs on a float64 copy of the network so that the difference
    quotient is not swamped by float32 rounding. ``grad_fn(net, x, label)``
    overrides the analytic path (used for negative controls). With
    ``max_coords`` only a seeded random subset of each block is probed.
    """
    if not step > 0:
        raise PreconditionError(f"finite-difference step must be > 0, got {step}")
    net64 = net.astype(np.float64)
    x64 = np.array(x, dtype=np.float64)
    grad_fn = grad_fn or backward
    gx, grads = grad_fn(net64, x64, label)
    rng = np.random.default_rng(seed)

    def loss():
        return cross_entropy(forward(net64, x64), label)[0]

    def pick(size):
        if max_coords is None or size <= max_coords:
            return None
        return rng.choice(size, size=max_coords, replace=False)

    def compare(analytic, arr):
        coords = pick(arr.size)
        num = numeric_grad(loss, arr, step, coords)
        if coords is not None:
            a = np.asarray(analytic, dtype=np.float64).reshape(-1)[coords]
            return relative_error(a, num.reshape(-1)[coords])
        return relative_error(analytic, num)

    errors = {"input": compare(gx, x64)}
    for i in sorted(net64.params):
        for name in ("W", "b"):
            errors[f"layer{i}.{name}"] = compare(grads[i][name], net64.params[i][name])
    return GradCheckReport(errors, tol)
