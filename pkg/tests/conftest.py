import numpy as np
import pytest

from advtrust.nn import ModelSpec, Network

# filled by the acceptance suite, echoed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def dense_net(W, b=None, input_shape=None, dtype=np.float32):
    """A single dense layer (behind a flatten when the input is an image)."""
    W = np.asarray(W, dtype=dtype)
    out, n = W.shape
    b = np.zeros(out, dtype=dtype) if b is None else np.asarray(b, dtype=dtype)
    input_shape = tuple(input_shape or (n,))
    layers = [{"kind": "dense", "in": n, "out": out}]
    if input_shape != (n,):
        layers.insert(0, {"kind": "flatten"})
    spec = ModelSpec(tuple(layers), input_shape, out)
    return Network(spec, {len(layers) - 1: {"W": W, "b": b}})


def logistic_net():
    """One input, mirrored logits ``(-x, x)``: class 1 iff ``x > 0``."""
    return dense_net([[-1.0], [1.0]])


# small architectures, one per layer kind under test
ARCHS = {
    "dense": ((6,), [{"kind": "dense", "in": 6, "out": 3}]),
    "relu": ((6,), [
        {"kind": "dense", "in": 6, "out": 8},
        {"kind": "relu"},
        {"kind": "dense", "in": 8, "out": 3},
    ]),
    "conv2d": ((2, 5, 5), [
        {"kind": "conv2d", "in_ch": 2, "out_ch": 3, "kernel": 3, "pad": 1},
        {"kind": "flatten"},
        {"kind": "dense", "in": 75, "out": 3},
    ]),
    "conv2d_stride": ((2, 7, 7), [
        {"kind": "conv2d", "in_ch": 2, "out_ch": 3, "kernel": 3, "stride": 2},
        {"kind": "flatten"},
        {"kind": "dense", "in": 27, "out": 3},
    ]),
    "maxpool2d": ((2, 6, 6), [
        {"kind": "conv2d", "in_ch": 2, "out_ch": 3, "kernel": 3, "pad": 1},
        {"kind": "maxpool2d", "k": 2},
        {"kind": "flatten"},
        {"kind": "dense", "in": 27, "out": 3},
    ]),
    "cnn": ((3, 8, 8), [
        {"kind": "conv2d", "in_ch": 3, "out_ch": 4, "kernel": 3, "pad": 1},
        {"kind": "relu"},
        {"kind": "maxpool2d", "k": 2},
        {"kind": "flatten"},
        {"kind": "dense", "in": 64, "out": 4},
    ]),
}


def make_net(arch, seed=0):
    shape, layers = ARCHS[arch]
    num_classes = layers[-1]["out"]
    net = Network.create(ModelSpec(tuple(layers), shape, num_classes), seed)
    rng = np.random.default_rng(seed + 1000)
    for blk in net.params.values():
        blk["b"][:] = rng.normal(0, 0.1, blk["b"].shape)
    return net


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
