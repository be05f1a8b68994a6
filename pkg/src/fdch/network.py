"""Small fully-connected networks with hand-written backprop.

Inputs are column batches: ``X`` has shape (in_dim, m).  The training code
computes the gradient of its objective with respect to the network output
analytically and hands it to :func:`backward`, so no autodiff is needed.
"""

import copy
import struct
from dataclasses import dataclass

import numpy as np

from . import container
from .container import Reader
from .errors import FormatError, ShapeError
from .rng import INIT, make_rng

ACTIVATIONS = ("identity", "relu", "tanh")


@dataclass
class Layer:
    W: np.ndarray
    b: np.ndarray
    activation: str

    @property
    def in_dim(self):
        return self.W.shape[1]

    @property
    def out_dim(self):
        return self.W.shape[0]


class Mlp:
    def __init__(self, layers):
        if not layers:
            raise ShapeError("an Mlp needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError(
                    f"layer dims do not chain: {prev.out_dim} outputs into {nxt.in_dim} inputs"
                )
        for layer in layers:
            if layer.activation not in ACTIVATIONS:
                raise ShapeError(f"unknown activation {layer.activation!r}")
            if layer.b.shape != (layer.out_dim,):
                raise ShapeError("bias length must equal layer output dim")
            if not (np.all(np.isfinite(layer.W)) and np.all(np.isfinite(layer.b))):
                raise ShapeError("non-finite parameter")
        self.layers = list(layers)

    @property
    def dims(self):
        return [self.layers[0].in_dim] + [layer.out_dim for layer in self.layers]

    @property
    def activations(self):
        return [layer.activation for layer in self.layers]

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    def copy(self):
        return copy.deepcopy(self)

    def __eq__(self, other):
        if not isinstance(other, Mlp) or len(self.layers) != len(other.layers):
            return False
        return all(
            a.activation == b.activation
            and np.array_equal(a.W, b.W)
            and np.array_equal(a.b, b.b)
            for a, b in zip(self.layers, other.layers)
        )

    def __repr__(self):
        arch = " -> ".join(map(str, self.dims))
        return f"Mlp({arch}; {', '.join(self.activations)})"


@dataclass
class ForwardTape:
    """Per-layer inputs and pre-activations from one forward pass."""

    inputs: list
    pre: list
    outputs: list

    @property
    def batch(self):
        return self.inputs[0].shape[1]


def init_layer(in_dim, out_dim, activation, rng):
    # He-style scale: N(0, 2 / in_dim)
    W = rng.standard_normal((out_dim, in_dim)) * np.sqrt(2.0 / in_dim)
    return Layer(W, np.zeros(out_dim), activation)


def init_mlp(dims, activations, seed, stream=INIT):
    """Random network; weights ~ N(0, 2/in_dim), zero biases."""
    dims = list(dims)
    if len(dims) < 2:
        raise ShapeError("need >=2 layer sizes")
    if any(d < 1 for d in dims):
        raise ShapeError(f"layer sizes must be positive, got {dims}")
    if len(activations) != len(dims) - 1:
        raise ShapeError(
            f"{len(dims) - 1} layers need {len(dims) - 1} activations, got {len(activations)}"
        )
    rng = make_rng(seed, stream)
    return Mlp([init_layer(i, o, a, rng) for i, o, a in zip(dims, dims[1:], activations)])


def _activate(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(z, a, kind, da):
    if kind == "relu":
        return da * (z > 0)
    if kind == "tanh":
        return da * (1.0 - a * a)
    return da


def forward(net, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != net.in_dim:
        raise ShapeError(f"input must be ({net.in_dim}, m), got {X.shape}")
    inputs, pre, outputs = [], [], []
    a = X
    for layer in net.layers:
        inputs.append(a)
        z = layer.W @ a + layer.b[:, None]
        a = _activate(z, layer.activation)
        pre.append(z)
        outputs.append(a)
    return a, ForwardTape(inputs, pre, outputs)


def backward(net, tape, dY):
    """Chain rule from an output gradient.

    Returns ``(grads, dX)`` where ``grads`` is a list of ``(dW, db)`` per
    layer and ``dX`` is the gradient with respect to the network input, so a
    caller can keep propagating into an upstream network.
    """
    if len(tape.inputs) != len(net.layers):
        raise ShapeError("tape depth does not match network")
    dY = np.asarray(dY, dtype=np.float64)
    if dY.shape != tape.outputs[-1].shape:
        raise ShapeError(f"dY shape {dY.shape} != output shape {tape.outputs[-1].shape}")
    grads = [None] * len(net.layers)
    da = dY
    for ell in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[ell]
        dz = _activation_grad(tape.pre[ell], tape.outputs[ell], layer.activation, da)
        grads[ell] = (dz @ tape.inputs[ell].T, dz.sum(axis=1))
        da = layer.W.T @ dz
    return grads, da


def sgd_step(net, grads, lr):
    if len(grads) != len(net.layers):
        raise ShapeError("gradient list does not match layer count")
    for layer, (dW, db) in zip(net.layers, grads):
        if dW.shape != layer.W.shape or db.shape != layer.b.shape:
            raise ShapeError("gradient shape does not match parameters")
        layer.W -= lr * dW
        layer.b -= lr * db
    return net


# --- checkpoint container ---------------------------------------------------
#
# after the common header:
#   u32 net_count
#   per net: u32 layer_count, u32 dims[layer_count + 1], u8 activation[layer_count],
#            f64 weights (row-major, layer by layer), then f64 biases
#   u32 matrix_count
#   per matrix: u32 rows, u32 cols, f64 data (row-major)

_ACT_TAGS = {name: i for i, name in enumerate(ACTIVATIONS)}


def dump_checkpoint(nets, matrices=()):
    out = [container.header(container.KIND_MODEL), struct.pack("<I", len(nets))]
    for net in nets:
        L = len(net.layers)
        out.append(struct.pack(f"<I{L + 1}I", L, *net.dims))
        out.append(bytes(_ACT_TAGS[a] for a in net.activations))
        out.extend(container.le_bytes(layer.W, "f8") for layer in net.layers)
        out.extend(container.le_bytes(layer.b, "f8") for layer in net.layers)
    out.append(struct.pack("<I", len(matrices)))
    for M in matrices:
        M = np.atleast_2d(M)
        out.append(struct.pack("<II", *M.shape))
        out.append(container.le_bytes(M, "f8"))
    return b"".join(out)


def parse_checkpoint(buf):
    r = Reader(buf)
    container.read_header(r, container.KIND_MODEL)
    nets = []
    for _ in range(r.u32()):
        L = r.u32()
        if L == 0:
            raise FormatError("network with zero layers")
        dims = r.unpack(f"{L + 1}I")
        tags = bytes(r.take(L))
        try:
            acts = [ACTIVATIONS[t] for t in tags]
        except IndexError:
            raise FormatError(f"unknown activation tag in {list(tags)}") from None
        Ws = [r.array("f8", o * i).reshape(o, i) for i, o in zip(dims, dims[1:])]
        bs = [r.array("f8", o) for o in dims[1:]]
        nets.append(Mlp([Layer(W, b, a) for W, b, a in zip(Ws, bs, acts)]))
    matrices = []
    for _ in range(r.u32()):
        rows, cols = r.unpack("II")
        matrices.append(r.array("f8", rows * cols).reshape(rows, cols))
    r.finish()
    return nets, matrices


def save_checkpoint(path, nets, matrices=()):
    with open(path, "wb") as fh:
        fh.write(dump_checkpoint(nets, matrices))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
