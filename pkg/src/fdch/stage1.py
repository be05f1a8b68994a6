"""Unified hash code learning with a fusion network.

Image and text feature nets are summed and squashed by tanh, the fusion net
maps the result to continuous codes ``H`` (k x n), and the binary codes ``B``
are refreshed as ``sign(H)`` once per epoch.  Objective over training
columns::

    L = -sum_ij (s_ij Phi_ij - log(1 + exp(Phi_ij)))
        + lam ||B - H||_F^2 + eta ||H 1||^2,      Phi_ij = H_i . H_j / 2
"""

import logging
from dataclasses import dataclass

import numpy as np

from .data import similarity_block
from .errors import NumericalError, ShapeError
from .network import backward, forward, init_mlp, sgd_step
from .rng import SHUFFLE, make_rng

log = logging.getLogger(__name__)

# row block for full-objective evaluation; keeps memory at O(block * n)
_BLOCK = 512


@dataclass
class Stage1Hyper:
    lam: float = 1.0
    eta: float = 1.0
    lr: float = 0.01
    epochs: int = 30
    batch_size: int = 32
    k: int = 16
    seed: int = 0

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"lambda must be > 0, got {self.lam}")
        if not self.eta >= 0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")
        if self.k < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("k and batch_size must be >= 1, epochs >= 0")
        if not self.lr >= 0:
            raise ValueError(f"learning rate must be >= 0, got {self.lr}")


@dataclass
class Stage1Arch:
    """Hidden sizes.  Feature nets: d -> feature_hidden... -> common_dim;
    fusion net: common_dim -> fusion_hidden... -> k."""

    feature_hidden: tuple = (128,)
    common_dim: int = 64
    fusion_hidden: tuple = (64,)


@dataclass
class FusionModel:
    img_net: object
    txt_net: object
    fusion_net: object
    B: np.ndarray = None
    H_cache: np.ndarray = None

    def __post_init__(self):
        if self.img_net.out_dim != self.txt_net.out_dim:
            raise ShapeError(
                f"image and text feature nets must agree on output size: "
                f"{self.img_net.out_dim} != {self.txt_net.out_dim}"
            )
        if self.fusion_net.in_dim != self.img_net.out_dim:
            raise ShapeError("fusion net input must match feature net output")

    @property
    def k(self):
        return self.fusion_net.out_dim


def build_fusion_model(d_v, d_t, k, arch, seed):
    h = arch.common_dim
    feat_acts = ["relu"] * len(arch.feature_hidden) + ["identity"]
    fuse_acts = ["relu"] * len(arch.fusion_hidden) + ["identity"]
    # distinct init streams per net so they are not copies of each other
    return FusionModel(
        img_net=init_mlp([d_v, *arch.feature_hidden, h], feat_acts, seed, stream=101),
        txt_net=init_mlp([d_t, *arch.feature_hidden, h], feat_acts, seed, stream=102),
        fusion_net=init_mlp([h, *arch.fusion_hidden, k], fuse_acts, seed, stream=103),
    )


def fuse_forward(model, V_batch, T_batch):
    """Z = tanh(f(V) + g(T)), H = fusion(Z); returns (Z, H, tapes)."""
    if V_batch.shape[1] != T_batch.shape[1]:
        raise ShapeError("image and text batches must be paired")
    fv, tape_v = forward(model.img_net, V_batch)
    gt, tape_t = forward(model.txt_net, T_batch)
    if fv.shape != gt.shape:
        raise ShapeError(f"feature net outputs differ in shape: {fv.shape} vs {gt.shape}")
    Z = np.tanh(fv + gt)
    H, tape_z = forward(model.fusion_net, Z)
    return Z, H, (tape_v, tape_t, tape_z)


def softplus(x):
    """log(1 + e^x) without overflow."""
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _check_finite(M, rows, name):
    if not np.all(np.isfinite(M)):
        r, c = np.argwhere(~np.isfinite(M))[0]
        raise NumericalError(f"non-finite {name} for pair ({rows[r]}, {c})")


def _batch_index(n, batch):
    return np.arange(n) if batch is None else np.asarray(batch, dtype=np.int64)


def stage1_loss(H, B, Y, hyper, batch=None):
    """Objective value with the pairwise sum over ``batch`` rows x all columns.

    ``H`` is the k x n cache (batch columns already fresh), ``Y`` the
    training labels.  With ``batch=None`` this is the full objective.  The
    quantization term covers only batch columns; the balance term always
    uses every cached column.
    """
    n = H.shape[1]
    idx = _batch_index(n, batch)
    pair = 0.0
    for start in range(0, len(idx), _BLOCK):
        rows = idx[start:start + _BLOCK]
        Phi = 0.5 * H[:, rows].T @ H
        _check_finite(Phi, rows, "Phi")
        S = similarity_block(Y[:, rows], Y)
        pair -= float(np.sum(S * Phi - softplus(Phi)))
    quant = float(np.sum((B[:, idx] - H[:, idx]) ** 2))
    bal = float(np.sum(H.sum(axis=1) ** 2))
    return pair + hyper.lam * quant + hyper.eta * bal


def stage1_output_grad(H, B, Y, hyper, batch=None):
    """Gradient of the full objective with respect to the batch columns of H.

    Both pairwise sums in the derivative (over Phi_ij and Phi_ji) coincide
    because Phi and S are symmetric, so they are folded into one term.
    """
    n = H.shape[1]
    idx = _batch_index(n, batch)
    Phi = 0.5 * H[:, idx].T @ H
    _check_finite(Phi, idx, "Phi")
    S = similarity_block(Y[:, idx], Y)
    # m x n weights; H @ weights.T gives sum_j w_ij H_j for every batch column
    dH = H @ (sigmoid(Phi) - S).T
    dH += 2.0 * hyper.lam * (H[:, idx] - B[:, idx])
    dH += 2.0 * hyper.eta * H.sum(axis=1, keepdims=True)
    return dH


def update_codes(H):
    """B = sign(H) with sign(0) = +1; maximizes tr(B^T H) over sign matrices."""
    return np.where(H >= 0, 1, -1).astype(np.int8)


def full_forward(model, V, T):
    _, H, _ = fuse_forward(model, V, T)
    return H


def _train_step(model, V, T, Y, idx, hyper, step):
    Z, Hb, (tape_v, tape_t, tape_z) = fuse_forward(model, V[:, idx], T[:, idx])
    model.H_cache[:, idx] = Hb
    dH = stage1_output_grad(model.H_cache, model.B, Y, hyper, idx)
    grads_z, dZ = backward(model.fusion_net, tape_z, dH)
    dS = dZ * (1.0 - Z * Z)
    grads_v, _ = backward(model.img_net, tape_v, dS)
    grads_t, _ = backward(model.txt_net, tape_t, dS)
    sgd_step(model.fusion_net, grads_z, step)
    sgd_step(model.img_net, grads_v, step)
    sgd_step(model.txt_net, grads_t, step)


def train_stage1(ds, train_idx, hyper, arch=None):
    """Alternate SGD on the three nets with the discrete B update.

    The objective sums n^2 pair terms, so the SGD step is ``lr / n^2``:
    ``lr`` then means the same thing at any training set size.

    Returns ``(model, trace)``; ``model.B`` holds the unified codes (k x n,
    columns in ``train_idx`` order) and ``trace`` the full objective after
    each epoch's code update.
    """
    arch = arch or Stage1Arch()
    train_idx = np.asarray(train_idx, dtype=np.int64)
    V, T, Y = ds.V[:, train_idx], ds.T[:, train_idx], ds.Y[:, train_idx]
    n = len(train_idx)
    model = build_fusion_model(ds.d_v, ds.d_t, hyper.k, arch, hyper.seed)
    model.H_cache = full_forward(model, V, T)
    model.B = update_codes(model.H_cache)
    rng = make_rng(hyper.seed, SHUFFLE)
    step = hyper.lr / float(n * n)
    trace = []
    for epoch in range(hyper.epochs):
        order = rng.permutation(n)
        for start in range(0, n, hyper.batch_size):
            _train_step(model, V, T, Y, order[start:start + hyper.batch_size], hyper, step)
        model.H_cache = full_forward(model, V, T)
        model.B = update_codes(model.H_cache)
        loss = stage1_loss(model.H_cache, model.B, Y, hyper)
        if not np.isfinite(loss):
            raise NumericalError(f"stage-1 objective is not finite at epoch {epoch + 1}")
        trace.append(loss)
        log.debug("stage1 epoch %d objective %.6g", epoch + 1, loss)
    return model, trace
