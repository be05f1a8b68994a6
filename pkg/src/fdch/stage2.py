"""Modality-specific hash networks supervised by the unified codes.

Objective over training columns, with ``F`` / ``G`` the image / text net
outputs (k x n)::

    J  = J1 + gamma J2 + beta J3 + alpha J4
    J1 = -sum_ij (s_ij Theta_ij - log(1 + exp(Theta_ij))),  Theta_ij = F_i . G_j
    J2 = ||B - F||^2 + ||B - G||^2
    J3 = ||F - W1^T Y||^2 + ||G - W2^T Y||^2 + ||W1||^2 + ||W2||^2
    J4 = ||F 1||^2 + ||G 1||^2

The nets are updated by SGD, W1 and W2 by their ridge closed form.  The
``fdch_i`` ablation drops J3 (beta = 0), ``fdch_ii`` drops J1.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .data import similarity_block
from .errors import NumericalError, ShapeError
from .network import Layer, Mlp, backward, forward, init_layer, init_mlp, sgd_step
from .rng import SHUFFLE, make_rng
from .stage1 import sigmoid, softplus

log = logging.getLogger(__name__)

ABLATIONS = ("none", "fdch_i", "fdch_ii")
_BLOCK = 512


@dataclass
class Stage2Hyper:
    gamma: float = 1.0
    beta: float = 1.0
    alpha: float = 1.0
    lr: float = 0.01
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    ablation: str = "none"

    def __post_init__(self):
        self.ablation = self.ablation.replace("-", "_").lower()
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        for name in ("gamma", "beta", "alpha", "lr"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1, epochs >= 0")

    @property
    def beta_eff(self):
        return 0.0 if self.ablation == "fdch_i" else self.beta

    @property
    def use_pairs(self):
        return self.ablation != "fdch_ii"


@dataclass
class HashNets:
    img_net: Mlp
    txt_net: Mlp
    W1: np.ndarray = None
    W2: np.ndarray = None
    F_cache: np.ndarray = None
    G_cache: np.ndarray = None

    def __post_init__(self):
        if self.img_net.out_dim != self.txt_net.out_dim:
            raise ShapeError("image and text hash nets must emit the same code length")
        for net in (self.img_net, self.txt_net):
            if net.layers[-1].activation != "identity":
                raise ShapeError("hash nets must end in an identity layer")

    @property
    def k(self):
        return self.img_net.out_dim


def _pair_sum(P, Q, S_of, transpose=False):
    """sum over blocks of s * Theta - softplus(Theta), Theta = P^T Q."""
    total = 0.0
    n = P.shape[1]
    for start in range(0, n, _BLOCK):
        rows = np.arange(start, min(n, start + _BLOCK))
        Theta = P[:, rows].T @ Q
        if not np.all(np.isfinite(Theta)):
            r, c = np.argwhere(~np.isfinite(Theta))[0]
            raise NumericalError(f"non-finite Theta for pair ({rows[r]}, {c})")
        total += float(np.sum(S_of(rows) * Theta - softplus(Theta)))
    return total


def stage2_loss(F, G, B, Y, W1, W2, hyper):
    """Return ``(J, J1, J2, J3, J4)``; ablated components are reported as 0."""
    if not (F.shape == G.shape == B.shape) or Y.shape[1] != F.shape[1]:
        raise ShapeError("F, G, B must be k x n and Y c x n")
    J1 = 0.0
    if hyper.use_pairs:
        J1 = -_pair_sum(F, G, lambda rows: similarity_block(Y[:, rows], Y))
    J2 = float(np.sum((B - F) ** 2) + np.sum((B - G) ** 2))
    J3 = 0.0
    if hyper.beta_eff:
        J3 = float(
            np.sum((F - W1.T @ Y) ** 2)
            + np.sum((G - W2.T @ Y) ** 2)
            + np.sum(W1**2)
            + np.sum(W2**2)
        )
    J4 = float(np.sum(F.sum(axis=1) ** 2) + np.sum(G.sum(axis=1) ** 2))
    J = J1 + hyper.gamma * J2 + hyper.beta_eff * J3 + hyper.alpha * J4
    return J, J1, J2, J3, J4


def _grad(P, Q, B, Y, W, hyper, batch):
    """Shared body of grad_F / grad_G: gradient w.r.t. the batch columns of P,
    with Q the other modality's outputs."""
    n = P.shape[1]
    idx = np.arange(n) if batch is None else np.asarray(batch, dtype=np.int64)
    Pb = P[:, idx]
    d = 2.0 * hyper.gamma * (Pb - B[:, idx])
    if hyper.beta_eff:
        d += 2.0 * hyper.beta_eff * (Pb - W.T @ Y[:, idx])
    d += 2.0 * hyper.alpha * P.sum(axis=1, keepdims=True)
    if hyper.use_pairs:
        Theta = Pb.T @ Q
        if not np.all(np.isfinite(Theta)):
            r, c = np.argwhere(~np.isfinite(Theta))[0]
            raise NumericalError(f"non-finite Theta for pair ({idx[r]}, {c})")
        S = similarity_block(Y[:, idx], Y)
        d += Q @ (sigmoid(Theta) - S).T
    return d


def grad_F(F, G, B, Y, W1, hyper, batch=None):
    """dJ/dF for the batch columns (all columns by default).

    Pair term sum_j (sigma(Theta_ij) - s_ij) G_j, code term 2 gamma (F - B),
    label term 2 beta (F - W1^T Y), balance term 2 alpha F 1.
    """
    return _grad(F, G, B, Y, W1, hyper, batch)


def grad_G(F, G, B, Y, W2, hyper, batch=None):
    # Theta_ij = F_i . G_j, so for column j of G the pair term is
    # sum_i (sigma(Theta_ij) - s_ij) F_i; S is symmetric.
    return _grad(G, F, B, Y, W2, hyper, batch)


def solve_W(Y, X):
    """argmin_W ||X - W^T Y||^2 + ||W||^2, i.e. (Y Y^T + I)^-1 Y X^T (c x k)."""
    Y = np.asarray(Y, dtype=np.float64)
    A = Y @ Y.T + np.eye(Y.shape[0])
    return cho_solve(cho_factor(A), Y @ np.asarray(X, dtype=np.float64).T)


def solve_W1(Y, F):
    return solve_W(Y, F)


def solve_W2(Y, G):
    return solve_W(Y, G)


def build_hash_net(d, k, feature_hidden, seed, stream, warm=None):
    """``d -> feature_hidden... -> k`` with a fresh identity hash layer.

    With ``warm`` (a trained stage-1 feature net of matching layout) every
    layer but the last is copied from it.
    """
    rng = make_rng(seed, stream)
    if warm is None:
        acts = ["relu"] * len(feature_hidden) + ["identity"]
        return init_mlp([d, *feature_hidden, k], acts, seed, stream=stream)
    body = [Layer(l.W.copy(), l.b.copy(), l.activation) for l in warm.layers[:-1]]
    last_in = body[-1].out_dim if body else warm.in_dim
    return Mlp(body + [init_layer(last_in, k, "identity", rng)])


def _phase(net, X, P, Q, B, Y, W, hyper, step, rng):
    n = X.shape[1]
    order = rng.permutation(n)
    for start in range(0, n, hyper.batch_size):
        idx = order[start:start + hyper.batch_size]
        Pb, tape = forward(net, X[:, idx])
        P[:, idx] = Pb
        dP = _grad(P, Q, B, Y, W, hyper, idx)
        grads, _ = backward(net, tape, dP)
        sgd_step(net, grads, step)
    P[:] = forward(net, X)[0]


def train_stage2(ds, train_idx, B, hyper, feature_hidden=(128,), warm_start=None):
    """Alternate image-net SGD, text-net SGD, W1 and W2 closed forms.

    ``warm_start`` is an optional ``(img_feature_net, txt_feature_net)`` pair
    from stage 1.  As in stage 1 the SGD step is ``lr / n^2``.  Returns
    ``(nets, trace)`` with one ``(J, J1, J2, J3, J4)`` row per epoch.
    """
    train_idx = np.asarray(train_idx, dtype=np.int64)
    V, T, Y = ds.V[:, train_idx], ds.T[:, train_idx], ds.Y[:, train_idx]
    n = len(train_idx)
    k = B.shape[0]
    if B.shape[1] != n:
        raise ShapeError(f"B has {B.shape[1]} columns, training set has {n}")
    B = B.astype(np.float64)
    warm_v, warm_t = warm_start if warm_start is not None else (None, None)
    nets = HashNets(
        img_net=build_hash_net(ds.d_v, k, feature_hidden, hyper.seed, 201, warm_v),
        txt_net=build_hash_net(ds.d_t, k, feature_hidden, hyper.seed, 202, warm_t),
    )
    nets.F_cache = forward(nets.img_net, V)[0]
    nets.G_cache = forward(nets.txt_net, T)[0]
    nets.W1 = solve_W1(Y, nets.F_cache)
    nets.W2 = solve_W2(Y, nets.G_cache)
    rng = make_rng(hyper.seed, SHUFFLE)
    step = hyper.lr / float(n * n)
    trace = []
    for epoch in range(hyper.epochs):
        _phase(nets.img_net, V, nets.F_cache, nets.G_cache, B, Y, nets.W1, hyper, step, rng)
        _phase(nets.txt_net, T, nets.G_cache, nets.F_cache, B, Y, nets.W2, hyper, step, rng)
        nets.W1 = solve_W1(Y, nets.F_cache)
        nets.W2 = solve_W2(Y, nets.G_cache)
        row = stage2_loss(nets.F_cache, nets.G_cache, B, Y, nets.W1, nets.W2, hyper)
        if not np.isfinite(row[0]):
            raise NumericalError(f"stage-2 objective is not finite at epoch {epoch + 1}")
        trace.append(row)
        log.debug("stage2 epoch %d J=%.6g", epoch + 1, row[0])
    return nets, trace
