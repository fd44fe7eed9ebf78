"""Projected belief network: a MaxEnt analysis network and its reconstruction path.

Layers are indexed from 0.  Layer k has weights ``W_k`` (N_k x M_k), a prior
kind and a bias of length M_k.  The forward path computes

    z_k = W_k' a_k,    a_{k+1} = lambda_{k+1}(z_k + bias_k)

where ``lambda_{k+1}`` is the activation of the next layer's kind.  The last
layer's bias is not used.

The backward path reuses the same weights.  Starting from the top feature it
solves ``h_k = gamma_k^{-1}(zhat_k)`` and forms ``theta_k = theta0_k + W_k h_k``.
The reconstructed input of layer k is ``lambda_k(theta_k)``; since the forward
path would apply ``lambda_k`` to ``z_{k-1} + bias_{k-1}``, the two cancel and
the next feature down is simply ``theta_k - bias_{k-1}``.  In stochastic mode
the input is instead drawn from the per-coordinate laws and the activation is
inverted explicitly.
"""
from dataclasses import dataclass

import numpy as np

from .errors import (
    DomainViolation,
    InvalidInput,
    MaxEntError,
    ReconstructionInfeasible,
    SupportViolation,
    TrainingDiverged,
)
from .expfamily import ActivationKind, inverse_lambda, lambda_prime, mean_lambda, sample
from .numerics import RngStream
from .saddle import LayerMap, SaddleSolution, SolverConfig, gamma_inverse, inverse_vjp

__all__ = [
    "PbnLayer",
    "PbnNetwork",
    "SamplingEfficiencyReport",
    "init_network",
    "forward",
    "backward_reconstruct",
    "reconstruct",
    "reconstruct_batch",
    "prior_features",
    "layerwise_efficiency",
    "sampling_efficiency",
    "reconstruction_loss",
    "loss_and_grad",
    "train_autoencoder",
]

MODES = ("deterministic", "stochastic")


@dataclass
class PbnLayer:
    map: LayerMap
    bias: np.ndarray = None

    def __post_init__(self):
        M = self.map.shape[1]
        if self.bias is None:
            self.bias = np.zeros(M)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(M).copy()

    @property
    def W(self):
        return self.map.W

    @property
    def kind(self):
        return self.map.kind

    def with_weights(self, W, bias):
        return PbnLayer(LayerMap(W, self.kind, self.map.theta0), bias)


class PbnNetwork:
    """Ordered layers with strictly decreasing widths N_0 > M_0 = N_1 > M_1 ..."""

    def __init__(self, layers):
        layers = list(layers)
        if not layers:
            raise InvalidInput("a network needs at least one layer")
        for k, layer in enumerate(layers):
            N, M = layer.map.shape
            if not M < N:
                raise InvalidInput(f"layer {k}: width must decrease, got {N} -> {M}")
            if k + 1 < len(layers) and layers[k + 1].map.shape[0] != M:
                raise InvalidInput(
                    f"layer {k} outputs {M} features but layer {k + 1} expects "
                    f"{layers[k + 1].map.shape[0]}"
                )
        self.layers = layers

    @property
    def widths(self):
        return [self.layers[0].map.shape[0]] + [l.map.shape[1] for l in self.layers]

    @property
    def kinds(self):
        return [l.kind for l in self.layers]

    def __len__(self):
        return len(self.layers)

    def n_parameters(self):
        return sum(l.W.size + l.bias.size for l in self.layers)

    def copy(self):
        return PbnNetwork([l.with_weights(l.W.copy(), l.bias.copy()) for l in self.layers])

    def __repr__(self):
        arch = " -> ".join(str(w) for w in self.widths)
        kinds = ",".join(k.value for k in self.kinds)
        return f"PbnNetwork({arch}; {kinds})"


@dataclass
class SamplingEfficiencyReport:
    attempts: int
    successes: int

    @property
    def efficiency(self):
        return self.successes / self.attempts if self.attempts else 0.0

    def __str__(self):
        return f"sampling efficiency {self.efficiency:.6f} ({self.successes}/{self.attempts})"


def init_network(widths, kinds, rng, scale=1.0, data=None):
    """Random network with Gaussian weights of variance ``scale**2 / N_k``.

    Weights of layers with a bounded-below support are centered column by
    column.  For TG and EXP this makes the image of every gamma the whole
    feature space, so the untrained network reconstructs any feature; for
    TED it puts the zero feature inside the image.

    Biases start at zero, except in front of an EXP layer, whose activation
    needs a negative argument: there the bias is set from `data` (or from a
    unit bound when no data is given) so every pre-activation starts below -1.
    """
    widths = [int(w) for w in widths]
    if isinstance(kinds, (str, ActivationKind)):
        kinds = [kinds] * (len(widths) - 1)
    kinds = [ActivationKind.parse(k) for k in kinds]
    if len(kinds) != len(widths) - 1:
        raise InvalidInput("need one kind per layer")
    layers = []
    a = None if data is None else np.atleast_2d(np.asarray(data, dtype=np.float64))
    for k, kind in enumerate(kinds):
        N, M = widths[k], widths[k + 1]
        W = rng.normal((N, M))
        if kind is not ActivationKind.LINEAR:
            # zero column sums make the rows positively span the feature
            # space, so every feature has a preimage under a cone support
            W = (W - W.mean(axis=0)) * np.sqrt(N / (N - 1))
        W *= scale / np.sqrt(N)
        bias = np.zeros(M)
        if k + 1 < len(kinds):
            nxt = kinds[k + 1]
            if nxt is ActivationKind.EXP:
                bound = np.abs(W).sum(axis=0) if a is None else (a @ W).max(axis=0)
                bias = -bound - 1.0
            if a is not None:
                a = np.asarray(mean_lambda(nxt, a @ W + bias))
        layers.append(PbnLayer(LayerMap(W, kind), bias))
    return PbnNetwork(layers)


def _forward_cache(net, X):
    """Activations a_k (inputs of each layer), features z_k and pre-activations."""
    acts, feats, pre = [X], [], []
    for k, layer in enumerate(net.layers):
        z = acts[-1] @ layer.W
        feats.append(z)
        if k + 1 < len(net.layers):
            u = z + layer.bias
            nxt = net.layers[k + 1]
            try:
                a = np.asarray(mean_lambda(nxt.kind, u))
            except DomainViolation as exc:
                raise SupportViolation(f"layer {k + 1}: {exc}", layer=k + 1) from None
            pre.append(u)
            acts.append(a)
    return acts, feats, pre


def forward(net, x):
    """Features of every layer for input `x` (shape (N_0,) or (S, N_0)).

    Returns ``(features, z_final)`` where ``features[k]`` is z_k.
    """
    X = np.asarray(x, dtype=np.float64)
    if X.shape[-1] != net.widths[0]:
        raise InvalidInput(f"input has length {X.shape[-1]}, network expects {net.widths[0]}")
    if not np.all(np.isfinite(X)):
        raise InvalidInput("input contains non-finite entries")
    lo, hi = net.layers[0].kind.support
    if not np.all((X >= lo) & (X <= hi)):
        raise SupportViolation(f"layer 0: input outside the support [{lo:g}, {hi:g}]", layer=0)
    _, feats, _ = _forward_cache(net, X)
    return feats, feats[-1]


@dataclass
class _BackwardPass:
    x: np.ndarray           # reconstruction for surviving samples
    ok: np.ndarray          # per-sample success mask
    failed_layer: np.ndarray  # -1 where ok
    sols: list              # per layer solution, indexed like layers
    features: list          # zhat_k fed to each layer's gamma inverse


def _backward(net, Z, mode, rng, cfg):
    if mode not in MODES:
        raise InvalidInput(f"mode must be one of {MODES}")
    if mode == "stochastic" and rng is None:
        raise InvalidInput("stochastic reconstruction needs an RngStream")
    S = Z.shape[0]
    alive = np.arange(S)
    failed_layer = np.full(S, -1)
    sols = [None] * len(net.layers)
    features = [None] * len(net.layers)
    zhat = Z
    x = None
    for k in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[k]
        features[k] = zhat
        sol = gamma_inverse(layer.map, zhat, cfg)
        conv = np.asarray(sol.converged)
        failed_layer[alive[~conv]] = k
        keep = np.flatnonzero(conv)
        alive = alive[keep]
        theta = sol.theta[keep]
        sols[k] = _subset(sol, keep)
        if mode == "deterministic":
            a = np.asarray(mean_lambda(layer.kind, theta))
        else:
            a = np.asarray(sample(layer.kind, theta, rng))
        if k == 0:
            x = a
            break
        below = net.layers[k - 1]
        if mode == "deterministic":
            zhat = theta - below.bias
        else:
            lo, hi = layer.kind.support
            inside = np.all((a > lo) & (a < hi), axis=1)
            failed_layer[alive[~inside]] = k - 1
            alive, a = alive[inside], a[inside]
            zhat = np.asarray(inverse_lambda(layer.kind, a)).reshape(a.shape) - below.bias
        if alive.size == 0:
            x = np.empty((0, net.widths[0]))
            break
    ok = failed_layer < 0
    return _BackwardPass(x, ok, failed_layer, sols, features)


def _subset(sol, idx):
    return SaddleSolution(
        h=sol.h[idx], x_hat=sol.x_hat[idx], residual_inf=sol.residual_inf[idx],
        iterations=sol.iterations[idx], converged=sol.converged[idx], theta=sol.theta[idx],
    )


def backward_reconstruct(net, z_final, mode="deterministic", rng=None, cfg=None):
    """Reconstruct the input from the top feature through the shared weights.

    Raises ReconstructionInfeasible (carrying the 0-based layer index) when
    any layer's gamma inverse fails; for a batch, the first failing sample
    decides.
    """
    Z = np.asarray(z_final, dtype=np.float64)
    single = Z.ndim == 1
    Z = np.atleast_2d(Z)
    if Z.shape[1] != net.widths[-1]:
        raise InvalidInput(f"top feature has length {Z.shape[1]}, network outputs {net.widths[-1]}")
    bp = _backward(net, Z, mode, rng, cfg or SolverConfig())
    if not bp.ok.all():
        raise ReconstructionInfeasible(int(bp.failed_layer[~bp.ok][0]))
    return bp.x[0] if single else bp.x


def reconstruct_batch(net, z_final, mode="deterministic", rng=None, cfg=None):
    """Batch reconstruction that reports failures instead of raising.

    Returns ``(x, failed_layer)``: rows of `x` are NaN where reconstruction
    failed, and ``failed_layer`` holds the 0-based failing layer or -1.
    """
    Z = np.atleast_2d(np.asarray(z_final, dtype=np.float64))
    if Z.shape[1] != net.widths[-1]:
        raise InvalidInput(f"top feature has length {Z.shape[1]}, network outputs {net.widths[-1]}")
    bp = _backward(net, Z, mode, rng, cfg or SolverConfig())
    x = np.full((Z.shape[0], net.widths[0]), np.nan)
    x[bp.ok] = bp.x
    return x, bp.failed_layer


def reconstruct(net, x, mode="deterministic", rng=None, cfg=None):
    """``backward_reconstruct(forward(x))``."""
    _, z = forward(net, x)
    return backward_reconstruct(net, z, mode, rng, cfg)


def prior_features(net, n, rng):
    """Top features ``W_L' a`` with a drawn from the top layer's own prior.

    Such features need not come from any input through the lower layers, so
    they probe the sampling efficiency of the reconstruction path.
    """
    top = net.layers[-1]
    a = sample(top.kind, np.broadcast_to(top.map.theta0, (n, top.map.shape[0])), rng)
    return np.asarray(a) @ top.W


def sampling_efficiency(net, z_samples, rng=None, mode="deterministic", cfg=None):
    """Fraction of top features whose reconstruction succeeds at every layer."""
    Z = np.atleast_2d(np.asarray(z_samples, dtype=np.float64))
    bp = _backward(net, Z, mode, rng, cfg or SolverConfig())
    return SamplingEfficiencyReport(attempts=Z.shape[0], successes=int(bp.ok.sum()))


def layerwise_efficiency(net, X, cfg=None):
    """Fraction of inputs whose forward-path feature z_k is inverted at every layer.

    Each layer is solved on its own forward feature, so success depends only
    on that layer's input lying in the interior of its support.
    """
    cfg = cfg or SolverConfig()
    feats, _ = forward(net, np.atleast_2d(np.asarray(X, dtype=np.float64)))
    ok = np.ones(feats[0].shape[0], dtype=bool)
    for layer, z in zip(net.layers, feats):
        ok &= np.asarray(gamma_inverse(layer.map, z, cfg).converged)
    return SamplingEfficiencyReport(attempts=ok.size, successes=int(ok.sum()))


def reconstruction_loss(net, X, cfg=None):
    """Mean over rows of ``|x - reconstruct(x)|^2``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    xr = reconstruct(net, X, cfg=cfg)
    return float(np.mean(np.sum((X - xr) ** 2, axis=1)))


def loss_and_grad(net, X, cfg=None):
    """Reconstruction loss and its gradient for every weight and bias.

    Returns ``(loss, grads)`` with ``grads[k] = (dW_k, dbias_k)``.  The
    gradient runs back through the reconstruction path (implicit derivatives
    of every gamma inverse, with respect to both its feature and its weights)
    and then through the forward path.
    """
    cfg = cfg or SolverConfig()
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    S = X.shape[0]
    L = len(net.layers)
    acts, feats, pre = _forward_cache(net, X)
    bp = _backward(net, feats[-1], "deterministic", None, cfg)
    if not bp.ok.all():
        raise ReconstructionInfeasible(int(bp.failed_layer[~bp.ok][0]))
    diff = bp.x - X
    loss = float(np.mean(np.sum(diff**2, axis=1)))

    dW = [np.zeros_like(l.W) for l in net.layers]
    db = [np.zeros_like(l.bias) for l in net.layers]
    # reconstruction path, bottom to top
    sol0 = bp.sols[0]
    v = np.asarray(lambda_prime(net.layers[0].kind, sol0.theta)) * (2.0 / S) * diff
    for k in range(L):
        q, gW = inverse_vjp(net.layers[k].map, bp.sols[k], v)
        dW[k] += gW
        if k + 1 < L:
            db[k] -= q.sum(axis=0)
        v = q
    # v is now the cotangent on the forward top feature
    adj_z = v
    for k in range(L - 1, -1, -1):
        dW[k] += acts[k].T @ adj_z
        if k == 0:
            break
        adj_a = adj_z @ net.layers[k].W.T
        adj_u = np.asarray(lambda_prime(net.layers[k].kind, pre[k - 1])) * adj_a
        db[k - 1] += adj_u.sum(axis=0)
        adj_z = adj_u
    return loss, list(zip(dW, db))


def _updated(net, grads, step):
    return PbnNetwork([
        layer.with_weights(layer.W - step * gW, layer.bias - step * gb)
        for layer, (gW, gb) in zip(net.layers, grads)
    ])


def train_autoencoder(net, data, epochs, step_size, rng=None, cfg=None, batch_size=None,
                      max_step_halvings=30):
    """Plain gradient descent on the reconstruction loss; updates `net` in place.

    With ``batch_size=None`` every epoch is one full-batch step and `rng` is
    unused; otherwise rows are shuffled with `rng` and visited in mini-batches.
    Returns the per-epoch loss trace (mean of the batch losses seen during
    the epoch, each evaluated before its update).

    An update after which some row of the batch can no longer be
    reconstructed, or its gradient no longer exists numerically, is retried
    with half the step, up to `max_step_halvings` times; feasible updates always use the
    full `step_size`.  Raises TrainingDiverged on a non-finite loss or when
    no feasible step is found.
    """
    cfg = cfg or SolverConfig()
    X = np.atleast_2d(np.asarray(data, dtype=np.float64))
    forward(net, X[:1])  # validates width and support
    lo, hi = net.layers[0].kind.support
    if not np.all((X >= lo) & (X <= hi)):
        raise SupportViolation("training data outside the first layer's support", layer=0)
    if batch_size is not None and rng is None:
        rng = RngStream(0)
    S = X.shape[0]

    def evaluate(model, idx, epoch):
        loss, grads = loss_and_grad(model, X[idx], cfg)
        finite = np.isfinite(loss) and all(np.all(np.isfinite(g)) for pair in grads for g in pair)
        if not finite:
            raise TrainingDiverged(epoch)
        return loss, grads

    trace = []
    pending = None  # (rows, loss, grads) already evaluated at the current weights
    for epoch in range(epochs):
        if batch_size is None:
            batches = [np.arange(S)]
        else:
            order = rng.permutation(S)
            batches = [order[i:i + batch_size] for i in range(0, S, batch_size)]
        losses = []
        for idx in batches:
            if pending is not None and np.array_equal(pending[0], idx):
                _, loss, grads = pending
            else:
                try:
                    loss, grads = evaluate(net, idx, epoch)
                except MaxEntError as exc:
                    raise TrainingDiverged(epoch, str(exc)) from exc
            losses.append(loss * idx.size)
            step = step_size
            for _ in range(max_step_halvings + 1):
                try:
                    trial = _updated(net, grads, step)
                    pending = (idx, *evaluate(trial, idx, epoch))
                    break
                except TrainingDiverged:
                    raise
                except MaxEntError:
                    step *= 0.5
            else:
                raise TrainingDiverged(epoch, "no step keeps the batch reconstructable")
            net.layers = trial.layers
        trace.append(sum(losses) / S)
    return trace
