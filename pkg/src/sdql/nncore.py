"""Dependency-free neural network core.

Multilayer perceptrons with hand-derived reverse-mode gradients, an Adam
optimizer, global-norm gradient clipping, and soft target-network updates.
Everything is double precision and purely functional: operations take
parameter containers and return new ones, so the same (params, state) pair
is never mutated by two callers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfigError, NumericError, ShapeError

HIDDEN_ACTIVATIONS = ("relu", "tanh")
OUTPUT_ACTIVATIONS = ("linear", "tanh")


@dataclass
class MlpParams:
    """Weights and biases of a fully connected network.

    weights[l] has shape (layer_sizes[l+1], layer_sizes[l]); biases[l] has
    length layer_sizes[l+1]. The hidden activation is applied after every
    layer except the last, which uses output_activation.
    """

    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    hidden_activation: str = "relu"
    output_activation: str = "linear"

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def copy(self) -> "MlpParams":
        return MlpParams(
            layer_sizes=list(self.layer_sizes),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            hidden_activation=self.hidden_activation,
            output_activation=self.output_activation,
        )


@dataclass
class ParamGrads:
    """Gradients shaped like the MlpParams they differentiate."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def arrays(self) -> list[np.ndarray]:
        return list(self.weights) + list(self.biases)


@dataclass
class AdamState:
    """Adam first/second moments, congruent with one MlpParams."""

    m_weights: list[np.ndarray]
    m_biases: list[np.ndarray]
    v_weights: list[np.ndarray]
    v_biases: list[np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def mlp_init(
    layer_sizes: list[int],
    hidden_activation: str = "relu",
    output_activation: str = "linear",
    seed: int = 0,
) -> MlpParams:
    """Create a network with uniform +-1/sqrt(fan_in) weights and zero biases.

    Deterministic for a given seed: layers are drawn in order from a single
    np.random.default_rng(seed) stream.
    """
    if len(layer_sizes) < 2:
        raise InvalidConfigError(f"need input and output layer, got sizes {layer_sizes}")
    if any(n <= 0 for n in layer_sizes):
        raise InvalidConfigError(f"layer sizes must be positive, got {layer_sizes}")
    if hidden_activation not in HIDDEN_ACTIVATIONS:
        raise InvalidConfigError(f"unknown hidden activation {hidden_activation!r}")
    if output_activation not in OUTPUT_ACTIVATIONS:
        raise InvalidConfigError(f"unknown output activation {output_activation!r}")

    rng = np.random.default_rng(seed)
    weights = []
    biases = []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(list(layer_sizes), weights, biases, hidden_activation, output_activation)


def _check_input(params: MlpParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.in_dim:
        raise ShapeError(f"input dimension {x.shape[-1]} != expected {params.in_dim}")
    if x.ndim not in (1, 2):
        raise ShapeError(f"input must be a vector or a batch of vectors, got ndim={x.ndim}")
    return x


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z  # linear


def _forward_pass(params: MlpParams, x: np.ndarray):
    """Return (output, per-layer inputs, per-layer pre-activations)."""
    n_layers = len(params.weights)
    inputs = []
    preacts = []
    h = x
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ w.T + b
        preacts.append(z)
        kind = params.output_activation if l == n_layers - 1 else params.hidden_activation
        h = _activate(z, kind)
    return h, inputs, preacts


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Evaluate the network on a vector or a (batch, in_dim) array."""
    x = _check_input(params, x)
    out, _, _ = _forward_pass(params, x)
    return out


def mlp_backward(
    params: MlpParams,
    x: np.ndarray,
    upstream_grad: np.ndarray,
    return_input_grad: bool = False,
):
    """Exact reverse-mode gradients of (upstream_grad . output) w.r.t. params.

    For batched input the contributions are summed over the batch. With
    return_input_grad=True also returns d(upstream . output)/dx, which the
    actor-critic updates need to differentiate a critic through its action
    input.
    """
    x = _check_input(params, x)
    g = np.asarray(upstream_grad, dtype=np.float64)
    if g.shape != ((params.out_dim,) if x.ndim == 1 else (x.shape[0], params.out_dim)):
        raise ShapeError(f"upstream_grad shape {g.shape} does not match output of input shape {x.shape}")

    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
        g = g[None, :]

    _, inputs, preacts = _forward_pass(params, x)
    n_layers = len(params.weights)
    w_grads: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    b_grads: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]

    delta = g
    for l in range(n_layers - 1, -1, -1):
        kind = params.output_activation if l == n_layers - 1 else params.hidden_activation
        z = preacts[l]
        if kind == "relu":
            delta = delta * (z > 0.0)
        elif kind == "tanh":
            t = np.tanh(z)
            delta = delta * (1.0 - t * t)
        # linear: delta unchanged
        w_grads[l] = delta.T @ inputs[l]
        b_grads[l] = delta.sum(axis=0)
        if l > 0 or return_input_grad:
            delta = delta @ params.weights[l]

    grads = ParamGrads(w_grads, b_grads)
    if return_input_grad:
        dx = delta[0] if squeeze else delta
        return grads, dx
    return grads


def adam_init(params: MlpParams, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8) -> AdamState:
    """Zero-moment Adam state congruent with params."""
    if not (0.0 < beta1 < 1.0 and 0.0 < beta2 < 1.0):
        raise InvalidConfigError(f"betas must lie in (0, 1), got {beta1}, {beta2}")
    return AdamState(
        m_weights=[np.zeros_like(w) for w in params.weights],
        m_biases=[np.zeros_like(b) for b in params.biases],
        v_weights=[np.zeros_like(w) for w in params.weights],
        v_biases=[np.zeros_like(b) for b in params.biases],
        beta1=beta1,
        beta2=beta2,
        epsilon=epsilon,
    )


def adam_step(
    state: AdamState, params: MlpParams, grads: ParamGrads, lr: float
) -> tuple[MlpParams, AdamState]:
    """One bias-corrected Adam update. Refuses non-finite gradients."""
    if lr <= 0.0:
        raise InvalidConfigError(f"learning rate must be positive, got {lr}")
    for g in grads.arrays():
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient, update refused")

    t = state.step_count + 1
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t

    def update(p, m, v, g):
        m_new = b1 * m + (1.0 - b1) * g
        v_new = b2 * v + (1.0 - b2) * (g * g)
        p_new = p - lr * (m_new / corr1) / (np.sqrt(v_new / corr2) + eps)
        return p_new, m_new, v_new

    new_w, new_mw, new_vw = [], [], []
    for p, m, v, g in zip(params.weights, state.m_weights, state.v_weights, grads.weights):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        pn, mn, vn = update(p, m, v, g)
        new_w.append(pn)
        new_mw.append(mn)
        new_vw.append(vn)
    new_b, new_mb, new_vb = [], [], []
    for p, m, v, g in zip(params.biases, state.m_biases, state.v_biases, grads.biases):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        pn, mn, vn = update(p, m, v, g)
        new_b.append(pn)
        new_mb.append(mn)
        new_vb.append(vn)

    new_params = MlpParams(
        list(params.layer_sizes), new_w, new_b, params.hidden_activation, params.output_activation
    )
    new_state = AdamState(new_mw, new_mb, new_vw, new_vb, t, b1, b2, eps)
    return new_params, new_state


def clip_grad_norm(grads: ParamGrads, max_norm: float) -> tuple[ParamGrads, float]:
    """Scale gradients so their global L2 norm is at most max_norm.

    Returns the clipped gradients and the pre-clip norm. The norm is
    accumulated per array in (weights..., biases...) order; callers that
    replicate updates bit-for-bit rely on that order.
    """
    total = 0.0
    for g in grads.arrays():
        total += float(np.sum(g * g))
    norm = float(np.sqrt(total))
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return ParamGrads([w * scale for w in grads.weights], [b * scale for b in grads.biases]), norm


def soft_update(target: MlpParams, online: MlpParams, tau: float) -> MlpParams:
    """Polyak averaging: target' = tau * online + (1 - tau) * target."""
    if not (0.0 <= tau <= 1.0):
        raise InvalidConfigError(f"tau must lie in [0, 1], got {tau}")
    if target.layer_sizes != online.layer_sizes:
        raise ShapeError(f"layer sizes differ: {target.layer_sizes} vs {online.layer_sizes}")
    new_w = [tau * wo + (1.0 - tau) * wt for wt, wo in zip(target.weights, online.weights)]
    new_b = [tau * bo + (1.0 - tau) * bt for bt, bo in zip(target.biases, online.biases)]
    return MlpParams(
        list(target.layer_sizes), new_w, new_b, target.hidden_activation, target.output_activation
    )
