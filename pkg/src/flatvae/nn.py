"""Dense-network substrate: forward evaluation, exact Jacobians, reverse-mode
gradients (including gradients of Jacobian-dependent losses), and Adam.

Everything is float64 numpy. Batches are stacked along the first axis.
Activations are elementwise except softmax, which is only permitted on the
final layer of a network.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ELEMENTWISE_ACTIVATIONS = ("identity", "elu", "selu", "softplus")
ACTIVATIONS = ELEMENTWISE_ACTIVATIONS + ("softmax",)

# Standard self-normalizing constants for SELU.
_SELU_SCALE = 1.0507009873554804934193349852946
_SELU_ALPHA = 1.6732632423543772848170429916717


@dataclass
class Layer:
    weight: np.ndarray  # (fan_out, fan_in)
    bias: np.ndarray  # (fan_out,)
    activation: str

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise ValueError("weight must be 2-D and bias 1-D")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise ValueError("bias length must equal weight fan_out")


@dataclass
class MLP:
    layers: list[Layer] = field(default_factory=list)

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if nxt.weight.shape[1] != prev.weight.shape[0]:
                raise ValueError("consecutive layer shapes do not compose")
        for layer in self.layers[:-1]:
            if layer.activation == "softmax":
                raise ValueError("softmax is only supported on the final layer")

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[0]


def init_mlp(widths, activations, rng) -> MLP:
    """Build an MLP with Glorot-uniform weights and zero biases.

    widths: [in, h1, ..., out]; activations: one tag per layer (or a single
    tag applied to every layer).
    """
    widths = list(widths)
    if len(widths) < 2:
        raise ValueError("need at least an input and an output width")
    n_layers = len(widths) - 1
    if isinstance(activations, str):
        activations = [activations] * n_layers
    activations = list(activations)
    if len(activations) != n_layers:
        raise ValueError("one activation per layer required")
    layers = []
    for fan_in, fan_out, act in zip(widths[:-1], widths[1:], activations):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        layers.append(Layer(w, np.zeros(fan_out), act))
    return MLP(layers)


def _act(name, u):
    if name == "identity":
        return u
    if name == "elu":
        return np.where(u > 0, u, np.expm1(np.minimum(u, 0.0)))
    if name == "selu":
        return _SELU_SCALE * np.where(u > 0, u, _SELU_ALPHA * np.expm1(np.minimum(u, 0.0)))
    if name == "softplus":
        return np.maximum(u, 0.0) + np.log1p(np.exp(-np.abs(u)))
    raise ValueError(f"not an elementwise activation: {name!r}")


def _act_prime(name, u):
    if name == "identity":
        return np.ones_like(u)
    if name == "elu":
        return np.where(u > 0, 1.0, np.exp(np.minimum(u, 0.0)))
    if name == "selu":
        return _SELU_SCALE * np.where(u > 0, 1.0, _SELU_ALPHA * np.exp(np.minimum(u, 0.0)))
    if name == "softplus":
        return _sigmoid(u)
    raise ValueError(f"not an elementwise activation: {name!r}")


def _act_second(name, u):
    if name == "identity":
        return np.zeros_like(u)
    if name == "elu":
        return np.where(u > 0, 0.0, np.exp(np.minimum(u, 0.0)))
    if name == "selu":
        return _SELU_SCALE * np.where(u > 0, 0.0, _SELU_ALPHA * np.exp(np.minimum(u, 0.0)))
    if name == "softplus":
        s = _sigmoid(u)
        return s * (1.0 - s)
    raise ValueError(f"not an elementwise activation: {name!r}")


def _sigmoid(u):
    out = np.empty_like(u)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    eu = np.exp(u[~pos])
    out[~pos] = eu / (1.0 + eu)
    return out


def softmax(u):
    """Row-wise stable softmax."""
    shifted = u - u.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def mlp_forward(net: MLP, x) -> np.ndarray:
    """Evaluate the network on a batch (rows) or a single vector."""
    out, squeeze = _as_batch(x)
    if out.shape[1] != net.in_dim:
        raise ValueError(f"input width {out.shape[1]} != network input width {net.in_dim}")
    for layer in net.layers:
        u = out @ layer.weight.T + layer.bias
        out = softmax(u) if layer.activation == "softmax" else _act(layer.activation, u)
    return out[0] if squeeze else out


def forward_cache(net: MLP, x):
    """Forward pass that retains per-layer pre-activations for backprop."""
    a, _ = _as_batch(x)
    if a.shape[1] != net.in_dim:
        raise ValueError(f"input width {a.shape[1]} != network input width {net.in_dim}")
    acts = [a]
    pres = []
    for layer in net.layers:
        u = acts[-1] @ layer.weight.T + layer.bias
        pres.append(u)
        acts.append(softmax(u) if layer.activation == "softmax" else _act(layer.activation, u))
    return acts[-1], (acts, pres)


def backward(net: MLP, cache, d_out):
    """Reverse pass from d(loss)/d(output); returns (d_input, grads).

    grads is a list of (d_weight, d_bias) per layer, summed over the batch.
    """
    acts, pres = cache
    grads = [None] * len(net.layers)
    da = d_out
    for k in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[k]
        u = pres[k]
        if layer.activation == "softmax":
            p = acts[k + 1]
            du = p * (da - (da * p).sum(axis=1, keepdims=True))
        else:
            du = da * _act_prime(layer.activation, u)
        grads[k] = (du.T @ acts[k], du.sum(axis=0))
        da = du @ layer.weight
    return da, grads


def tangent_forward(net: MLP, z):
    """Joint forward pass of outputs and exact Jacobians for a batch of inputs.

    Returns (out (B, n_out), jac (B, n_out, n_in), cache). Requires every
    activation to be elementwise (strip a final softmax first).
    """
    a, _ = _as_batch(z)
    if a.shape[1] != net.in_dim:
        raise ValueError(f"input width {a.shape[1]} != network input width {net.in_dim}")
    B, d = a.shape
    t = np.broadcast_to(np.eye(d), (B, d, d)).copy()
    acts = [a]
    pres = []
    pre_tangents = []
    tangents = [t]
    for layer in net.layers:
        if layer.activation == "softmax":
            raise ValueError("tangent pass requires elementwise activations")
        u = acts[-1] @ layer.weight.T + layer.bias
        v = np.matmul(layer.weight, tangents[-1])
        sp = _act_prime(layer.activation, u)
        acts.append(_act(layer.activation, u))
        tangents.append(sp[:, :, None] * v)
        pres.append(u)
        pre_tangents.append(v)
    return acts[-1], tangents[-1], (acts, pres, pre_tangents, tangents)


def tangent_backward(net: MLP, cache, d_out, d_jac):
    """Reverse pass through tangent_forward.

    d_out (B, n_out) and d_jac (B, n_out, n_in) are the gradients of a scalar
    loss with respect to the outputs and the Jacobians. Returns
    (d_input (B, n_in), grads) with grads as in `backward`. The gradient with
    respect to the identity seed tangent is discarded (it is a constant).
    """
    acts, pres, pre_tangents, tangents = cache
    grads = [None] * len(net.layers)
    da = d_out
    dt = d_jac
    for k in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[k]
        u = pres[k]
        v = pre_tangents[k]
        sp = _act_prime(layer.activation, u)
        spp = _act_second(layer.activation, u)
        du = da * sp + spp * (dt * v).sum(axis=2)
        dv = dt * sp[:, :, None]
        dw = du.T @ acts[k] + np.einsum("bnd,bmd->nm", dv, tangents[k])
        grads[k] = (dw, du.sum(axis=0))
        da = du @ layer.weight
        dt = np.matmul(layer.weight.T, dv)
    return da, grads


def mlp_jacobian(net: MLP, z) -> np.ndarray:
    """Exact Jacobian of the network output at a single input point."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError("mlp_jacobian expects a single input vector")
    if not np.all(np.isfinite(z)):
        raise ValueError("input point must be finite")
    a = z[None, :]
    jac = np.eye(net.in_dim)
    for layer in net.layers:
        u = a @ layer.weight.T + layer.bias
        jac = layer.weight @ jac
        if layer.activation == "softmax":
            p = softmax(u)[0]
            jac = (np.diag(p) - np.outer(p, p)) @ jac
            a = p[None, :]
        else:
            jac = _act_prime(layer.activation, u)[0][:, None] * jac
            a = _act(layer.activation, u)
    return jac


def finite_diff_jacobian(f, z, h) -> np.ndarray:
    """Central-difference Jacobian estimate, one column per input coordinate."""
    if h <= 0:
        raise ValueError("step size must be positive")
    z = np.asarray(z, dtype=np.float64)
    cols = []
    for i in range(z.size):
        zp = z.copy()
        zm = z.copy()
        zp[i] += h
        zm[i] -= h
        cols.append((np.asarray(f(zp)) - np.asarray(f(zm))) / (2.0 * h))
    return np.stack(cols, axis=1)


def strip_final_softmax(net: MLP) -> MLP:
    """View of `net` whose final softmax is replaced by identity (shared arrays)."""
    last = net.layers[-1]
    if last.activation != "softmax":
        raise ValueError("final layer is not softmax")
    return MLP(net.layers[:-1] + [Layer(last.weight, last.bias, "identity")])


def mlp_params(net: MLP):
    """Parameter arrays of the network, weights and biases interleaved."""
    out = []
    for layer in net.layers:
        out.append(layer.weight)
        out.append(layer.bias)
    return out


def flatten_grads(grads):
    """Interleave (d_weight, d_bias) pairs to match mlp_params ordering."""
    out = []
    for dw, db in grads:
        out.append(dw)
        out.append(db)
    return out


def zero_grads_like(params):
    return [np.zeros_like(p) for p in params]


class AdamState:
    """Adam moment buffers plus hyperparameters for a fixed parameter list."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.step = 0
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update, in place. Returns (params, state)."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and state must have matching lengths")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError("gradient shape does not match parameter shape")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient in adam_step")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state
