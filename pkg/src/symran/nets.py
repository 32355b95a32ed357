"""Dense numeric layer: small feed-forward nets with analytic gradients.

Everything is float64 numpy. The network family is deliberately fixed
(affine layers + {identity, sigmoid, tanh, relu}) so that every gradient
in the repo can be validated against central differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError

ACTIVATIONS = ("identity", "sigmoid", "tanh", "relu")

NET_FORMAT = "symran-net"
NET_FORMAT_VERSION = 1


def sigmoid(x: np.ndarray) -> np.ndarray:
    # piecewise form avoids overflow in exp for large |x|
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _apply_activation(tag: str, z: np.ndarray) -> np.ndarray:
    if tag == "identity":
        return z
    if tag == "sigmoid":
        return sigmoid(z)
    if tag == "tanh":
        return np.tanh(z)
    if tag == "relu":
        return np.maximum(z, 0.0)
    raise ValueError(f"unknown activation tag: {tag!r}")


def _activation_grad(tag: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    """d activation / d pre-activation, from pre-activation z and output a."""
    if tag == "identity":
        return np.ones_like(z)
    if tag == "sigmoid":
        return a * (1.0 - a)
    if tag == "tanh":
        return 1.0 - a * a
    if tag == "relu":
        return (z > 0.0).astype(np.float64)
    raise ValueError(f"unknown activation tag: {tag!r}")


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise ValueError("layer weight must be 2-D and bias 1-D")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise ValueError("bias length must match weight rows")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation tag: {self.activation!r}")


class FeedForwardNet:
    """Fixed-family MLP with explicit forward caches and backprop.

    A net under training has exactly one logical writer; inference calls
    are pure functions of (parameters, input).
    """

    def __init__(self, layers: list[Layer]):
        if not layers:
            raise ValueError("net needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if nxt.weight.shape[1] != prev.weight.shape[0]:
                raise ValueError(
                    f"layer dims do not chain: {prev.weight.shape} -> {nxt.weight.shape}"
                )
        self.layers = layers

    # -- construction ------------------------------------------------------

    @staticmethod
    def create(
        dims: list[int],
        activations: list[str],
        rng: np.random.Generator,
    ) -> "FeedForwardNet":
        """Glorot-uniform weights (+-sqrt(6/(fan_in+fan_out))), zero biases."""
        if len(activations) != len(dims) - 1:
            raise ValueError("need one activation per layer")
        layers = []
        for fan_in, fan_out, act in zip(dims, dims[1:], activations):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            layers.append(Layer(w, np.zeros(fan_out), act))
        return FeedForwardNet(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    @property
    def param_count(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)

    # -- forward / backward ------------------------------------------------

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, _ = self.forward_cached(x)
        return y

    def forward_cached(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        """Returns output and the per-layer caches needed by backward().

        Accepts a single input (in,) or a batch (B, in).
        """
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        a = x[None, :] if single else x
        if a.shape[-1] != self.input_dim:
            raise ValueError(
                f"input dim {a.shape[-1]} does not match first layer ({self.input_dim})"
            )
        cache = []
        for layer in self.layers:
            z = a @ layer.weight.T + layer.bias
            out = _apply_activation(layer.activation, z)
            cache.append((a, z, out))
            a = out
        return (a[0] if single else a), cache

    def backward(
        self, cache: list, grad_out: np.ndarray
    ) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
        """Backprop an output adjoint; returns per-layer (dW, db) and dX.

        grad_out shape must match the cached forward's output shape.
        """
        g = np.asarray(grad_out, dtype=np.float64)
        single = g.ndim == 1
        if single:
            g = g[None, :]
        grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            a_in, z, a_out = cache[i]
            layer = self.layers[i]
            dz = g * _activation_grad(layer.activation, z, a_out)
            dw = dz.T @ a_in
            db = dz.sum(axis=0)
            g = dz @ layer.weight
            grads[i] = (dw, db)
        return grads, (g[0] if single else g)

    # -- flat parameter views (for gradient checking) -----------------------

    def get_params(self) -> np.ndarray:
        return np.concatenate(
            [l.weight.ravel() for l in self.layers] + [l.bias for l in self.layers]
        )

    def set_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.param_count:
            raise ValueError("flat parameter vector has wrong size")
        i = 0
        for l in self.layers:
            n = l.weight.size
            l.weight = flat[i : i + n].reshape(l.weight.shape).copy()
            i += n
        for l in self.layers:
            n = l.bias.size
            l.bias = flat[i : i + n].copy()
            i += n

    def flatten_grads(self, grads: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
        return np.concatenate(
            [g[0].ravel() for g in grads] + [g[1] for g in grads]
        )

    def copy(self) -> "FeedForwardNet":
        return FeedForwardNet(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )

    # -- persistence ---------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": NET_FORMAT,
            "version": NET_FORMAT_VERSION,
            "layers": [
                {
                    "in": int(l.weight.shape[1]),
                    "out": int(l.weight.shape[0]),
                    "activation": l.activation,
                    "weight": l.weight.ravel().tolist(),
                    "bias": l.bias.tolist(),
                }
                for l in self.layers
            ],
        }

    @staticmethod
    def from_dict(d: dict) -> "FeedForwardNet":
        if d.get("format") != NET_FORMAT:
            raise ValueError(f"not a serialized net: format={d.get('format')!r}")
        if d.get("version") != NET_FORMAT_VERSION:
            raise ValueError(f"unsupported net version: {d.get('version')!r}")
        layers = []
        for spec in d["layers"]:
            w = np.array(spec["weight"], dtype=np.float64).reshape(
                spec["out"], spec["in"]
            )
            layers.append(Layer(w, np.array(spec["bias"]), spec["activation"]))
        return FeedForwardNet(layers)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @staticmethod
    def from_json(s: str) -> "FeedForwardNet":
        return FeedForwardNet.from_dict(json.loads(s))


@dataclass
class AdamState:
    """Adaptive-moment optimizer state for one flat parameter vector."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: np.ndarray = field(default=None)  # type: ignore[assignment]
    v: np.ndarray = field(default=None)  # type: ignore[assignment]

    @staticmethod
    def for_size(n: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8) -> "AdamState":
        return AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                         m=np.zeros(n), v=np.zeros(n))

    def apply(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """One update step; rejects non-finite gradients before mutating."""
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != params.shape or grad.shape != self.m.shape:
            raise ValueError("gradient shape does not match optimizer state")
        if not np.all(np.isfinite(grad)):
            raise NumericError("non-finite gradient; step rejected")
        self.step_count += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1**self.step_count)
        vhat = self.v / (1.0 - self.beta2**self.step_count)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def train_step(
    net: FeedForwardNet,
    state: AdamState,
    cache: list,
    output_grad: np.ndarray,
    loss: float,
) -> float:
    """Backprop the output adjoint through `net` and apply one Adam step.

    `cache` must come from the forward pass that produced `loss`. Returns
    the loss for bookkeeping. Non-finite gradients reject the step.
    """
    if not np.isfinite(loss):
        raise NumericError("non-finite loss; step rejected")
    grads, _ = net.backward(cache, output_grad)
    flat_grad = net.flatten_grads(grads)
    new_params = state.apply(net.get_params(), flat_grad)
    net.set_params(new_params)
    return float(loss)


def finite_diff_check(f, params: np.ndarray, analytic_grad: np.ndarray,
                      epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    relative error per parameter: |analytic - central| / (|central| + 1e-12).
    """
    params = np.asarray(params, dtype=np.float64)
    analytic_grad = np.asarray(analytic_grad, dtype=np.float64)
    if analytic_grad.shape != params.shape:
        raise ValueError("analytic gradient shape must match params")
    worst = 0.0
    for i in range(params.size):
        p = params.copy()
        p[i] += epsilon
        f_hi = f(p)
        p[i] -= 2.0 * epsilon
        f_lo = f(p)
        if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
            raise NumericError("function not finite at perturbed parameters")
        numeric = (f_hi - f_lo) / (2.0 * epsilon)
        err = abs(analytic_grad[i] - numeric) / (abs(numeric) + 1e-12)
        worst = max(worst, err)
    return worst


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax with max-subtraction stability."""
    z = np.asarray(logits, dtype=np.float64)
    zmax = z.max(axis=-1, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_kl(p_logits: np.ndarray, q_logits: np.ndarray, kappa: float) -> float:
    """KL(softmax(p/kappa) || softmax(q/kappa)), computed stably.

    Zero exactly when the tempered distributions coincide; invariant to
    adding a constant to all entries of either logit vector.
    """
    if kappa <= 0:
        raise ValueError(f"temperature must be positive, got {kappa}")
    p = np.asarray(p_logits, dtype=np.float64)
    q = np.asarray(q_logits, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"logit shapes differ: {p.shape} vs {q.shape}")
    lp = log_softmax(p / kappa)
    lq = log_softmax(q / kappa)
    return float(np.sum(np.exp(lp) * (lp - lq), axis=-1).mean())
