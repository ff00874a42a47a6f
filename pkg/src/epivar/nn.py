"""Minimal dense-network core: tapered MLPs with ReLU hidden layers and a
(optionally masked) softmax head, exact reverse-mode gradients of selected
log-probabilities, and an Adam optimizer.  Everything is float64 and batched
over the leading axis."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

N_HIDDEN = 3


@dataclass
class DenseNet:
    weights: list[np.ndarray]   # (out_dim, in_dim) per layer
    biases: list[np.ndarray]    # (out_dim,) per layer

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


def taper_widths(n_in: int, n_out: int) -> list[int]:
    """Layer widths interpolated linearly from input to output size, floor 2."""
    steps = N_HIDDEN + 1
    hidden = [
        max(2, round(n_in + (n_out - n_in) * k / steps)) for k in range(1, steps)
    ]
    return [n_in, *hidden, n_out]


def init_dense_net(n_in: int, n_out: int, rng: np.random.Generator) -> DenseNet:
    """He-uniform weights scaled by fan-in, zero biases."""
    widths = taper_widths(n_in, n_out)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        limit = np.sqrt(6.0 / max(fan_in, 1))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return DenseNet(weights, biases)


def forward(net: DenseNet, x: np.ndarray, mask: np.ndarray | None = None):
    """Probabilities (B, out) and the cache needed by :func:`backward`.

    ``mask`` (B, out) restricts the softmax to the allowed entries per row;
    excluded entries get exactly zero probability.  Softmax uses rowwise
    max-subtraction, safe for logits up to ~1e300.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.weights[0].shape[1]:
        raise ValueError(
            f"input shape {x.shape} does not match net input width {net.weights[0].shape[1]}"
        )
    activations = [x]
    h = x
    last = len(net.weights) - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w.T + b
        if k < last:
            np.maximum(h, 0.0, out=h)
            activations.append(h)
    logits = h
    if mask is None:
        zmax = logits.max(axis=1, keepdims=True)
        e = np.exp(logits - zmax)
    else:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=1).all():
            raise ValueError("every row needs at least one allowed output")
        zmax = np.where(mask, logits, -np.inf).max(axis=1, keepdims=True)
        e = np.exp(logits - zmax) * mask
    probs = e / e.sum(axis=1, keepdims=True)
    cache = (activations, probs)
    return probs, cache


def new_grad_buffer(net: DenseNet) -> list[np.ndarray]:
    return [np.zeros_like(p) for p in net.parameters()]


def backward(net: DenseNet, cache, index: np.ndarray, upstream: np.ndarray, grads) -> None:
    """Accumulate d(sum_b upstream[b] * log probs[b, index[b]]) / d(params) into grads."""
    activations, probs = cache
    B = probs.shape[0]
    delta = -probs * upstream[:, None]
    delta[np.arange(B), index] += upstream
    for k in range(len(net.weights) - 1, -1, -1):
        a = activations[k]
        grads[2 * k] += delta.T @ a
        grads[2 * k + 1] += delta.sum(axis=0)
        if k > 0:
            delta = (delta @ net.weights[k]) * (a > 0)


def log_prob(net: DenseNet, x: np.ndarray, index: np.ndarray, mask=None) -> np.ndarray:
    probs, _ = forward(net, x, mask)
    return np.log(probs[np.arange(len(index)), index])


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None

    @classmethod
    def for_net(cls, net: DenseNet, lr: float = 1e-3) -> "AdamState":
        return cls(
            lr=lr,
            m=[np.zeros_like(p) for p in net.parameters()],
            v=[np.zeros_like(p) for p in net.parameters()],
        )


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> None:
    """Standard bias-corrected Adam update, applied in place (descent direction)."""
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient; step aborted")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def net_to_payload(net: DenseNet) -> dict:
    return {
        "widths": net.widths,
        "layers": [
            {"w": w.tolist(), "b": b.tolist()} for w, b in zip(net.weights, net.biases)
        ],
    }


def net_from_payload(payload: dict) -> DenseNet:
    weights = [np.array(layer["w"], dtype=np.float64) for layer in payload["layers"]]
    biases = [np.array(layer["b"], dtype=np.float64) for layer in payload["layers"]]
    net = DenseNet(weights, biases)
    if net.widths != payload["widths"]:
        raise ValueError("checkpoint widths do not match layer shapes")
    return net


def save_net(net: DenseNet, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(net_to_payload(net), fh)


def load_net(path) -> DenseNet:
    with open(path, "r", encoding="utf-8") as fh:
        return net_from_payload(json.load(fh))
