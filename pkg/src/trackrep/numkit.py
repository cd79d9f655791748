"""Dense numeric kernels and the differentiation substrate.

Everything trainable in this package runs on float64 numpy arrays. Losses
expose hand-derived analytic gradients; ``finite_diff_check`` is the harness
that verifies them against central differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

LOG_EPS = 1e-12  # clamp applied to predicted probabilities before log


@dataclass
class ParamTensor:
    """A trainable array paired with its gradient accumulator."""

    value: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        else:
            self.grad = np.asarray(self.grad, dtype=np.float64)
        if self.grad.shape != self.value.shape:
            raise ValueError(
                f"grad shape {self.grad.shape} != value shape {self.value.shape}"
            )

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def softmax(v: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Temperature softmax with max-subtraction for overflow stability."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    v = np.asarray(v, dtype=np.float64)
    z = v / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cosine_sim(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine_sim of a zero-norm vector is undefined")
    return float(np.dot(u, v) / (nu * nv))


def cross_entropy(target: np.ndarray, pred: np.ndarray) -> float:
    """CE between two probability vectors; pred is clamped at LOG_EPS."""
    target = np.asarray(target, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if target.shape != pred.shape:
        raise ValueError(f"shape mismatch: target {target.shape}, pred {pred.shape}")
    if np.any(target < 0) or np.any(pred < 0):
        raise ValueError("probability vectors must be non-negative")
    for name, p in (("target", target), ("pred", pred)):
        s = p.sum()
        if abs(s - 1.0) > 1e-9:
            raise ValueError(f"{name} does not sum to 1 (sum={s!r})")
    return float(-(target * np.log(np.maximum(pred, LOG_EPS))).sum())


def normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """L2-normalize rows; returns (unit rows, row norms) for the backward pass."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("cannot normalize a zero-norm row")
    return x / norms, norms


def normalize_rows_backward(
    unit: np.ndarray, norms: np.ndarray, d_unit: np.ndarray
) -> np.ndarray:
    """Backprop through row L2 normalization: dx = (g - (g.u) u) / |x|."""
    dot = (d_unit * unit).sum(axis=-1, keepdims=True)
    return (d_unit - dot * unit) / norms


class Mlp:
    """Linear stack with tanh between layers and a linear final layer.

    ``dims = [d_in, h1, ..., d_out]``. Forward returns a cache consumed by
    ``backward``, which accumulates parameter gradients and returns the input
    gradient. ``values`` lets a caller run the same architecture with an
    alternative parameter set (e.g. an EMA copy).
    """

    def __init__(self, dims: Sequence[int], rng: np.random.Generator):
        if len(dims) < 2:
            raise ValueError("Mlp needs at least input and output dims")
        self.dims = tuple(int(d) for d in dims)
        self.params: list[ParamTensor] = []
        for d_in, d_out in zip(self.dims[:-1], self.dims[1:]):
            scale = 1.0 / np.sqrt(d_in)
            w = rng.uniform(-scale, scale, size=(d_out, d_in))
            b = np.zeros(d_out)
            self.params.append(ParamTensor(w))
            self.params.append(ParamTensor(b))

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1

    def values(self) -> list[np.ndarray]:
        return [p.value for p in self.params]

    def forward(
        self, x: np.ndarray, values: Sequence[np.ndarray] | None = None
    ) -> tuple[np.ndarray, list[np.ndarray]]:
        """Returns (output B x d_out, cache of layer inputs/activations)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.dims[0]:
            raise ValueError(f"expected input dim {self.dims[0]}, got {x.shape[1]}")
        vals = list(values) if values is not None else self.values()
        cache = [x]
        h = x
        for layer in range(self.n_layers):
            w, b = vals[2 * layer], vals[2 * layer + 1]
            h = h @ w.T + b
            if layer < self.n_layers - 1:
                h = np.tanh(h)
            cache.append(h)
        return h, cache

    def backward(self, cache: list[np.ndarray], d_out: np.ndarray) -> np.ndarray:
        """Accumulate parameter grads from upstream d_out; return d_input."""
        g = np.atleast_2d(np.asarray(d_out, dtype=np.float64))
        for layer in reversed(range(self.n_layers)):
            h_in = cache[layer]
            if layer < self.n_layers - 1:
                a = cache[layer + 1]  # tanh activations
                g = g * (1.0 - a * a)
            self.params[2 * layer].grad += g.T @ h_in
            self.params[2 * layer + 1].grad += g.sum(axis=0)
            g = g @ self.params[2 * layer].value
        return g


def finite_diff_check(
    loss_and_grad: Callable[[], float],
    params: Sequence[ParamTensor],
    h: float = 1e-5,
) -> float:
    """Max relative error between analytic grads and central differences.

    ``loss_and_grad`` must be deterministic, return the scalar loss, and
    accumulate analytic gradients into ``params`` (which are zeroed here
    first). Coordinates where |analytic| + |numeric| <= 1e-8 are skipped.
    """
    for p in params:
        p.zero_grad()
    loss = loss_and_grad()
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss!r}")
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.value.reshape(-1)
        a_flat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_and_grad()
            flat[i] = orig - h
            down = loss_and_grad()
            flat[i] = orig
            num = (up - down) / (2.0 * h)
            denom = abs(a_flat[i]) + abs(num)
            if denom > 1e-8:
                worst = max(worst, abs(a_flat[i] - num) / denom)
    for p in params:
        p.zero_grad()
    loss_and_grad()  # leave grads consistent with the unperturbed point
    return worst
