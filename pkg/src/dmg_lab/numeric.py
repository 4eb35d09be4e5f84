"""Small deterministic numerical kernel.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Randomness
always flows through an explicit ``numpy.random.Generator`` handle; nothing in
this package touches the global numpy RNG.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

DTYPE = np.float64


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(seed: int, n: int) -> list:
    """Independent child generators derived from one seed.

    Separate streams keep, e.g., mask sampling from perturbing the shuffle
    order, so runs that differ only in whether masks are drawn stay aligned.
    """
    children = np.random.SeedSequence(seed).spawn(n)
    return [np.random.Generator(np.random.PCG64(s)) for s in children]


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


def _check_shapes(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> None:
    if x.ndim != 2 or W.ndim != 2 or b.ndim != 1:
        raise ValueError(
            f"dense layer expects x[batch,in], W[in,out], b[out]; got "
            f"{x.shape}, {W.shape}, {b.shape}"
        )
    if x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise ValueError(
            f"shape mismatch: x{x.shape} @ W{W.shape} + b{b.shape}"
        )


def dense_forward(x, W, b) -> np.ndarray:
    """y = x @ W + b."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    _check_shapes(x, W, b)
    return x @ W + b


def dense_backward(grad_y, x, W) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of an affine layer: (grad_x, grad_W, grad_b)."""
    grad_y, x, W = as_tensor(grad_y), as_tensor(x), as_tensor(W)
    if grad_y.ndim != 2 or grad_y.shape != (x.shape[0], W.shape[1]):
        raise ValueError(f"grad_y shape {grad_y.shape} does not match output of x{x.shape} @ W{W.shape}")
    _check_shapes(x, W, np.zeros(W.shape[1]))
    return grad_y @ W.T, x.T @ grad_y, grad_y.sum(axis=0)


def relu(x) -> np.ndarray:
    return np.maximum(as_tensor(x), 0.0)


def relu_backward(grad_y, x) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return np.where(as_tensor(x) > 0.0, as_tensor(grad_y), 0.0)


def sigmoid(x) -> np.ndarray:
    x = as_tensor(x)
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softmax(logits) -> np.ndarray:
    z = as_tensor(logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits, labels) -> Tuple[float, np.ndarray]:
    """Batch-mean softmax cross-entropy and its gradient wrt the logits."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"logits {logits.shape} and labels {labels.shape} disagree")
    n, C = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"labels must lie in [0, {C}); got range [{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_z
    rows = np.arange(n)
    loss = float(-log_p[rows, labels].mean())
    grad = np.exp(log_p)
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, grad


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
              state: AdamState, lr) -> Dict[str, np.ndarray]:
    """One bias-corrected Adam update, in place.

    ``lr`` is either a float or a mapping from parameter name to float (used
    when mask parameters run on their own learning rate).
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = lr[name] if isinstance(lr, dict) else lr
        params[name] -= step * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


@dataclass(frozen=True)
class LrSchedule:
    kind: str = "constant"  # constant | exponential | inverse
    lr0: float = 1e-4
    rate: float = 0.99
    gamma: float = 1e-4
    power: float = 0.75

    def __post_init__(self):
        if self.kind not in ("constant", "exponential", "inverse"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    """Learning rate for a 1-based epoch index."""
    if epoch < 1:
        raise ValueError(f"epoch must be >= 1, got {epoch}")
    if schedule.kind == "constant":
        return schedule.lr0
    if schedule.kind == "exponential":
        return schedule.lr0 * schedule.rate ** (epoch - 1)
    return schedule.lr0 / (1.0 + schedule.gamma * (epoch - 1)) ** schedule.power


def bernoulli_draw(rng: np.random.Generator, probs) -> np.ndarray:
    probs = as_tensor(probs)
    if np.any(~(probs >= 0.0) | ~(probs <= 1.0)):
        raise ValueError("bernoulli probabilities must lie in [0, 1]")
    return (rng.random(probs.shape) < probs).astype(DTYPE)


def check_finite(name: str, value) -> None:
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"non-finite value in {name}")


__all__ = [
    "AdamState", "LrSchedule", "adam_step", "as_tensor", "bernoulli_draw",
    "check_finite", "dense_backward", "dense_forward", "lr_at", "make_rng",
    "relu", "relu_backward", "sigmoid", "softmax",
    "softmax_xent", "spawn_rngs",
]
