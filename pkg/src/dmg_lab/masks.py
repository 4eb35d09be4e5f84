"""Per-domain neuron masks: parameters, sampling, gradients and overlap measures.

Each source domain owns a real-valued score vector per masked layer. Scores
map to keep-probabilities through a sigmoid; training draws hard Bernoulli
masks from those probabilities and routes gradients back to the scores along
the soft path (straight-through).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .numeric import as_tensor, bernoulli_draw, sigmoid

SIOU_EPS = 1e-8


@dataclass(frozen=True)
class LayerMaskSpec:
    layer_index: int
    k: int


class MaskBank:
    """Mask scores for every (domain, masked layer).

    ``params[l]`` is a ``(p, k_l)`` array whose row ``i`` holds the scores of
    ``domains[i]`` at masked layer ``l``.
    """

    def __init__(self, domains: Sequence[str], specs: Sequence[LayerMaskSpec],
                 params: Optional[List[np.ndarray]] = None):
        self.domains = list(domains)
        self.specs = list(specs)
        if len(set(self.domains)) != len(self.domains):
            raise ValueError(f"duplicate domain ids in {self.domains}")
        if params is None:
            params = [np.zeros((len(self.domains), s.k)) for s in self.specs]
        self.params = [as_tensor(p) for p in params]
        if len(self.params) != len(self.specs):
            raise ValueError("one parameter array per masked layer is required")
        for spec, p in zip(self.specs, self.params):
            if p.shape != (len(self.domains), spec.k):
                raise ValueError(
                    f"layer {spec.layer_index}: params shape {p.shape}, expected "
                    f"{(len(self.domains), spec.k)}"
                )

    @classmethod
    def init_uniform(cls, domains, specs, rng: np.random.Generator, low=0.0, high=1.0):
        params = [rng.uniform(low, high, size=(len(domains), s.k)) for s in specs]
        return cls(domains, specs, params)

    @classmethod
    def saturated(cls, domains, specs):
        """Every score at +inf, so every probability is exactly 1."""
        return cls(domains, specs, [np.full((len(domains), s.k), np.inf) for s in specs])

    @property
    def p(self) -> int:
        return len(self.domains)

    def index(self, domain: str) -> int:
        try:
            return self.domains.index(domain)
        except ValueError:
            raise KeyError(f"unknown domain {domain!r}; bank holds {self.domains}") from None

    def probs(self, layer: int) -> np.ndarray:
        return mask_probs(self.params[layer])

    def domain_probs(self, domain: str) -> List[np.ndarray]:
        i = self.index(domain)
        return [mask_probs(p[i]) for p in self.params]

    def copy(self) -> "MaskBank":
        return MaskBank(self.domains, self.specs, [p.copy() for p in self.params])

    def param_dict(self) -> Dict[str, np.ndarray]:
        return {f"mask{l}": p for l, p in enumerate(self.params)}


def mask_probs(params) -> np.ndarray:
    return sigmoid(params)


def apply_mask(activations, mask) -> np.ndarray:
    a, m = as_tensor(activations), as_tensor(mask)
    if a.shape[-1] != m.shape[-1]:
        raise ValueError(f"activation width {a.shape[-1]} != mask width {m.shape[-1]}")
    return a * m


def sample_masks(bank: MaskBank, domain_idx: np.ndarray, rng: np.random.Generator,
                 per_instance: bool = True) -> List[np.ndarray]:
    """Hard masks for a batch, one row per instance, drawn from each row's domain.

    With ``per_instance=False`` every instance of a domain shares one draw.
    """
    domain_idx = np.asarray(domain_idx)
    out = []
    for l in range(len(bank.specs)):
        probs = bank.probs(l)
        if per_instance:
            out.append(bernoulli_draw(rng, probs[domain_idx]))
        else:
            draws = bernoulli_draw(rng, probs)
            out.append(draws[domain_idx])
    return out


def straight_through_grad(grad_masked, activations, params) -> np.ndarray:
    """Score gradient for masked activations a * m.

    The forward pass may have used a hard sample; the backward pass treats the
    mask as its probability sigma(score), so the gradient is
    (grad * a) * sigma'(score). Leading batch axes are summed out.
    """
    g, a, s = as_tensor(grad_masked), as_tensor(activations), as_tensor(params)
    if g.shape != a.shape or g.shape[-1] != s.shape[-1]:
        raise ValueError(f"shape mismatch: grad {g.shape}, activations {a.shape}, params {s.shape}")
    sig = sigmoid(s)
    ga = g * a
    if ga.ndim > s.ndim:
        ga = ga.reshape(-1, s.shape[-1]).sum(axis=0)
    return ga * sig * (1.0 - sig)


def _check_prob_vector(m: np.ndarray, name: str) -> None:
    if np.any(~(m >= 0.0) | ~(m <= 1.0)):
        raise ValueError(f"{name} entries must lie in [0, 1]")


def siou_pair(mi, mj) -> float:
    """Soft intersection over union of two probability masks."""
    a, b = as_tensor(mi), as_tensor(mj)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise ValueError(f"siou_pair needs equal-length nonempty vectors, got {a.shape} and {b.shape}")
    _check_prob_vector(a, "first mask")
    _check_prob_vector(b, "second mask")
    inter = float(np.dot(a, b))
    union = float(np.sum(a + b - a * b))
    return inter / (union + SIOU_EPS)


def _siou_pair_grad(a: np.ndarray, b: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    inter = float(np.dot(a, b))
    union = float(np.sum(a + b - a * b)) + SIOU_EPS
    ga = (b * union - inter * (1.0 - b)) / union**2
    gb = (a * union - inter * (1.0 - a)) / union**2
    return inter / union, ga, gb


def siou_total(bank: MaskBank) -> Tuple[float, List[np.ndarray]]:
    """Sum of sIoU over masked layers and unordered domain pairs, with score gradients."""
    if bank.p < 2:
        raise ValueError("sIoU needs at least two source domains")
    total = 0.0
    grads = []
    for params in bank.params:
        probs = mask_probs(params)
        g_probs = np.zeros_like(probs)
        for i, j in itertools.combinations(range(bank.p), 2):
            s, gi, gj = _siou_pair_grad(probs[i], probs[j])
            total += s
            g_probs[i] += gi
            g_probs[j] += gj
        grads.append(g_probs * probs * (1.0 - probs))
    return total, grads


def l1_penalty(bank: MaskBank) -> Tuple[float, List[np.ndarray]]:
    """Sum of all mask probabilities (their L1 norm), with score gradients."""
    total = 0.0
    grads = []
    for params in bank.params:
        probs = mask_probs(params)
        total += float(probs.sum())
        grads.append(probs * (1.0 - probs))
    return total, grads


def discretize(probs, tau: float = 0.5) -> np.ndarray:
    return (as_tensor(probs) > tau).astype(np.int64)


def _check_binary(m: np.ndarray) -> None:
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("jaccard expects binary masks")


def jaccard(ma, mb) -> float:
    a, b = np.asarray(ma), np.asarray(mb)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    _check_binary(a)
    _check_binary(b)
    a, b = a.astype(bool), b.astype(bool)
    union = int(np.sum(a | b))
    if union == 0:
        return 0.0
    return int(np.sum(a & b)) / union


def neuron_categories(masks) -> Dict[str, int]:
    """Count neurons off for every domain, on for every domain, and the rest."""
    masks = [np.asarray(m) for m in masks]
    if not masks:
        raise ValueError("no masks given")
    if len({m.shape for m in masks}) != 1:
        raise ValueError(f"inconsistent mask lengths: {[m.shape for m in masks]}")
    for m in masks:
        _check_binary(m)
    stacked = np.stack(masks).astype(bool)
    useless = int(np.sum(~stacked.any(axis=0)))
    shared = int(np.sum(stacked.all(axis=0)))
    return {"useless": useless, "shared": shared, "specific": stacked.shape[1] - useless - shared}


def mean_soft_mask(bank: MaskBank) -> List[np.ndarray]:
    if bank.p < 1:
        raise ValueError("empty mask bank")
    return [mask_probs(p).mean(axis=0) for p in bank.params]
