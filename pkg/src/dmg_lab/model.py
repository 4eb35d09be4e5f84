"""MLP backbone: an unmasked feature extractor followed by a masked task network."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .masks import LayerMaskSpec, MaskBank, sample_masks
from .numeric import (as_tensor, dense_backward, dense_forward, relu,
                      relu_backward, softmax)


@dataclass
class Network:
    """Dense ReLU network ``task(features(x))``.

    ``feature_sizes`` runs from the input width to the feature width;
    ``task_sizes`` from the feature width to the class count. Masks attach to
    the inputs of the task layers listed in ``masked_layers``. With
    ``n_heads > 1`` the final task layer is replicated once per head.
    """

    feature_sizes: List[int]
    task_sizes: List[int]
    masked_layers: List[int]
    n_heads: int = 1
    params: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n_task(self) -> int:
        return len(self.task_sizes) - 1

    @property
    def C(self) -> int:
        return self.task_sizes[-1]

    def mask_specs(self) -> List[LayerMaskSpec]:
        return [LayerMaskSpec(l, self.task_sizes[l]) for l in self.masked_layers]

    def weight_name(self, stage: str, i: int, head: int = 0) -> Tuple[str, str]:
        if stage == "T" and i == self.n_task - 1 and self.n_heads > 1:
            return f"T{i}.h{head}.W", f"T{i}.h{head}.b"
        return f"{stage}{i}.W", f"{stage}{i}.b"

    def structure(self) -> dict:
        return {"feature_sizes": list(self.feature_sizes), "task_sizes": list(self.task_sizes),
                "masked_layers": list(self.masked_layers), "n_heads": self.n_heads}

    def copy(self) -> "Network":
        return Network(list(self.feature_sizes), list(self.task_sizes), list(self.masked_layers),
                       self.n_heads, {k: v.copy() for k, v in self.params.items()})


def build_network(in_dim: int, C: int, rng: np.random.Generator, hidden: Sequence[int] = (256,),
                  task_hidden: Sequence[int] = (128, 64), masked_layers: Optional[Sequence[int]] = None,
                  n_heads: int = 1, final_init_std: float = 0.001) -> Network:
    """Hidden layers get He-uniform weights; the final layer N(0, final_init_std)."""
    feature_sizes = [in_dim] + list(hidden)
    task_sizes = [feature_sizes[-1]] + list(task_hidden) + [C]
    n_task = len(task_sizes) - 1
    if masked_layers is None:
        masked_layers = list(range(n_task))
    if any(l < 0 or l >= n_task for l in masked_layers):
        raise ValueError(f"masked layer indices must lie in [0, {n_task})")
    net = Network(feature_sizes, task_sizes, sorted(masked_layers), n_heads)

    def hidden_layer(fan_in, fan_out):
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)

    for i in range(len(feature_sizes) - 1):
        net.params["F%d.W" % i], net.params["F%d.b" % i] = hidden_layer(feature_sizes[i], feature_sizes[i + 1])
    for i in range(n_task - 1):
        net.params["T%d.W" % i], net.params["T%d.b" % i] = hidden_layer(task_sizes[i], task_sizes[i + 1])
    last = n_task - 1
    for h in range(n_heads):
        wn, bn = net.weight_name("T", last, h)
        net.params[wn] = rng.normal(0.0, final_init_std, size=(task_sizes[last], C))
        net.params[bn] = np.zeros(C)
    return net


def forward(net: Network, x, masks: Optional[Sequence] = None,
            head: Optional[np.ndarray] = None) -> Tuple[np.ndarray, dict]:
    """Logits plus the cache needed by :func:`backward`.

    ``masks`` aligns with ``net.masked_layers``; each entry is ``None``, a
    width-``k`` vector shared by all rows, or a ``(batch, k)`` matrix.
    ``head`` gives a per-row head index (required when ``n_heads > 1``).
    """
    h = as_tensor(x)
    cache = {"F_in": [], "F_pre": [], "T_in": [], "T_masked": [], "T_pre": [], "masks": []}
    for i in range(len(net.feature_sizes) - 1):
        cache["F_in"].append(h)
        z = dense_forward(h, net.params["F%d.W" % i], net.params["F%d.b" % i])
        cache["F_pre"].append(z)
        h = relu(z)
    if masks is None:
        masks = [None] * len(net.masked_layers)
    if len(masks) != len(net.masked_layers):
        raise ValueError(f"expected {len(net.masked_layers)} masks, got {len(masks)}")
    mask_at = dict(zip(net.masked_layers, masks))
    if net.n_heads > 1:
        if head is None:
            raise ValueError("multi-head network needs a head index per row")
        head = np.broadcast_to(np.asarray(head), (h.shape[0],))
    last = net.n_task - 1
    for i in range(net.n_task):
        cache["T_in"].append(h)
        m = mask_at.get(i)
        if m is not None:
            m = as_tensor(m)
            if m.shape[-1] != h.shape[1]:
                raise ValueError(f"mask width {m.shape[-1]} != activation width {h.shape[1]} at task layer {i}")
            h = h * m
        cache["masks"].append(m)
        cache["T_masked"].append(h)
        if i == last and net.n_heads > 1:
            z = np.empty((h.shape[0], net.C))
            for k in range(net.n_heads):
                rows = head == k
                wn, bn = net.weight_name("T", i, k)
                z[rows] = dense_forward(h[rows], net.params[wn], net.params[bn])
        else:
            z = dense_forward(h, net.params["T%d.W" % i], net.params["T%d.b" % i])
        cache["T_pre"].append(z)
        h = relu(z) if i < last else z
    cache["head"] = head
    return h, cache


def backward(net: Network, cache: dict, grad_logits) -> Tuple[Dict[str, np.ndarray], List[np.ndarray]]:
    """Parameter gradients, plus d(loss)/d(mask) per masked layer and row.

    The returned mask gradients are ``grad_masked * activation`` (batch x k),
    i.e. the gradient wrt the mask value itself; activation gradients flow
    through whatever mask was used in the forward pass.
    """
    grads: Dict[str, np.ndarray] = {}
    g = as_tensor(grad_logits)
    mask_grads: Dict[int, np.ndarray] = {}
    last = net.n_task - 1
    for i in reversed(range(net.n_task)):
        if i < last:
            g = relu_backward(g, cache["T_pre"][i])
        xin = cache["T_masked"][i]
        if i == last and net.n_heads > 1:
            head = cache["head"]
            gx = np.zeros_like(xin)
            for k in range(net.n_heads):
                rows = head == k
                wn, bn = net.weight_name("T", i, k)
                gx[rows], grads[wn], grads[bn] = dense_backward(g[rows], xin[rows], net.params[wn])
        else:
            gx, grads["T%d.W" % i], grads["T%d.b" % i] = dense_backward(g, xin, net.params["T%d.W" % i])
        m = cache["masks"][i]
        if m is not None:
            mask_grads[i] = gx * cache["T_in"][i]
            gx = gx * m
        g = gx
    for i in reversed(range(len(net.feature_sizes) - 1)):
        g = relu_backward(g, cache["F_pre"][i])
        g, grads["F%d.W" % i], grads["F%d.b" % i] = dense_backward(g, cache["F_in"][i], net.params["F%d.W" % i])
    return grads, [mask_grads.get(l) for l in net.masked_layers]


def domain_masks(bank: MaskBank, domain_idx: np.ndarray, mode: str,
                 rng: Optional[np.random.Generator] = None, per_instance: bool = True) -> List[np.ndarray]:
    """Per-row masks for rows tagged with bank domain indices."""
    domain_idx = np.asarray(domain_idx)
    if mode == "sampled":
        if rng is None:
            raise ValueError("sampled masks need an rng")
        return sample_masks(bank, domain_idx, rng, per_instance=per_instance)
    if mode == "soft":
        return [bank.probs(l)[domain_idx] for l in range(len(bank.specs))]
    raise ValueError(f"unknown mask mode {mode!r}")


def forward_masked(net: Network, bank: Optional[MaskBank], x, domain: Optional[str] = None,
                   rng: Optional[np.random.Generator] = None, mode: str = "soft",
                   masks: Optional[Sequence] = None, head=None) -> np.ndarray:
    """Logits of ``x`` under one domain's masks.

    mode ``sampled`` draws a hard mask per row, ``soft`` scales by the
    domain's probabilities, ``given`` uses ``masks`` as supplied.
    """
    x = as_tensor(x)
    if mode == "given":
        if masks is None:
            raise ValueError("mode 'given' requires explicit masks")
        use = list(masks)
    else:
        if bank is None:
            raise ValueError(f"mode {mode!r} needs a mask bank")
        idx = np.full(x.shape[0], bank.index(domain))
        use = domain_masks(bank, idx, mode, rng)
    logits, _ = forward(net, x, use, head=head)
    return logits


def predict_proba(net: Network, x, masks: Optional[Sequence] = None) -> np.ndarray:
    """Class probabilities; multi-head networks average their heads' softmax outputs."""
    x = as_tensor(x)
    if net.n_heads == 1:
        return softmax(forward(net, x, masks)[0])
    probs = [softmax(forward(net, x, masks, head=np.full(x.shape[0], k))[0]) for k in range(net.n_heads)]
    return np.mean(probs, axis=0)


def predict_logits(net: Network, x, masks: Optional[Sequence] = None) -> np.ndarray:
    x = as_tensor(x)
    if net.n_heads == 1:
        return forward(net, x, masks)[0]
    return np.mean([forward(net, x, masks, head=np.full(x.shape[0], k))[0]
                    for k in range(net.n_heads)], axis=0)
