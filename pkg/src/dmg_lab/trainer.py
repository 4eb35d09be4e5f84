"""Training loops for DMG and the Aggregate / Multi-Headed baselines."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import DomainSuite
from .masks import MaskBank, l1_penalty, siou_total
from .model import (Network, backward, build_network, domain_masks, forward,
                    predict_logits, predict_proba)
from .numeric import (AdamState, LrSchedule, adam_step, lr_at, softmax,
                      softmax_xent, spawn_rngs)

log = logging.getLogger(__name__)

METHODS = ("dmg", "aggregate", "multiheaded")
SAMPLING = ("per-instance", "per-domain-batch")

# Settings for small synthetic suites (a few hundred Adam steps instead of
# hundreds of thousands). Summing the class loss over the batch sets how strong
# lambda is relative to the data term, and the larger mask lr lets mask scores
# move as far as they would in a long run. Weight updates are unchanged.
DESK_PROFILE = {"lr0": 1e-4, "mask_lr_scale": 200.0, "class_reduction": "sum"}


@dataclass
class TrainConfig:
    method: str = "dmg"
    lambda_O: float = 0.1
    lambda_S: float = 0.0
    epochs: int = 50
    batch_size: int = 64
    lr_schedule: str = "inverse"
    lr0: float = 1e-4
    lr_rate: float = 0.99
    lr_gamma: float = 1e-4
    lr_power: float = 0.75
    mask_lr_scale: float = 1.0
    weight_decay: float = 0.0
    seed: int = 0
    mask_sampling: str = "per-instance"
    mask_init: str = "uniform"  # uniform | saturated
    final_init_std: float = 0.001
    hidden: Tuple[int, ...] = (256,)
    task_hidden: Tuple[int, ...] = (128, 64)
    balance_domains: bool = False
    ensemble_average: str = "probs"  # probs | logits, used for validation
    class_reduction: str = "mean"  # mean | sum over the minibatch

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.task_hidden = tuple(int(h) for h in self.task_hidden)
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.lambda_O < 0 or self.lambda_S < 0:
            raise ValueError("lambda_O and lambda_S must be nonnegative")
        if self.lambda_O > 0 and self.lambda_S > 0:
            raise ValueError("use either the overlap or the sparsity incentive, not both")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.mask_sampling not in SAMPLING:
            raise ValueError(f"mask_sampling must be one of {SAMPLING}")
        if self.mask_init not in ("uniform", "saturated"):
            raise ValueError("mask_init must be 'uniform' or 'saturated'")
        if self.ensemble_average not in ("probs", "logits"):
            raise ValueError("ensemble_average must be 'probs' or 'logits'")
        if self.class_reduction not in ("mean", "sum"):
            raise ValueError("class_reduction must be 'mean' or 'sum'")
        if self.mask_lr_scale <= 0:
            raise ValueError("mask_lr_scale must be positive")
        self.schedule()

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.lr_schedule, self.lr0, self.lr_rate, self.lr_gamma, self.lr_power)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["task_hidden"] = list(self.task_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class Checkpoint:
    net: Network
    bank: Optional[MaskBank]
    epoch: int
    val_acc: float
    config: dict
    config_hash: str
    suite_hash: str = ""


@dataclass
class TrainReport:
    loss_class: List[float] = field(default_factory=list)
    loss_penalty: List[float] = field(default_factory=list)
    val_acc: List[Dict[str, float]] = field(default_factory=list)
    val_mean: List[float] = field(default_factory=list)
    lr: List[float] = field(default_factory=list)
    selected_epoch: int = 0
    wall_time_s: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def loss_total(net: Network, bank: Optional[MaskBank], x, y, domain_idx, lambda_O: float = 0.0,
               lambda_S: float = 0.0, rng: Optional[np.random.Generator] = None,
               mask_mode: str = "sampled", per_instance: bool = True,
               head: Optional[np.ndarray] = None,
               class_reduction: str = "mean") -> Tuple[float, Dict[str, np.ndarray], Dict[str, float]]:
    """Batch-mean cross-entropy plus the weighted mask incentive, with all gradients.

    Mask-score gradients follow the straight-through rule: the forward pass
    uses ``mask_mode`` masks (hard samples in training), the score gradient
    uses the probability path. ``class_reduction='sum'`` sums the
    cross-entropy over the batch instead of averaging it.
    """
    domain_idx = np.asarray(domain_idx)
    if domain_idx.shape[0] == 0:
        raise ValueError("empty batch")
    if bank is not None:
        if domain_idx.min() < 0 or domain_idx.max() >= bank.p:
            raise KeyError(f"batch carries domain index outside [0, {bank.p})")
        masks = domain_masks(bank, domain_idx, mask_mode, rng, per_instance)
    else:
        masks = None
    logits, cache = forward(net, x, masks, head=head)
    cls_loss, g_logits = softmax_xent(logits, y)
    if class_reduction == "sum":
        cls_loss *= logits.shape[0]
        g_logits = g_logits * logits.shape[0]
    grads, mask_g = backward(net, cache, g_logits)
    parts = {"class": cls_loss, "siou": 0.0, "l1": 0.0}
    total = cls_loss
    if bank is not None:
        onehot = np.zeros((bank.p, domain_idx.shape[0]))
        onehot[domain_idx, np.arange(domain_idx.shape[0])] = 1.0
        for l, (params, g_rows) in enumerate(zip(bank.params, mask_g)):
            probs = bank.probs(l)
            grads[f"mask{l}"] = (onehot @ g_rows) * probs * (1.0 - probs)
        if lambda_O > 0:
            val, g = siou_total(bank)
            parts["siou"] = val
            total += lambda_O * val
            for l, gl in enumerate(g):
                grads[f"mask{l}"] = grads[f"mask{l}"] + lambda_O * gl
        if lambda_S > 0:
            val, g = l1_penalty(bank)
            parts["l1"] = val
            total += lambda_S * val
            for l, gl in enumerate(g):
                grads[f"mask{l}"] = grads[f"mask{l}"] + lambda_S * gl
    if not np.isfinite(total):
        bad = [k for k, v in parts.items() if not np.isfinite(v)]
        raise FloatingPointError(f"non-finite loss; offending component(s): {bad}")
    return total, grads, parts


def select_checkpoint(history: Sequence[float]) -> int:
    """1-based epoch with the highest mean validation accuracy; earliest wins ties."""
    if len(history) == 0:
        raise ValueError("empty validation history")
    return int(np.argmax(np.asarray(history, dtype=float))) + 1


def ensemble_proba(net: Network, bank: Optional[MaskBank], x, average: str = "probs") -> np.ndarray:
    """Mean prediction over every domain's soft mask (probabilities or logits)."""
    if bank is None:
        return predict_proba(net, x)
    outs = []
    for d in bank.domains:
        masks = bank.domain_probs(d)
        outs.append(predict_proba(net, x, masks) if average == "probs" else predict_logits(net, x, masks))
    mean = np.mean(outs, axis=0)
    return mean if average == "probs" else softmax(mean)


def accuracy(proba: np.ndarray, y) -> float:
    y = np.asarray(y)
    if y.size == 0:
        return float("nan")
    correct = int(np.sum(np.argmax(proba, axis=1) == y))
    return correct / y.size


def _pooled(suite: DomainSuite, split: str):
    Xs, ys, ds = [], [], []
    for i, d in enumerate(suite.sources):
        X, y = d.part(split)
        Xs.append(X)
        ys.append(y)
        ds.append(np.full(len(y), i, dtype=np.int64))
    return np.concatenate(Xs), np.concatenate(ys), np.concatenate(ds)


def _epoch_order(rng: np.random.Generator, dom: np.ndarray, balance: bool) -> np.ndarray:
    if not balance:
        return rng.permutation(dom.shape[0])
    groups = [np.flatnonzero(dom == i) for i in np.unique(dom)]
    n = max(len(g) for g in groups)
    rows = np.concatenate([rng.choice(g, size=n, replace=len(g) < n) if len(g) < n else g for g in groups])
    return rows[rng.permutation(rows.shape[0])]


def init_model(config: TrainConfig, suite: DomainSuite) -> Tuple[Network, Optional[MaskBank]]:
    init_rng, _, _, mask_init_rng = spawn_rngs(config.seed, 4)
    n_heads = len(suite.sources) if config.method == "multiheaded" else 1
    masked = None if config.method == "dmg" else []
    net = build_network(suite.dim, suite.C, init_rng, config.hidden, config.task_hidden,
                        masked_layers=masked, n_heads=n_heads, final_init_std=config.final_init_std)
    bank = None
    if config.method == "dmg":
        if config.mask_init == "saturated":
            bank = MaskBank.saturated(suite.source_ids, net.mask_specs())
        else:
            bank = MaskBank.init_uniform(suite.source_ids, net.mask_specs(), mask_init_rng)
    return net, bank


def validate(net: Network, bank: Optional[MaskBank], suite: DomainSuite, split: str = "val",
             average: str = "probs") -> Dict[str, float]:
    out = {}
    for d in suite.sources:
        X, y = d.part(split)
        out[d.domain_id] = accuracy(ensemble_proba(net, bank, X, average), y)
    return out


def train(config: TrainConfig, suite: DomainSuite, suite_hash: Optional[str] = None) -> Tuple[Checkpoint, TrainReport]:
    """Run ``config.epochs`` epochs and return the best checkpoint by in-domain validation accuracy."""
    start = time.perf_counter()
    if config.method in ("dmg", "multiheaded") and len(suite.sources) < 2:
        raise ValueError(f"{config.method} needs at least two source domains")
    if config.method == "aggregate" and len(suite.sources) < 1:
        raise ValueError("aggregate needs at least one source domain")
    X, y, dom = _pooled(suite, "train")
    if X.shape[0] == 0:
        raise ValueError("empty training split")
    _, shuffle_rng, mask_rng, _ = spawn_rngs(config.seed, 4)
    net, bank = init_model(config, suite)
    schedule = config.schedule()
    state = AdamState()
    per_instance = config.mask_sampling == "per-instance"
    report = TrainReport()
    best = None

    for epoch in range(1, config.epochs + 1):
        lr = lr_at(schedule, epoch)
        lrs = {k: lr for k in net.params}
        params = dict(net.params)
        if bank is not None:
            for k, v in bank.param_dict().items():
                params[k] = v
                lrs[k] = lr * config.mask_lr_scale
        order = _epoch_order(shuffle_rng, dom, config.balance_domains)
        sums = np.zeros(2)
        n_batches = 0
        for lo in range(0, order.shape[0], config.batch_size):
            rows = order[lo:lo + config.batch_size]
            head = dom[rows] if net.n_heads > 1 else None
            total, grads, parts = loss_total(net, bank, X[rows], y[rows], dom[rows], config.lambda_O,
                                             config.lambda_S, mask_rng, "sampled", per_instance, head,
                                             config.class_reduction)
            if config.weight_decay:
                for k in net.params:
                    grads[k] = grads[k] + config.weight_decay * net.params[k]
            adam_step(params, grads, state, lrs)
            sums += (parts["class"], parts["siou"] + parts["l1"])
            n_batches += 1
        report.loss_class.append(float(sums[0] / n_batches))
        report.loss_penalty.append(float(sums[1] / n_batches))
        report.lr.append(lr)
        val = validate(net, bank, suite, "val", config.ensemble_average)
        mean_val = float(np.mean(list(val.values())))
        report.val_acc.append(val)
        report.val_mean.append(mean_val)
        log.debug("epoch %d: class %.4f penalty %.4f val %.4f", epoch, report.loss_class[-1],
                  report.loss_penalty[-1], mean_val)
        if best is None or mean_val > best[0]:
            best = (mean_val, epoch, net.copy(), bank.copy() if bank is not None else None)

    report.selected_epoch = select_checkpoint(report.val_mean)
    assert report.selected_epoch == best[1]
    report.wall_time_s = time.perf_counter() - start
    ckpt = Checkpoint(best[2], best[3], best[1], best[0], config.to_dict(), config.hash(),
                      suite_hash if suite_hash is not None else suite.fingerprint())
    return ckpt, report
