"""Inference modes, specialization tables, mask-overlap reports and lambda sweeps."""

from __future__ import annotations

import itertools
import logging
from dataclasses import replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .data import DomainSuite
from .masks import MaskBank, discretize, jaccard, mean_soft_mask, neuron_categories
from .model import Network, predict_logits, predict_proba
from .numeric import softmax
from .trainer import Checkpoint, TrainConfig, accuracy, train

log = logging.getLogger(__name__)

MODES = ("pred-ens", "mask-ens", "kd")
SCHEMA_VERSION = 1
DEFAULT_LAMBDAS = (0.0, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0)


def _need_bank(bank: Optional[MaskBank]) -> MaskBank:
    if bank is None or bank.p == 0:
        raise ValueError("this inference mode needs a trained, nonempty mask bank")
    return bank


def predict_pred_ens(net: Network, bank: MaskBank, x, average: str = "probs") -> np.ndarray:
    """Average of the predictions made under each source domain's soft mask.

    ``average='logits'`` averages pre-softmax outputs instead and returns the
    softmax of that mean.
    """
    bank = _need_bank(bank)
    if average == "probs":
        return np.mean([predict_proba(net, x, bank.domain_probs(d)) for d in bank.domains], axis=0)
    if average == "logits":
        return softmax(np.mean([predict_logits(net, x, bank.domain_probs(d)) for d in bank.domains], axis=0))
    raise ValueError(f"unknown averaging {average!r}")


def predict_mask_ens(net: Network, bank: MaskBank, x) -> np.ndarray:
    """One prediction with the domain-averaged soft mask."""
    return predict_proba(net, x, mean_soft_mask(_need_bank(bank)))


def predict_kd(net: Network, bank: MaskBank, x, domain: str) -> np.ndarray:
    """Prediction with the soft mask of a known domain."""
    return predict_proba(net, x, _need_bank(bank).domain_probs(domain))


def predict(net: Network, bank: Optional[MaskBank], x, mode: str, domain: Optional[str] = None,
            average: str = "probs") -> np.ndarray:
    if bank is None:
        # baselines have no masks: every mode is the plain prediction
        return predict_proba(net, x)
    if mode == "pred-ens":
        return predict_pred_ens(net, bank, x, average)
    if mode == "mask-ens":
        return predict_mask_ens(net, bank, x)
    if mode == "kd":
        if domain is None:
            raise ValueError("kd mode needs a domain id")
        return predict_kd(net, bank, x, domain)
    raise ValueError(f"unknown inference mode {mode!r}; choose from {MODES}")


def specialization_table(net: Network, bank: MaskBank, suite: DomainSuite, split: str = "test",
                         average: str = "probs") -> Dict[str, object]:
    """Accuracy on every domain (columns) under every source mask (rows), plus a pred-ens row."""
    bank = _need_bank(bank)
    cols = suite.source_ids + suite.target_ids
    matrix = np.zeros((bank.p, len(cols)))
    for i, d in enumerate(bank.domains):
        masks = bank.domain_probs(d)
        for j, c in enumerate(cols):
            X, y = suite.get(c).part(split)
            matrix[i, j] = accuracy(predict_proba(net, X, masks), y)
    combined = []
    for c in cols:
        X, y = suite.get(c).part(split)
        combined.append(accuracy(predict_pred_ens(net, bank, X, average), y))
    return {"rows": list(bank.domains), "columns": cols, "matrix": matrix.tolist(), "combined": combined}


def specialization_gap(table: Dict[str, object]) -> float:
    """Mean over source columns of matched-mask accuracy minus best mismatched-mask accuracy."""
    m = np.asarray(table["matrix"])
    rows = table["rows"]
    gaps = []
    for j, c in enumerate(table["columns"]):
        if c not in rows:
            continue
        i = rows.index(c)
        others = [m[r, j] for r in range(len(rows)) if r != i]
        if others:
            gaps.append(m[i, j] - max(others))
    return float(np.mean(gaps)) if gaps else float("nan")


def iou_report(bank: MaskBank, tau: float = 0.5) -> Dict[str, object]:
    """Pairwise Jaccard of discretized masks, on-fractions and neuron categories per layer."""
    layers = []
    all_pairs = []
    for l, spec in enumerate(bank.specs):
        binary = discretize(bank.probs(l), tau)
        mat = np.eye(bank.p)
        pairs = []
        for i, j in itertools.combinations(range(bank.p), 2):
            v = jaccard(binary[i], binary[j])
            mat[i, j] = mat[j, i] = v
            pairs.append(v)
        all_pairs.extend(pairs)
        layers.append({
            "layer_index": spec.layer_index,
            "k": spec.k,
            "matrix": mat.tolist(),
            "mean": float(np.mean(pairs)) if pairs else 1.0,
            "on_fraction": {d: float(binary[i].mean()) for i, d in enumerate(bank.domains)},
            "categories": neuron_categories(list(binary)),
        })
    on = float(np.mean([discretize(bank.probs(l), tau).mean() for l in range(len(bank.specs))]))
    return {
        "domains": list(bank.domains),
        "tau": tau,
        "per_layer": layers,
        "overall": float(np.mean(all_pairs)) if all_pairs else 1.0,
        "on_fraction": on,
    }


def _domain_acc(net, bank, suite, domain_id, mode, split="test", kd_domain=None, average="probs"):
    X, y = suite.get(domain_id).part(split)
    return accuracy(predict(net, bank, X, mode, kd_domain, average), y)


def evaluate(ckpt: Checkpoint, suite: DomainSuite, modes: Sequence[str] = ("pred-ens",), tau: float = 0.5,
             average: str = "probs", specialization: bool = True) -> Dict[str, object]:
    """EvalReport dict: per-domain accuracies per mode, IoU statistics and categories."""
    for m in modes:
        if m not in MODES:
            raise ValueError(f"unknown inference mode {m!r}; choose from {MODES}")
    net, bank = ckpt.net, ckpt.bank
    primary = modes[0] if modes else "pred-ens"
    per_domain: Dict[str, dict] = {}
    for d in suite.source_ids:
        per_mode = {}
        for m in modes:
            # kd on a source domain uses that domain's own mask
            per_mode[m] = _domain_acc(net, bank, suite, d, m, kd_domain=d, average=average)
        per_domain[d] = {"in_acc": per_mode.get(primary), "per_mode": per_mode}
    for d in suite.target_ids:
        # the target's domain is unknown, so kd is undefined there
        per_mode = {m: _domain_acc(net, bank, suite, d, m, average=average) for m in modes if m != "kd"}
        per_domain[d] = {"out_acc": per_mode.get(primary if primary != "kd" else "pred-ens"),
                         "per_mode": per_mode}
    ins = [v["in_acc"] for k, v in per_domain.items() if k in suite.source_ids]
    outs = [v["out_acc"] for k, v in per_domain.items() if k in suite.target_ids and v["out_acc"] is not None]
    report: Dict[str, object] = {
        "schema_version": SCHEMA_VERSION,
        "config": ckpt.config,
        "seed": ckpt.config.get("seed"),
        "checkpoint": {"config_hash": ckpt.config_hash, "suite_hash": ckpt.suite_hash, "epoch": ckpt.epoch},
        "modes": list(modes),
        "per_domain": per_domain,
        "mean_in_acc": float(np.mean(ins)) if ins else None,
        "mean_out_acc": float(np.mean(outs)) if outs else None,
    }
    if bank is not None:
        iou = iou_report(bank, tau)
        report["iou"] = {"per_layer": iou["per_layer"], "overall": iou["overall"], "on_fraction": iou["on_fraction"]}
        report["categories"] = {str(layer["layer_index"]): layer["categories"] for layer in iou["per_layer"]}
        if specialization:
            table = specialization_table(net, bank, suite, average=average)
            table["gap"] = specialization_gap(table)
            report["specialization_matrix"] = table
        if "mask-ens" in modes and "pred-ens" in modes:
            diffs = [abs(v["per_mode"]["pred-ens"] - v["per_mode"]["mask-ens"]) for v in per_domain.values()]
            report["ens_gap"] = float(np.mean(diffs))
    return report


def lambda_sweep(base: TrainConfig, values: Sequence[float], suite: DomainSuite, parameter: str = "lambda_O",
                 modes: Sequence[str] = ("pred-ens",), tau: float = 0.5,
                 runner: Optional[Callable] = None) -> List[Dict[str, object]]:
    """Train and evaluate once per value; failures are recorded and the sweep continues."""
    if parameter not in ("lambda_O", "lambda_S"):
        raise ValueError(f"can only sweep lambda_O or lambda_S, not {parameter!r}")
    if len(values) == 0:
        raise ValueError("empty sweep value list")
    run = runner or sweep_point
    return [run(base, parameter, float(v), suite, tuple(modes), tau) for v in values]


def sweep_point(base: TrainConfig, parameter: str, value: float, suite: DomainSuite,
                modes: Sequence[str] = ("pred-ens",), tau: float = 0.5) -> Dict[str, object]:
    row: Dict[str, object] = {"parameter": parameter, "value": value}
    try:
        other = "lambda_S" if parameter == "lambda_O" else "lambda_O"
        cfg = replace(base, **{parameter: value, other: 0.0})
        ckpt, rep = train(cfg, suite)
        ev = evaluate(ckpt, suite, modes, tau, specialization=False)
        row.update({
            "ok": True,
            "in_acc": ev["mean_in_acc"],
            "out_acc": ev["mean_out_acc"],
            "mean_iou": ev["iou"]["overall"] if "iou" in ev else None,
            "on_fraction": ev["iou"]["on_fraction"] if "iou" in ev else None,
            "selected_epoch": rep.selected_epoch,
        })
    except Exception as exc:  # one failed run must not abort the sweep
        log.warning("sweep point %s=%g failed: %s", parameter, value, exc)
        row.update({"ok": False, "error": f"{type(exc).__name__}: {exc}"})
    return row
