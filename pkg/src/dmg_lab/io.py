"""Checkpoint files, report JSON and their schemas."""

from __future__ import annotations

import json
import os
from typing import Any, Dict

import jsonschema
import numpy as np

from .masks import LayerMaskSpec, MaskBank
from .model import Network
from .trainer import Checkpoint

CHECKPOINT_VERSION = 1
SCHEMA_VERSION = 1


class IncompatibleCheckpoint(ValueError):
    pass


def _tensor(a: np.ndarray) -> dict:
    # repr of a Python float round-trips exactly; +inf marks saturated mask scores
    return {"shape": list(a.shape), "data": [float(v) for v in np.asarray(a, dtype=np.float64).ravel()]}


def _untensor(d: dict) -> np.ndarray:
    return np.array(d["data"], dtype=np.float64).reshape(d["shape"])


def checkpoint_to_dict(ckpt: Checkpoint) -> dict:
    out: Dict[str, Any] = {
        "format": "dmg-lab-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config_hash": ckpt.config_hash,
        "suite_hash": ckpt.suite_hash,
        "config": ckpt.config,
        "epoch": ckpt.epoch,
        "val_acc": ckpt.val_acc,
        "network": ckpt.net.structure(),
        "params": {k: _tensor(v) for k, v in sorted(ckpt.net.params.items())},
        "mask_bank": None,
    }
    if ckpt.bank is not None:
        out["mask_bank"] = {
            "domains": ckpt.bank.domains,
            "specs": [{"layer_index": s.layer_index, "k": s.k} for s in ckpt.bank.specs],
            "params": [_tensor(p) for p in ckpt.bank.params],
        }
    return out


def checkpoint_from_dict(d: dict) -> Checkpoint:
    if d.get("format") != "dmg-lab-checkpoint":
        raise IncompatibleCheckpoint("not a dmg-lab checkpoint")
    if d.get("version") != CHECKPOINT_VERSION:
        raise IncompatibleCheckpoint(f"unsupported checkpoint version {d.get('version')}")
    s = d["network"]
    net = Network(s["feature_sizes"], s["task_sizes"], s["masked_layers"], s["n_heads"],
                  {k: _untensor(v) for k, v in d["params"].items()})
    bank = None
    if d.get("mask_bank"):
        mb = d["mask_bank"]
        bank = MaskBank(mb["domains"], [LayerMaskSpec(x["layer_index"], x["k"]) for x in mb["specs"]],
                        [_untensor(p) for p in mb["params"]])
    return Checkpoint(net, bank, d["epoch"], d["val_acc"], d["config"], d["config_hash"], d.get("suite_hash", ""))


def write_json(path, obj) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    write_json(path, checkpoint_to_dict(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_dict(read_json(path))


def check_compatible(ckpt: Checkpoint, suite_hash: str) -> None:
    if ckpt.suite_hash and ckpt.suite_hash != suite_hash:
        raise IncompatibleCheckpoint(
            f"checkpoint was trained on dataset {ckpt.suite_hash[:12]}..., "
            f"but the given dataset hashes to {suite_hash[:12]}...; refusing to evaluate"
        )


_acc = {"type": ["number", "null"], "minimum": 0, "maximum": 1}

EVAL_REPORT_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "config", "seed", "per_domain", "wall_time_s"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "config": {"type": "object"},
        "seed": {"type": ["integer", "null"]},
        "per_domain": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["per_mode"],
                "properties": {
                    "in_acc": _acc,
                    "out_acc": _acc,
                    "per_mode": {"type": "object", "additionalProperties": _acc},
                },
            },
        },
        "iou": {
            "type": "object",
            "required": ["per_layer", "overall"],
            "properties": {
                "per_layer": {"type": "array"},
                "overall": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
        "categories": {"type": "object"},
        "specialization_matrix": {"type": "object"},
        "wall_time_s": {"type": "number", "minimum": 0},
    },
}

TRAIN_REPORT_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "config", "seed", "loss_class", "loss_penalty", "val_mean",
                 "selected_epoch", "wall_time_s"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "config": {"type": "object"},
        "loss_class": {"type": "array", "items": {"type": "number"}},
        "loss_penalty": {"type": "array", "items": {"type": "number"}},
        "val_mean": {"type": "array", "items": _acc},
        "selected_epoch": {"type": "integer", "minimum": 1},
        "wall_time_s": {"type": "number", "minimum": 0},
    },
}

SWEEP_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "config", "seed", "parameter", "rows", "wall_time_s"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "parameter": {"enum": ["lambda_O", "lambda_S"]},
        "rows": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["value", "ok"],
                "properties": {
                    "value": {"type": "number"},
                    "ok": {"type": "boolean"},
                    "in_acc": _acc,
                    "out_acc": _acc,
                    "mean_iou": {"type": ["number", "null"]},
                },
            },
        },
        "wall_time_s": {"type": "number", "minimum": 0},
    },
}

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "C", "dim", "seed", "domains"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "domains": {
            "type": "array",
            "items": {"type": "object", "required": ["id", "role", "file", "counts"]},
        },
    },
}

SCHEMAS = {"eval": EVAL_REPORT_SCHEMA, "train": TRAIN_REPORT_SCHEMA, "sweep": SWEEP_SCHEMA,
           "manifest": MANIFEST_SCHEMA}


def validate_report(obj: dict, kind: str) -> None:
    jsonschema.validate(obj, SCHEMAS[kind])
