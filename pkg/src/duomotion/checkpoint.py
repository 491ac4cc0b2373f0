"""Network checkpoint container: named parameter arrays + run metadata.

One JSON document per checkpoint: schema version, network kind, config
snapshot, RNG seed, epoch, loss curve, config hash, and every parameter as a
base64 float64 blob.  Writing is byte-stable given identical inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fileio import (check_schema, decode_array, encode_array, read_json,
                     write_json)
from .optim import ParameterStore

CHECKPOINT_SCHEMA_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class NetworkCheckpoint:
    kind: str                      # "infiller" | "geometry"
    config: dict
    seed: int
    epoch: int
    loss_curve: list
    values: dict                   # name -> np.ndarray
    config_hash: str = ""

    @classmethod
    def from_store(cls, kind: str, store: ParameterStore, config: dict,
                   seed: int, epoch: int, loss_curve, config_hash: str = ""):
        return cls(kind=kind, config=dict(config), seed=seed, epoch=epoch,
                   loss_curve=[float(v) for v in loss_curve],
                   values=store.copy_values(), config_hash=config_hash)


def write_checkpoint(path, ckpt: NetworkCheckpoint) -> None:
    doc = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "kind": ckpt.kind,
        "config": ckpt.config,
        "seed": ckpt.seed,
        "epoch": ckpt.epoch,
        "loss_curve": ckpt.loss_curve,
        "config_hash": ckpt.config_hash,
        "params": {name: encode_array(arr)
                   for name, arr in sorted(ckpt.values.items())},
    }
    write_json(path, doc)


def read_checkpoint(path) -> NetworkCheckpoint:
    doc = read_json(path)
    check_schema(doc, CHECKPOINT_SCHEMA_VERSION, "checkpoint")
    return NetworkCheckpoint(
        kind=doc["kind"], config=doc["config"], seed=doc["seed"],
        epoch=doc["epoch"], loss_curve=doc["loss_curve"],
        values={name: decode_array(d) for name, d in doc["params"].items()},
        config_hash=doc["config_hash"],
    )


def load_into_store(ckpt: NetworkCheckpoint, store: ParameterStore) -> None:
    missing = set(store.names()) - set(ckpt.values)
    extra = set(ckpt.values) - set(store.names())
    if missing or extra:
        raise CheckpointError(
            f"checkpoint incompatible with model: missing={sorted(missing)[:3]}, "
            f"extra={sorted(extra)[:3]}")
    store.load_values(ckpt.values)
