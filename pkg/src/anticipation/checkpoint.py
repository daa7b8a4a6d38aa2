"""Self-describing, byte-deterministic checkpoint container.

Layout: an 8-byte magic string, a u32 header length, a JSON header (sorted
keys) describing the schema version, model kind, configs, training step, and
every tensor's name/shape/dtype, then the raw little-endian tensor blobs in
header order. Writing the same state twice produces identical bytes, so
checkpoint hashes are meaningful.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

CHECKPOINT_MAGIC = b"ANTCKPT1"
SCHEMA_VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


@dataclass
class Checkpoint:
    """A loaded checkpoint: metadata plus named parameter arrays."""

    model_kind: str  # "anticipation" or "vnrm"
    input_mode: str  # "observed", "student", or "full"
    configs: dict
    step: int
    tensors: dict[str, np.ndarray]
    schema_version: int = SCHEMA_VERSION

    def state_dict(self) -> dict[str, torch.Tensor]:
        return {name: torch.from_numpy(arr.copy()) for name, arr in self.tensors.items()}


def save_checkpoint(
    path: str | Path,
    model: torch.nn.Module,
    model_kind: str,
    input_mode: str,
    configs: dict,
    step: int,
) -> None:
    names = sorted(model.state_dict().keys())
    state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    entries = []
    for name in names:
        arr = state[name]
        if str(arr.dtype) not in _DTYPES:
            raise ValueError(f"unsupported tensor dtype {arr.dtype} for {name}")
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)}
        )
    header = {
        "schema_version": SCHEMA_VERSION,
        "model_kind": model_kind,
        "input_mode": input_mode,
        "configs": configs,
        "step": step,
        "tensors": entries,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with Path(path).open("wb") as handle:
        handle.write(CHECKPOINT_MAGIC)
        handle.write(struct.pack("<I", len(blob)))
        handle.write(blob)
        for name in names:
            arr = np.ascontiguousarray(state[name]).astype(_DTYPES[str(state[name].dtype)])
            handle.write(arr.tobytes(order="C"))


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (header_len,) = struct.unpack_from("<I", raw, len(CHECKPOINT_MAGIC))
    offset = len(CHECKPOINT_MAGIC) + 4
    header = json.loads(raw[offset : offset + header_len].decode())
    if header.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(
            f"{path}: unsupported checkpoint schema {header.get('schema_version')}"
        )
    offset += header_len
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        dtype = _DTYPES[entry["dtype"]]
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * np.dtype(dtype).itemsize
        tensors[entry["name"]] = (
            np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
            .reshape(shape)
            .copy()
        )
        offset += nbytes
    return Checkpoint(
        model_kind=header["model_kind"],
        input_mode=header["input_mode"],
        configs=header["configs"],
        step=header["step"],
        tensors=tensors,
    )


def checkpoint_hash(path: str | Path) -> str:
    """SHA-256 of the checkpoint bytes; identifies a teacher in cache headers."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_model_checkpoint(
    path: str | Path,
    trained,
    model_config,
    step: int,
    vnrm_config=None,
    which: str = "best",
) -> None:
    """Persist a pipelines.TrainedModel (best or final state)."""
    from dataclasses import asdict

    state = trained.result.best_state if which == "best" else trained.result.final_state
    trained.model.load_state_dict(state)
    configs = {"model": asdict(model_config)}
    if vnrm_config is not None:
        configs["vnrm"] = asdict(vnrm_config)
    save_checkpoint(
        path,
        trained.model,
        model_kind=trained.model_kind,
        input_mode=trained.input_mode,
        configs=configs,
        step=step,
    )


def model_from_checkpoint(ckpt: Checkpoint) -> torch.nn.Module:
    """Rebuild the saved model and load its parameters."""
    from .distill import DistillConfig
    from .model import AnticipationModel, ModelConfig
    from .vnrm import VerbNounRelationModel, VnrmConfig

    model_doc = dict(ckpt.configs["model"])
    model_config = ModelConfig(**model_doc)
    if ckpt.model_kind == "anticipation":
        model = AnticipationModel(model_config)
    elif ckpt.model_kind == "vnrm":
        vnrm_doc = dict(ckpt.configs["vnrm"])
        vnrm_doc["distill"] = DistillConfig(**vnrm_doc.get("distill", {}))
        model = VerbNounRelationModel(model_config, VnrmConfig(**vnrm_doc))
    else:
        raise ValueError(f"unknown model kind {ckpt.model_kind!r}")
    model.load_state_dict(ckpt.state_dict())
    model.eval()
    return model


def load_model(path: str | Path) -> tuple[torch.nn.Module, Checkpoint]:
    ckpt = load_checkpoint(path)
    return model_from_checkpoint(ckpt), ckpt
