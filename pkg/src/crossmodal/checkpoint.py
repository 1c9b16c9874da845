"""Self-describing checkpoint container.

Layout: an 8-byte magic, a little-endian uint32 format version, a
little-endian uint64 header length, a JSON header and then the raw
little-endian float64 payloads in header order (parameters sorted by key,
then buffers sorted by key). The header embeds the full model config, so a
checkpoint is loadable without outside context, and serialization is fully
deterministic: save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .config import ModelConfig
from .errors import CheckpointError
from .model import ModelWeights

MAGIC = b"CMCKPT\x00\x00"
VERSION = 1

# Fields that must agree between a checkpoint and the requested config for
# the stored encoder weights to be usable. Training-time knobs
# (mask_fraction, dropout) may differ, and so may vocab_size: the
# vocabulary head is rebuilt or discarded anyway and text enters the model
# as embedding vectors, not ids.
ARCHITECTURE_FIELDS = (
    "model_dim",
    "encoder_layers",
    "attention_heads",
    "feedforward_dim",
    "audio_input_dim",
    "visual_input_dim",
    "text_embedding_dim",
    "fusion_weights",
    "num_emotions",
    "layer_norm_eps",
    "max_positions",
    "residual_source",
)


def save_checkpoint(path, weights: ModelWeights, config: ModelConfig) -> None:
    entries = [["param", k, list(weights.params[k].shape)] for k in sorted(weights.params)]
    entries += [["buffer", k, list(weights.buffers[k].shape)] for k in sorted(weights.buffers)]
    header = json.dumps(
        {"version": VERSION, "config": config.to_dict(), "entries": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for kind, key, _ in entries:
            source = weights.params if kind == "param" else weights.buffers
            f.write(np.ascontiguousarray(source[key], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelWeights, ModelConfig]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    offset = len(MAGIC)
    (version,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (header_len,) = struct.unpack_from("<Q", blob, offset)
    offset += 8
    try:
        header = json.loads(blob[offset : offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}")
    offset += header_len
    config = ModelConfig.from_dict(header["config"])
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    for kind, key, shape in header["entries"]:
        size = int(np.prod(shape)) if shape else 1
        nbytes = size * 8
        if offset + nbytes > len(blob):
            raise CheckpointError(f"{path}: payload truncated at entry {key!r}")
        arr = (
            np.frombuffer(blob[offset : offset + nbytes], dtype="<f8")
            .reshape(shape)
            .astype(np.float64)
        )
        offset += nbytes
        (params if kind == "param" else buffers)[key] = arr
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return ModelWeights(params=params, buffers=buffers), config


def check_architecture_match(ckpt_config: ModelConfig, config: ModelConfig) -> None:
    """Raise naming every architecture field on which the two configs differ."""
    diffs = [
        f
        for f in ARCHITECTURE_FIELDS
        if getattr(ckpt_config, f) != getattr(config, f)
    ]
    if diffs:
        details = ", ".join(
            f"{f}: checkpoint={getattr(ckpt_config, f)!r} requested={getattr(config, f)!r}"
            for f in diffs
        )
        raise CheckpointError(f"checkpoint/config mismatch in fields: {details}")
