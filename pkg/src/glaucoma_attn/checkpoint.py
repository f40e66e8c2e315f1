"""Versioned, byte-deterministic checkpoint container.

Layout::

    b"GLAUCKPT" | u32 format version | u64 header length | JSON header | tensor payload

The header records the training config, its hash, the model architecture,
an index of raw little-endian tensors and the SHA-256 of the payload.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig, config_hash
from .errors import CheckpointError
from .model import BackboneSpec, ClassifierModel, build_model

MAGIC = b"GLAUCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def _model_meta(model: ClassifierModel) -> dict:
    return {
        "backbone": model.backbone_name,
        "channels": model.channels,
        "reduction": model.cbam.channel.reduction,
        "sam_kernel": model.cbam.spatial.conv.kernel_size[0],
        "variant": model.variant,
        "input_size": model.input_size,
    }


def save_checkpoint(model: ClassifierModel, path, cfg: TrainConfig | None = None) -> None:
    cfg = cfg or TrainConfig()
    index, chunks, offset = [], [], 0
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().contiguous().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    values = cfg.to_dict()
    header = {
        "format_version": FORMAT_VERSION,
        "config": values,
        "config_hash": config_hash(values),
        "model": _model_meta(model),
        "tensors": index,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    Path(path).write_bytes(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(blob)) + blob + payload)


def _read(path) -> tuple[dict, bytes]:
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise CheckpointError(f"{path}: file is truncated or corrupt (too short)")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    start = _PREFIX.size
    if len(data) < start + hlen:
        raise CheckpointError(f"{path}: file is truncated or corrupt (header)")
    try:
        header = json.loads(data[start:start + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from None
    payload = data[start + hlen:]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: file is truncated or corrupt (payload hash mismatch)")
    if config_hash(header["config"]) != header["config_hash"]:
        raise CheckpointError(f"{path}: config hash mismatch")
    return header, payload


def read_header(path) -> dict:
    return _read(path)[0]


def load_checkpoint(path, model: ClassifierModel | None = None) -> ClassifierModel:
    """Restore a model. Registry backbones are rebuilt from the header; pass
    ``model`` to load into a custom-backbone instance instead."""
    header, payload = _read(path)
    meta = header["model"]
    if model is None:
        if meta["backbone"] == "custom":
            raise CheckpointError(f"{path}: custom backbone; pass a model instance to load into")
        spec = BackboneSpec(meta["backbone"], pretrained=False, trainable=header["config"]["trainable"])
        model = build_model(
            spec, reduction=meta["reduction"], sam_kernel=meta["sam_kernel"], variant=meta["variant"]
        )
    model.variant = meta["variant"]
    state = {}
    for t in header["tensors"]:
        arr = np.frombuffer(payload, dtype=np.dtype(t["dtype"]), count=int(np.prod(t["shape"], dtype=np.int64)),
                            offset=t["offset"]).reshape(t["shape"])
        state[t["name"]] = torch.from_numpy(arr.copy())
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not fit the model: {exc}") from None
    return model


def checkpoint_config(path) -> TrainConfig:
    return TrainConfig(**read_header(path)["config"])
