"""Portable checkpoint files for trained models.

Layout::

    b"TRIPCKPT" | u32 format_version | u32 text_len | config text (utf-8)
    | TRIPW tensor section | 8-byte blake2b checksum of everything before it

The text section is the canonical key-sorted ``key = value`` config plus
``meta.*`` entries (fingerprints, loss history, normalization stats). Frozen
backbone weights are not stored; they are rebuilt from the config and checked
against the stored fingerprint.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np
import torch

from .archive import decode_tripw, encode_tripw
from .config import ModelConfig, dump_config, parse_config_text, parse_value
from .data import NormStats
from .errors import CheckpointError, IoError
from .model import build_model
from .pipeline import TrainedModel

MAGIC = b"TRIPCKPT"
FORMAT_VERSION = 1
CHECKSUM_BYTES = 8


def _checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=CHECKSUM_BYTES).digest()


def _floats(values) -> str:
    return ",".join(repr(float(v)) for v in values)


def checkpoint_save(trained: TrainedModel, path) -> None:
    model = trained.model
    text = dict(model.config.to_flat())
    meta = {
        "meta.fingerprint_start": str(trained.fingerprint_start),
        "meta.fingerprint_end": str(trained.fingerprint_end),
        "meta.history": _floats(trained.history),
    }
    if trained.norm_stats is not None:
        meta["meta.norm_mean"] = _floats(trained.norm_stats.mean)
        meta["meta.norm_std"] = _floats(trained.norm_stats.std)
    body = dump_config(text) + "".join(f"{k} = {meta[k]}\n" for k in sorted(meta))
    raw_text = body.encode("utf-8")
    tensors = {n: p.detach().cpu().float().numpy() for n, p in model.trainable_parameters()}
    blob = (MAGIC + struct.pack("<II", FORMAT_VERSION, len(raw_text)) + raw_text
            + encode_tripw(tensors))
    Path(path).write_bytes(blob + _checksum(blob))


def checkpoint_load(path) -> TrainedModel:
    path = Path(path)
    if not path.is_file():
        raise IoError(f"no such checkpoint: {path}")
    data = path.read_bytes()
    if len(data) < len(MAGIC) + 8 + CHECKSUM_BYTES or not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, text_len = struct.unpack_from("<II", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format version {version}, this code reads version {FORMAT_VERSION}"
        )
    payload, stored = data[:-CHECKSUM_BYTES], data[-CHECKSUM_BYTES:]
    if _checksum(payload) != stored:
        raise CheckpointError(f"{path}: checksum mismatch (file truncated or corrupted)")

    start = len(MAGIC) + 8
    entries = parse_config_text(payload[start:start + text_len].decode("utf-8"))
    meta = {k: v for k, v in entries.items() if k.startswith("meta.")}
    flat = {k: parse_value(k, v) for k, v in entries.items() if not k.startswith("meta.")}
    tensors, end = decode_tripw(payload, start + text_len)
    if end != len(payload):
        raise CheckpointError(f"{path}: unexpected bytes after tensor section")

    model = build_model(ModelConfig.from_flat(flat))
    expected = dict(model.trainable_parameters())
    if set(expected) != set(tensors):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise CheckpointError(f"{path}: tensor set mismatch (missing {missing}, unexpected {extra})")
    with torch.no_grad():
        for name, param in expected.items():
            if tuple(param.shape) != tensors[name].shape:
                raise CheckpointError(f"{path}: tensor {name!r} has the wrong shape")
            param.copy_(torch.from_numpy(tensors[name]))
    model.eval()

    fp_end = int(meta["meta.fingerprint_end"])
    if model.backbone.fingerprint() != fp_end:
        raise CheckpointError(f"{path}: rebuilt backbone does not match the stored fingerprint")
    history = [float(v) for v in meta.get("meta.history", "").split(",") if v]
    norm = None
    if "meta.norm_mean" in meta:
        norm = NormStats(
            np.array([float(v) for v in meta["meta.norm_mean"].split(",")]),
            np.array([float(v) for v in meta["meta.norm_std"].split(",")]),
        )
    return TrainedModel(model, int(meta["meta.fingerprint_start"]), fp_end, history, norm)
