"""Binary checkpoint format.

Layout::

    b"RBLPCKPT"                 8-byte magic
    uint64 little-endian        header length H
    H bytes                     UTF-8 JSON header
    body                        concatenated row-major little-endian float32 tensors

The header holds ``format_version``, the model ``config`` and its SHA-256
``config_digest``, registered ``modalities``, the tensor ``manifest``
(name -> {shape, offset}, offsets relative to the body start), the
``frozen`` parameter names and ``body_length``.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"RBLPCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointManifestError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    header: dict
    tensors: dict  # name -> np.ndarray (float32)

    @property
    def config(self):
        return self.header["config"]

    @property
    def frozen(self):
        return set(self.header["frozen"])

    def tensor(self, name):
        return self.tensors[name]


def config_digest(config):
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def model_to_checkpoint(model):
    cfg = model.config.to_dict()
    manifest, tensors, frozen = {}, {}, []
    offset = 0
    for name, p in model.named_parameters():
        arr = np.asarray(p.data, dtype="<f4")
        manifest[name] = {"shape": list(arr.shape), "offset": offset}
        tensors[name] = arr
        offset += arr.nbytes
        if not p.requires_grad:
            frozen.append(name)
    header = {
        "format_version": FORMAT_VERSION,
        "config": cfg,
        "config_digest": config_digest(cfg),
        "modalities": [{"id": k, **v} for k, v in model.modality_meta.items()],
        "manifest": manifest,
        "frozen": frozen,
        "body_length": offset,
    }
    return Checkpoint(header, tensors)


def write_checkpoint(ckpt, path):
    head = json.dumps(ckpt.header).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for name in ckpt.header["manifest"]:
            fh.write(np.asarray(ckpt.tensors[name], dtype="<f4").tobytes(order="C"))


def save_checkpoint(model, path):
    ckpt = model_to_checkpoint(model)
    write_checkpoint(ckpt, path)
    return ckpt


def read_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(raw) < 16:
        raise CheckpointTruncatedError(f"{path}: truncated before header length")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + hlen:
        raise CheckpointTruncatedError(f"{path}: header truncated ({len(raw) - 16} of {hlen} bytes)")
    try:
        header = json.loads(raw[16:16 + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format_version {header.get('format_version')!r}, expected {FORMAT_VERSION}")
    if config_digest(header["config"]) != header.get("config_digest"):
        raise CheckpointError(f"{path}: config digest mismatch")
    body = raw[16 + hlen:]
    if len(body) < header["body_length"]:
        raise CheckpointTruncatedError(f"{path}: body has {len(body)} bytes, manifest needs {header['body_length']}")
    if len(body) > header["body_length"]:
        raise CheckpointError(f"{path}: {len(body) - header['body_length']} trailing bytes after body")
    spans = []
    tensors = {}
    for name, entry in header["manifest"].items():
        shape = tuple(entry["shape"])
        start = int(entry["offset"])
        end = start + 4 * int(np.prod(shape, dtype=np.int64))
        if start < 0 or end > header["body_length"]:
            raise CheckpointManifestError(f"{path}: tensor {name!r} [{start}, {end}) out of bounds")
        spans.append((start, end, name))
        tensors[name] = np.frombuffer(body[start:end], dtype="<f4").reshape(shape).astype(np.float32)
    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise CheckpointManifestError(f"{path}: tensors {n0!r} and {n1!r} overlap")
    return Checkpoint(header, tensors)


def load_checkpoint(path):
    """Rebuild a :class:`~regionblip.model.RegionBLIP` from a checkpoint file."""
    from .model import ModelConfig, RegionBLIP

    ckpt = read_checkpoint(path)
    model = RegionBLIP(ModelConfig.from_dict(ckpt.config))
    for entry in ckpt.header["modalities"]:
        model.register_modality(entry["id"], use_pafe=entry.get("use_pafe", True))
    params = dict(model.named_parameters())
    missing = set(params) - set(ckpt.tensors)
    extra = set(ckpt.tensors) - set(params)
    if missing or extra:
        raise CheckpointManifestError(
            f"{path}: manifest mismatch, missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}")
    frozen = ckpt.frozen
    for name, p in params.items():
        arr = ckpt.tensors[name]
        if arr.shape != p.shape:
            raise CheckpointManifestError(f"{path}: {name!r} has shape {arr.shape}, model expects {p.shape}")
        p.data = arr.copy()
        p.requires_grad = name not in frozen
        p.grad = None
    return model
