"""Checkpoint container.

Layout: magic ``AVCK``, u32 version, u32 header length, JSON header, then the
raw parameter payloads. The header records a section tag ("backbone" or
"fusion"), the config digest, digests of referenced checkpoints (for linked
checkpoints), and for every parameter its name, shape and byte offset into the
payload area. Payloads are little-endian float32 in header order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

MAGIC = b"AVCK"
VERSION = 1


class CheckpointError(Exception):
    pass


def config_digest(config_dict: dict) -> str:
    return hashlib.sha256(
        json.dumps(config_dict, sort_keys=True).encode()
    ).hexdigest()


def parameter_digest(named_params) -> str:
    """Bit-exact hash over parameters in name order (dtype preserved)."""
    h = hashlib.sha256()
    for name, p in sorted(named_params, key=lambda kv: kv[0]):
        h.update(name.encode())
        arr = p.detach().cpu().numpy()
        h.update(str(arr.dtype).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


@dataclass
class Checkpoint:
    section: str                      # "backbone" or "fusion"
    config: dict
    params: dict                      # name -> np.ndarray (float32)
    refs: dict = field(default_factory=dict)  # e.g. backbone digests for linked ckpts
    meta: dict = field(default_factory=dict)

    @property
    def digest(self) -> str:
        return config_digest(self.config)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    entries = []
    payloads = []
    offset = 0
    for name in sorted(ckpt.params):
        # np.ascontiguousarray would promote 0-d arrays to 1-d; keep shapes
        arr = np.asarray(ckpt.params[name], dtype="<f4", order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payloads.append(arr.tobytes())
        offset += len(payloads[-1])
    header = json.dumps({
        "section": ckpt.section,
        "config": ckpt.config,
        "config_digest": ckpt.digest,
        "refs": ckpt.refs,
        "meta": ckpt.meta,
        "params": entries,
    }).encode()
    import os
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for b in payloads:
            fh.write(b)
    os.replace(tmp, path)  # atomic publish


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError(f"{path}: not an avflow checkpoint")
        lead = fh.read(8)
        if len(lead) != 8:
            raise CheckpointError(f"{path}: truncated header")
        version, header_len = struct.unpack("<II", lead)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(header_len))
        if config_digest(header["config"]) != header["config_digest"]:
            raise CheckpointError(f"{path}: config digest mismatch")
        params = {}
        blob = fh.read()
    for e in header["params"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=e["offset"])
        params[e["name"]] = arr.reshape(e["shape"]).copy()
    return Checkpoint(
        section=header["section"], config=header["config"], params=params,
        refs=header.get("refs", {}), meta=header.get("meta", {}),
    )


def state_to_params(module: torch.nn.Module, names=None) -> dict:
    sd = module.state_dict()
    names = names if names is not None else sd.keys()
    return {k: sd[k].detach().cpu().numpy().astype(np.float32) for k in names}


def load_params_into(module: torch.nn.Module, params: dict) -> None:
    sd = module.state_dict()
    missing = set(sd) - set(params)
    extra = set(params) - set(sd)
    if missing or extra:
        raise CheckpointError(
            f"parameter name mismatch; missing={sorted(missing)[:5]} "
            f"extra={sorted(extra)[:5]}"
        )
    with torch.no_grad():
        for k, arr in params.items():
            sd[k].copy_(torch.from_numpy(np.ascontiguousarray(arr)).to(sd[k].dtype))
