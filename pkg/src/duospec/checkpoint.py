"""Checkpoint container: a versioned binary file with a JSON header.

Layout:

    8 bytes   magic ``DSCKPT1\\n``
    8 bytes   header length, little-endian uint64
    N bytes   UTF-8 JSON header
    M bytes   payload: the arrays' raw little-endian float64 values,
              concatenated in header order

The header carries the format version, the model kind, an echo of the
config, the training epoch, the RNG state, the optimizer scalar state and a
manifest of every array (name, section, shape, byte offset). Round-trips
are bit-exact because values are stored as raw float64 bytes.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"DSCKPT1\n"
FORMAT_VERSION = 1

SECTIONS = ("params", "buffers", "optimizer")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str                      # "baseline" or "dual"
    config: dict
    params: dict
    buffers: dict
    optimizer: dict
    rng_state: dict | None = None
    epoch: int = 0
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt):
    arrays = []
    manifest = []
    offset = 0
    for section in SECTIONS:
        for name in sorted(getattr(ckpt, section)):
            arr = np.ascontiguousarray(getattr(ckpt, section)[name], dtype="<f8")
            arrays.append(arr)
            manifest.append({"section": section, "name": name,
                             "shape": list(arr.shape), "offset": offset})
            offset += arr.nbytes
    header = {
        "format_version": FORMAT_VERSION,
        "kind": ckpt.kind,
        "config": ckpt.config,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "meta": ckpt.meta,
        "arrays": manifest,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(len(blob).to_bytes(8, "little"))
        f.write(blob)
        for arr in arrays:
            f.write(arr.tobytes())
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
        header_len = int.from_bytes(f.read(8), "little")
        header = json.loads(f.read(header_len).decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported format version {header.get('format_version')}")
        payload = f.read()
    sections = {s: {} for s in SECTIONS}
    for item in header["arrays"]:
        shape = tuple(item["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8 if shape else 8
        raw = payload[item["offset"]:item["offset"] + nbytes]
        if len(raw) != nbytes:
            raise CheckpointError(f"{path}: truncated payload for {item['name']}")
        sections[item["section"]][item["name"]] = \
            np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return Checkpoint(
        kind=header["kind"],
        config=header["config"],
        params=sections["params"],
        buffers=sections["buffers"],
        optimizer=sections["optimizer"],
        rng_state=header["rng_state"],
        epoch=header["epoch"],
        meta=header.get("meta", {}),
    )
