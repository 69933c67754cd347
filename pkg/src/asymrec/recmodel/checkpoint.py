"""AREC checkpoint: magic, u32 header length, JSON header, float64 weights, checksum.

The header holds the configuration, model shape, the hash of the codebook
snapshot the codes came from, and the (name, shape) list of every weight in
payload order. The checksum covers everything after the magic.
"""

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from ..binio import Reader, f64_bytes, split_checksum, with_checksum
from ..errors import FormatError
from .model import RecConfig, RecModel

AREC_MAGIC = b"AREC"
VERSION = 1


def save_checkpoint(model: RecModel, path) -> None:
    names = sorted(model.params)
    header = {
        "version": VERSION,
        "config": dataclasses.asdict(model.config),
        "d": model.d,
        "n_heads": model.n_heads,
        "K": model.K,
        "mhq_hash": model.mhq_hash,
        "weights": [[n, list(model.params[n].shape)] for n in names],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = struct.pack("<I", len(head)) + head + b"".join(f64_bytes(model.params[n]) for n in names)
    Path(path).write_bytes(AREC_MAGIC + with_checksum(body))


def load_checkpoint(path) -> RecModel:
    blob = Path(path).read_bytes()
    if blob[:4] != AREC_MAGIC:
        raise FormatError("bad AREC magic", offset=0)
    body = split_checksum(blob, 4)
    r = Reader(body)
    size = r.u32("header length")
    try:
        header = json.loads(r.take(size, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable AREC header: {exc}", offset=8) from None
    if header.get("version") != VERSION:
        raise FormatError(f"unsupported AREC version {header.get('version')}", offset=8)
    params = {name: r.f64(tuple(shape), name) for name, shape in header["weights"]}
    if r.pos != len(body):
        raise FormatError("trailing bytes after AREC weights", offset=4 + r.pos)
    for name, value in params.items():
        if not np.all(np.isfinite(value)):
            raise FormatError(f"non-finite values in weight {name}")
    cfg = RecConfig(**header["config"])
    return RecModel(cfg, params, header["d"], header["n_heads"], header["K"], header["mhq_hash"])
