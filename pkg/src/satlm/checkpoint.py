"""Binary checkpoint format.

Layout: magic ``SATL``, little-endian u16 version, little-endian u32 header
length, UTF-8 JSON header (config plus ordered ``{name, shape}`` entries),
then every parameter as little-endian float64 in header order.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from . import tensor as T
from .encoder import EncoderConfig
from .errors import FormatError, IntegrityError

MAGIC = b"SATL"
VERSION = 1


def to_bytes(model, vocab=None, train_config=None):
    header = {
        "encoder": model.config.to_dict(),
        "alpha_init": list(model.alpha_init),
        "train": train_config.to_dict() if train_config is not None else None,
        "vocab": vocab.itos if vocab is not None else None,
        "params": [{"name": k, "shape": list(v.shape)} for k, v in model.params.items()],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(blob)), blob]
    parts.extend(np.ascontiguousarray(v.data, dtype="<f8").tobytes() for v in model.params.values())
    return b"".join(parts)


def save_checkpoint(model, path, vocab=None, train_config=None):
    with open(path, "wb") as fh:
        fh.write(to_bytes(model, vocab, train_config))


def from_bytes(raw):
    """Decode a checkpoint; returns ``(model, vocab, train_config_dict)``."""
    from .data import Vocab
    from .model import StructureAwareModel

    if len(raw) < 10 or raw[:4] != MAGIC:
        raise FormatError("not a SATL checkpoint (bad magic)")
    version, hlen = struct.unpack("<HI", raw[4:10])
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[10 : 10 + hlen].decode("utf-8"))
        entries = header["params"]
        config = EncoderConfig(**header["encoder"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"corrupted checkpoint header: {exc}") from None

    offset = 10 + hlen
    arrays = {}
    for entry in entries:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(raw):
            raise FormatError(f"checkpoint payload truncated at parameter {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(raw[offset:end], dtype="<f8").reshape(shape).astype(np.float64)
        offset = end
    if offset != len(raw):
        raise FormatError(f"{len(raw) - offset} trailing bytes after checkpoint payload")

    n_classes = arrays["cls.w"].shape[1] if "cls.w" in arrays else None
    probe = StructureAwareModel.__new__(StructureAwareModel)
    probe.config = config
    expected = probe.expected_shapes(n_classes)
    actual = {k: v.shape for k, v in arrays.items()}
    if expected != actual:
        bad = sorted(set(expected.items()) ^ set(actual.items()))
        raise IntegrityError(f"parameter shapes disagree with config: {bad[:4]}")

    params = {k: T.parameter(v) for k, v in arrays.items()}
    model = StructureAwareModel(config, alpha_init=tuple(header.get("alpha_init", (0.35, 0.40, 0.25))), params=params)
    vocab = Vocab(header["vocab"]) if header.get("vocab") else None
    return model, vocab, header.get("train")


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
