"""Binary checkpoint container.

Layout::

    b"PARA1" | u32 format version | u64 header length | JSON header | float64 LE payload

The header holds the model config, layer plan, init spec, seed, Adam scalars,
vocabulary, free-form metadata and a table of tensors (name, tag, shape,
offset). Tags are ``trainable``, ``frozen``, ``adam_m`` and ``adam_v``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Vocab
from .errors import FormatError
from .init import InitSpec
from .model import LayerPlan, ModelConfig, ParaFormerModel, build_model
from .training import AdamState

MAGIC = b"PARA1"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<5sIQ")
_DTYPE = np.dtype("<f8")


@dataclass
class Checkpoint:
    model: ParaFormerModel
    state: AdamState
    vocab: Vocab | None = None
    meta: dict = field(default_factory=dict)


def save_checkpoint(model: ParaFormerModel, state: AdamState | None, path, vocab: Vocab | None = None,
                    meta: dict | None = None) -> None:
    state = state or AdamState()
    entries, blobs, offset = [], [], 0

    def put(name, tag, array):
        nonlocal offset
        arr = np.ascontiguousarray(array, dtype=_DTYPE)
        entries.append({"name": name, "tag": tag, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.size

    for name, t in model.trainable.items():
        put(name, "trainable", t.data)
    for name, entry in model.frozen.items():
        put(name, "frozen", entry.tensor.data)
    for name in sorted(state.m):
        put(name, "adam_m", state.m[name])
        put(name, "adam_v", state.v[name])

    header = {
        "model_config": model.config.to_dict(),
        "plan": model.plan.to_dict(),
        "init_spec": model.init_spec.to_dict(),
        "seed": model.seed,
        "adam": {"lr": state.lr, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps, "t": state.t},
        "vocab": vocab.itos if vocab is not None else None,
        "vocab_min_count": vocab.min_count if vocab is not None else None,
        "meta": meta or {},
        "tensors": entries,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if len(buf) < _PREFIX.size:
        raise FormatError(f"{path}: truncated checkpoint header")
    magic, version, header_len = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
    start = _PREFIX.size
    if len(buf) < start + header_len:
        raise FormatError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(buf[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from None
    payload = np.frombuffer(buf, dtype=_DTYPE, offset=start + header_len) if len(buf) > start + header_len \
        else np.zeros(0, dtype=_DTYPE)
    if (len(buf) - start - header_len) % _DTYPE.itemsize:
        raise FormatError(f"{path}: payload is not a whole number of float64 values")

    try:
        config = ModelConfig.from_dict(header["model_config"])
        plan = LayerPlan.from_dict(header["plan"])
        spec = InitSpec.from_dict(header["init_spec"])
        model = build_model(config, plan, spec, int(header["seed"]))
        adam = header["adam"]
        state = AdamState(lr=adam["lr"], beta1=adam["beta1"], beta2=adam["beta2"], eps=adam["eps"], t=adam["t"])
        tensors = header["tensors"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed header ({exc})") from None

    seen = set()
    for entry in tensors:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        lo = entry["offset"]
        if lo + count > payload.size:
            raise FormatError(f"{path}: truncated payload at tensor {entry['name']}")
        values = payload[lo:lo + count].reshape(shape).astype(np.float64)
        name, tag = entry["name"], entry["tag"]
        if tag == "trainable":
            target = model.trainable.get(name)
        elif tag == "frozen":
            target = model.frozen[name].tensor if name in model.frozen else None
        elif tag in ("adam_m", "adam_v"):
            (state.m if tag == "adam_m" else state.v)[name] = values.copy()
            continue
        else:
            raise FormatError(f"{path}: unknown tensor tag {tag!r}")
        if target is None or target.shape != shape:
            raise FormatError(f"{path}: tensor {name} ({tag}, shape {shape}) does not fit the model")
        target.data[...] = values
        seen.add(name)
    missing = set(model.trainable) | set(model.frozen)
    missing -= seen
    if missing:
        raise FormatError(f"{path}: checkpoint lacks tensors {sorted(missing)[:5]}")
    vocab = Vocab(header["vocab"], header.get("vocab_min_count") or 1) if header.get("vocab") else None
    return Checkpoint(model, state, vocab, header.get("meta", {}))
