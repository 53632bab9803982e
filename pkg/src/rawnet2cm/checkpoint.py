"""Versioned binary checkpoint files.

Layout (all integers little-endian)::

    bytes 0-7    magic  b"RN2CKPT\\n"
    bytes 8-11   uint32 format version (currently 1)
    bytes 12-19  uint64 header length H
    next H bytes UTF-8 JSON header, keys sorted
    rest         payload: raw little-endian arrays, back to back

Header keys:

    model_config         model hyperparameters (dict)
    config_sha256        sha256 of the compact sorted-key JSON of model_config
    filterbank_sha256    checksum of the sinc kernels rebuilt from model_config
    dtype                parameter dtype name
    train_config         training settings (dict or null)
    meta                 free-form JSON (epoch counter, training log, ...)
    adam                 ADAM hyperparameters and step counter, or null
    tensors              list of {name, dtype, shape, offset, nbytes}
    payload_sha256       sha256 of the payload bytes

Tensor names: model parameters and BN statistics under their
``ModelParams.state_arrays`` names, ADAM moments as ``adam.m/<name>`` and
``adam.v/<name>``, additional arrays as ``extra/<key>/<name>``.
The sinc filterbank is fixed and therefore not stored.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autograd import AdamState
from .model import ModelConfig, ModelParams, model_init

MAGIC = b"RN2CKPT\n"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: ModelParams
    adam: AdamState | None = None
    train_config: dict | None = None
    meta: dict = field(default_factory=dict)
    extra: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)


def _le(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<"))


def encode_checkpoint(ck: Checkpoint) -> bytes:
    params = ck.params
    arrays: list[tuple[str, np.ndarray]] = list(params.state_arrays().items())
    adam_meta = None
    if ck.adam is not None:
        names = [n for n, _ in params.named_parameters()]
        arrays += [(f"adam.m/{n}", m) for n, m in zip(names, ck.adam.m)]
        arrays += [(f"adam.v/{n}", v) for n, v in zip(names, ck.adam.v)]
        adam_meta = {"lr": ck.adam.lr, "beta1": ck.adam.beta1, "beta2": ck.adam.beta2,
                     "eps": ck.adam.eps, "step": ck.adam.step}
    for key in sorted(ck.extra):
        arrays += [(f"extra/{key}/{n}", a) for n, a in sorted(ck.extra[key].items())]

    table = []
    chunks = []
    offset = 0
    for name, arr in arrays:
        a = _le(np.asarray(arr))
        raw = a.tobytes()
        table.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "model_config": asdict(params.config),
        "config_sha256": params.config.digest(),
        "filterbank_sha256": params.filterbank.checksum(),
        "dtype": params.dtype.name,
        "train_config": ck.train_config,
        "meta": ck.meta,
        "adam": adam_meta,
        "tensors": table,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<IQ", VERSION, len(hb)) + hb + payload


def decode_checkpoint(raw: bytes, expected_config: ModelConfig | None = None) -> Checkpoint:
    if raw[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if len(raw) < 20:
        raise CheckpointError("truncated checkpoint header")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[20:20 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    payload = raw[20 + hlen:]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError("checkpoint payload checksum mismatch (corrupt file)")
    try:
        cfg = ModelConfig(**header["model_config"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid model config: {exc}") from None
    if cfg.digest() != header.get("config_sha256"):
        raise CheckpointError("config hash mismatch: stored config does not match its recorded hash")
    if expected_config is not None and expected_config.digest() != cfg.digest():
        raise CheckpointError("config hash mismatch: checkpoint was written for a different model config")

    arrays: dict[str, np.ndarray] = {}
    for t in header["tensors"]:
        buf = payload[t["offset"]: t["offset"] + t["nbytes"]]
        arrays[t["name"]] = np.frombuffer(buf, dtype=np.dtype(t["dtype"])).reshape(t["shape"]).copy()

    params = model_init(0, cfg, dtype=np.dtype(header["dtype"]))
    if params.filterbank.checksum() != header["filterbank_sha256"]:
        raise CheckpointError("rebuilt sinc filterbank differs from the one used at save time")
    params.load_state_arrays(arrays)

    adam = None
    if header.get("adam") is not None:
        names = [n for n, _ in params.named_parameters()]
        h = header["adam"]
        adam = AdamState(lr=h["lr"], beta1=h["beta1"], beta2=h["beta2"], eps=h["eps"], step=h["step"],
                         m=[arrays[f"adam.m/{n}"] for n in names],
                         v=[arrays[f"adam.v/{n}"] for n in names])
    extra: dict[str, dict[str, np.ndarray]] = {}
    for name, arr in arrays.items():
        if name.startswith("extra/"):
            _, key, sub = name.split("/", 2)
            extra.setdefault(key, {})[sub] = arr
    return Checkpoint(params, adam, header.get("train_config"), header.get("meta") or {}, extra)


def save_checkpoint(path, params: ModelParams, adam: AdamState | None = None,
                    train_config: dict | None = None, meta: dict | None = None,
                    extra: dict[str, dict[str, np.ndarray]] | None = None) -> None:
    """Write atomically (temp file then rename)."""
    data = encode_checkpoint(Checkpoint(params, adam, train_config, meta or {}, extra or {}))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), expected_config)
