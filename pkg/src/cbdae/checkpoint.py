"""Binary model checkpoints.

Layout (all integers unsigned little-endian, all tensor data little-endian
float64)::

    magic        8 bytes   b"CBDAECKP"
    version      u32
    header_len   u32
    header       header_len bytes of UTF-8 JSON:
                 {"arch": {...}, "meta": {...}, "train_state": {...} | null}
    n_blocks     u32
    blocks       n_blocks times:
                   name_len u16, name (UTF-8), ndim u8, dims u32 * ndim,
                   data float64 * prod(dims), row-major

Model blocks are named ``encoder.<layer>.W`` / ``.U`` / ``.b`` (gates stacked
in z, r, n order), ``decoder.<layer>.*``, ``W_out``, ``b_out`` and, for models
with a projection head, ``W_g1`` and ``W_g2``. ``normalizer.mean`` and
``normalizer.std`` hold the input scaling. Checkpoints written after training
also carry the optimiser state under the ``resume.last.``, ``resume.adam_m.``,
``resume.adam_v.`` and ``resume.best.`` prefixes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .model import CbdaeModel, CbdaeParams, ModelArch, Normalizer
from .training import TrainState

MAGIC = b"CBDAECKP"
VERSION = 1
_RESUME_PARTS = ("last", "adam_m", "adam_v", "best")


@dataclass
class Checkpoint:
    model: CbdaeModel
    meta: dict = field(default_factory=dict)
    state: TrainState | None = None


def _write_block(fh, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f8")
    fh.write(struct.pack("<H", len(raw)) + raw)
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ContractError("checkpoint is truncated")
    return data


def _read_block(fh) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
    name = _read_exact(fh, name_len).decode("utf-8")
    (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
    dims = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
    count = int(np.prod(dims)) if dims else 1
    data = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8").astype(np.float64)
    return name, data.reshape(dims)


def save_checkpoint(path, model: CbdaeModel, meta: dict | None = None, state: TrainState | None = None) -> None:
    blocks: dict[str, np.ndarray] = dict(model.params.snapshot())
    blocks["normalizer.mean"] = model.normalizer.mean
    blocks["normalizer.std"] = model.normalizer.std
    state_header = None
    if state is not None:
        for part in _RESUME_PARTS:
            for k, v in getattr(state, part).items():
                blocks[f"resume.{part}.{k}"] = v
        state_header = {"adam_step": state.adam_step, "next_epoch": state.next_epoch, "best_val": state.best_val}
    header = json.dumps({"arch": model.arch.to_dict(), "meta": meta or {}, "train_state": state_header}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(blocks)))
        for name, arr in blocks.items():
            _write_block(fh, name, arr)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ContractError(f"{path}: not a model checkpoint")
        version, header_len = struct.unpack("<II", _read_exact(fh, 8))
        if version > VERSION:
            raise ContractError(f"{path}: checkpoint version {version} is newer than supported {VERSION}")
        header = json.loads(_read_exact(fh, header_len).decode("utf-8"))
        (n_blocks,) = struct.unpack("<I", _read_exact(fh, 4))
        blocks = dict(_read_block(fh) for _ in range(n_blocks))
        if fh.read(1):
            raise ContractError(f"{path}: trailing bytes after the last block")

    arch = ModelArch.from_dict(header["arch"])
    params = CbdaeParams.init(arch, np.random.default_rng(0))
    expected = params.named_tensors()
    missing = set(expected) - set(blocks)
    if missing:
        raise ContractError(f"{path}: missing tensors {sorted(missing)}")
    for name, t in expected.items():
        if blocks[name].shape != t.shape:
            raise ContractError(f"{path}: tensor {name} has shape {blocks[name].shape}, architecture needs {t.shape}")
        t.values[...] = blocks[name]
    model = CbdaeModel(arch, params, Normalizer(blocks["normalizer.mean"], blocks["normalizer.std"]))

    state = None
    if header.get("train_state"):
        parts = {p: {} for p in _RESUME_PARTS}
        for name, arr in blocks.items():
            if name.startswith("resume."):
                part, key = name[len("resume.") :].split(".", 1)
                parts[part][key] = arr
        th = header["train_state"]
        state = TrainState(
            parts["last"], parts["adam_m"], parts["adam_v"], int(th["adam_step"]), int(th["next_epoch"]), float(th["best_val"]), parts["best"]
        )
    return Checkpoint(model, header.get("meta", {}), state)
