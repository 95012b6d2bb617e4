"""
CRCK1 checkpoint container.

Layout (little-endian):
    magic      6 bytes  b"CRCK1\\x00"
    json_len   u32
    json       UTF-8, {"arch": {...}, "step": n, "tensors": [{"name", "shape", "offset"}, ...]}
    payload    raw float32 tensors in index order, offsets relative to payload start

Tensor names are "params/<stage>/<layer>" and "ema/<stage>/<layer>", sorted,
so equal models encode to equal bytes.
"""
import json
import logging
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from network.cascade import CascadeModel, require_same_arch
from network.optim import OptimizerState
from utils.errors import BadMagic, TruncatedFile
from utils.volume import write_bytes

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CRCK1\x00"
_LENGTH = struct.Struct("<I")


@dataclass
class Checkpoint:
    arch: Dict
    step: int
    params: Dict[str, np.ndarray]
    ema: Dict[str, np.ndarray] = field(default_factory=dict)


def checkpoint_from_model(model: CascadeModel, opt: Optional[OptimizerState] = None) -> Checkpoint:
    params = {k: np.array(v, dtype=np.float32) for k, v in model.parameters().items()}
    ema = {k: np.array(v, dtype=np.float32) for k, v in opt.ema.items()} if opt else {}
    return Checkpoint(model.arch(), opt.step if opt else 0, params, ema)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    tensors = {f"params/{k}": v for k, v in ckpt.params.items()}
    tensors.update({f"ema/{k}": v for k, v in ckpt.ema.items()})
    index, chunks, offset = [], [], 0
    for name in sorted(tensors):
        raw = np.ascontiguousarray(tensors[name], dtype="<f4").tobytes(order="C")
        index.append({"name": name, "shape": list(tensors[name].shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"arch": ckpt.arch, "step": int(ckpt.step), "tensors": index},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    return CHECKPOINT_MAGIC + _LENGTH.pack(len(header)) + header + b"".join(chunks)


def decode_checkpoint(content: bytes) -> Checkpoint:
    if content[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise BadMagic("Not a CRCK1 checkpoint")
    start = len(CHECKPOINT_MAGIC) + _LENGTH.size
    if len(content) < start:
        raise TruncatedFile("Checkpoint header is truncated")
    (length,) = _LENGTH.unpack_from(content, len(CHECKPOINT_MAGIC))
    if len(content) < start + length:
        raise TruncatedFile("Checkpoint descriptor is truncated")
    meta = json.loads(content[start:start + length].decode("utf-8"))
    payload = memoryview(content)[start + length:]

    params, ema = {}, {}
    for entry in meta["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = entry["offset"] + 4 * count
        if end > len(payload):
            raise TruncatedFile(f"Tensor {entry['name']} extends past the end of the checkpoint")
        values = np.frombuffer(payload[entry["offset"]:end], dtype="<f4").reshape(shape).astype(np.float32)
        group, name = entry["name"].split("/", 1)
        (params if group == "params" else ema)[name] = values
    return Checkpoint(meta["arch"], int(meta["step"]), params, ema)


def write_checkpoint(ckpt: Checkpoint, path: str) -> None:
    write_bytes(path, encode_checkpoint(ckpt))
    logger.info(f"Checkpoint step {ckpt.step} written to {path}")


def read_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as handle:
        return decode_checkpoint(handle.read())


def model_from_checkpoint(ckpt: Checkpoint, use_ema: bool = True, dtype=np.float32) -> CascadeModel:
    """Cascade carrying the EMA shadows (or the raw parameters)."""
    weights = ckpt.ema if use_ema and ckpt.ema else ckpt.params
    return CascadeModel.from_arch(ckpt.arch, weights, dtype)


def load_ensemble(paths: List[str], use_ema: bool = True) -> List[CascadeModel]:
    """Load ensemble members and check they share one architecture."""
    models = [model_from_checkpoint(read_checkpoint(p), use_ema) for p in paths]
    require_same_arch(models)
    logger.info(f"Loaded {len(models)} ensemble members")
    return models
