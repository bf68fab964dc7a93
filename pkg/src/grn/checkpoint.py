"""Binary checkpoints: named float32 tensors plus a JSON run config.

Layout (all integers little-endian)::

    b"GRN1"  u32 version  u32 config_len  config (UTF-8 JSON)  u32 count
    count x [ u16 name_len  name  u8 rank  rank x u32 dim  float32 values ]

Parameters and batch-norm buffers keep their model names; Adam moments are
stored as ``adam.m.<name>`` and ``adam.v.<name>``, and the Adam step counter
and constants live in the config under ``"adam"``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import BadMagicError, CheckpointError, TruncatedCheckpointError, VersionMismatchError
from .model import GRN, VariantConfig, build_model
from .train import AdamState

MAGIC = b"GRN1"
VERSION = 1
_M, _V = "adam.m.", "adam.v."


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    adam: AdamState
    config: dict

    @property
    def model_state(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if not k.startswith(("adam.",))}

    @property
    def variant(self) -> VariantConfig:
        return VariantConfig.from_dict(self.config["model"])

    @property
    def epoch(self) -> int:
        return int(self.config.get("epoch", 0))


def save_checkpoint(path: Union[str, Path], model: GRN, state: Optional[AdamState], config: dict) -> None:
    """Write ``model`` (parameters and buffers), the Adam moments and ``config``.

    ``config`` must contain the model's variant config under ``"model"`` or it
    is added.  The file is written to a temporary name and renamed.
    """
    config = dict(config)
    config.setdefault("model", json.loads(model.config.to_json()))
    state = state or AdamState()
    config["adam"] = state.hyper()
    tensors = dict(model.state_dict())
    for name in state.m:
        tensors[_M + name] = state.m[name]
        tensors[_V + name] = state.v[name]

    chunks = [MAGIC, struct.pack("<I", VERSION)]
    text = json.dumps(config, sort_keys=True).encode("utf-8")
    chunks += [struct.pack("<I", len(text)), text, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes, path: Path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"{self.path}: file ends inside {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc.strerror or exc}") from exc
    r = _Reader(buf, path)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic, not a GRN checkpoint")
    r.pos = 4
    (version,) = r.unpack("<I", "header")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: checkpoint format version {version}, expected {VERSION}")
    (n,) = r.unpack("<I", "header")
    try:
        config = json.loads(r.take(n, "config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable config: {exc}") from exc
    (count,) = r.unpack("<I", "header")
    tensors = {}
    for _ in range(count):
        (ln,) = r.unpack("<H", "tensor header")
        name = r.take(ln, "tensor name").decode("utf-8")
        (rank,) = r.unpack("<B", "tensor header")
        shape = r.unpack(f"<{rank}I", f"shape of {name}")
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(4 * size, f"values of {name}"), dtype="<f4").reshape(shape).copy()
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes")

    hyper = config.get("adam", {})
    state = AdamState(beta1=hyper.get("beta1", 0.9), beta2=hyper.get("beta2", 0.999),
                      eps=hyper.get("eps", 1e-8), step=int(hyper.get("step", 0)))
    for name, arr in tensors.items():
        if name.startswith(_M):
            state.m[name[len(_M):]] = arr.astype(np.float64)
        elif name.startswith(_V):
            state.v[name[len(_V):]] = arr.astype(np.float64)
    return Checkpoint(tensors, state, config)


def restore(path: Union[str, Path]) -> tuple[GRN, AdamState, dict]:
    """Rebuild the model from a checkpoint: ``(model, adam_state, config)``."""
    ckpt = load_checkpoint(path)
    if "model" not in ckpt.config:
        raise CheckpointError(f"{path}: config lacks the model section")
    model = build_model(ckpt.variant, 0)
    try:
        model.load_state_dict({k: v.astype(np.float64) for k, v in ckpt.model_state.items()})
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return model, ckpt.adam, ckpt.config
