"""Binary checkpoints of the distillation state.

Layout (little-endian)::

    b"SLPC" | u32 version (=2) | u32 meta_len | meta (UTF-8 JSON)
    | u32 num_arrays | per array: u32 name_len, name, u32 ndim, u32[ndim] shape
    | float32 payload of every array in table order, row-major
"""
from __future__ import annotations

from pathlib import Path
from typing import Any, Iterator
import json
import logging
import struct

import numpy as np

from ..errors import DatasetFileNotFoundError, FormatError
from ..training.distill import DistillState
from ..training.network import MLPParams, NetworkParams

_LOGGER = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SLPC"
CHECKPOINT_VERSION = 2
_U32 = struct.Struct("<I")
_PAYLOAD_DTYPE = np.dtype("<f4")
_NETWORKS = ("student", "teacher", "velocity")


def write_checkpoint(state: DistillState, path: Path) -> Path:
    """Serialize every field of ``state``; identical states give identical bytes."""

    arrays = list(_named_arrays(state))
    meta = {
        "tau_student": state.tau_student,
        "tau_teacher": state.tau_teacher,
        "ema_momentum": state.ema_momentum,
        "center_momentum": state.center_momentum,
        "prototype_head": state.prototype_head,
        "encoder_activation": state.student.encoder.activation,
        "head_activation": state.student.head.activation,
        "encoder_layers": len(state.student.encoder.weights),
        "head_layers": len(state.student.head.weights),
        "has_velocity": state.velocity is not None,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")

    chunks = [CHECKPOINT_MAGIC, _U32.pack(CHECKPOINT_VERSION), _U32.pack(len(meta_bytes)), meta_bytes]
    chunks.append(_U32.pack(len(arrays)))
    for name, array in arrays:
        encoded = name.encode("utf-8")
        chunks.append(_U32.pack(len(encoded)) + encoded + _U32.pack(array.ndim))
        chunks.extend(_U32.pack(dim) for dim in array.shape)
    chunks.extend(np.ascontiguousarray(array, dtype=_PAYLOAD_DTYPE).tobytes() for _, array in arrays)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))
    _LOGGER.info("Wrote checkpoint %s (%d arrays)", path, len(arrays))
    return path


def read_checkpoint(path: Path) -> DistillState:
    """Load a checkpoint written by :func:`write_checkpoint` (arrays come back as float64)."""

    path = Path(path)
    if not path.exists():
        raise DatasetFileNotFoundError(f"Checkpoint not found: {path}")
    reader = _Reader(path.read_bytes(), path)
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic bytes (expected {CHECKPOINT_MAGIC!r})")
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        meta: dict[str, Any] = json.loads(reader.take(reader.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable checkpoint metadata ({exc})") from exc

    table: list[tuple[str, tuple[int, ...]]] = []
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        ndim = reader.u32()
        table.append((name, tuple(reader.u32() for _ in range(ndim))))

    arrays: dict[str, np.ndarray] = {}
    for name, shape in table:
        count = int(np.prod(shape, dtype=np.int64))
        raw = reader.take(count * _PAYLOAD_DTYPE.itemsize)
        arrays[name] = np.frombuffer(raw, dtype=_PAYLOAD_DTYPE).reshape(shape).astype(np.float64)
    if not reader.exhausted:
        raise FormatError(f"{path}: trailing bytes after payload")

    for name in ("center", "prototype_center"):
        if name not in arrays:
            raise FormatError(f"{path}: checkpoint is missing array {name}")
    try:
        networks = {
            prefix: _network_from_arrays(arrays, prefix, meta)
            for prefix in _NETWORKS
            if prefix != "velocity" or meta.get("has_velocity")
        }
        return DistillState(
            student=networks["student"],
            teacher=networks["teacher"],
            center=arrays["center"],
            prototype_center=arrays["prototype_center"],
            tau_student=float(meta["tau_student"]),
            tau_teacher=float(meta["tau_teacher"]),
            ema_momentum=float(meta["ema_momentum"]),
            center_momentum=float(meta["center_momentum"]),
            velocity=networks.get("velocity"),
            prototype_head=str(meta["prototype_head"]),
        )
    except (AttributeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: incomplete checkpoint metadata ({exc!r})") from exc


def _named_arrays(state: DistillState) -> Iterator[tuple[str, np.ndarray]]:
    for prefix in _NETWORKS:
        network = getattr(state, prefix)
        if network is None:
            continue
        for part in ("encoder", "head"):
            mlp: MLPParams = getattr(network, part)
            for index, (weight, bias) in enumerate(zip(mlp.weights, mlp.biases)):
                yield f"{prefix}.{part}.weight.{index}", weight
                yield f"{prefix}.{part}.bias.{index}", bias
    yield "center", state.center
    yield "prototype_center", state.prototype_center


def _network_from_arrays(arrays: dict[str, np.ndarray], prefix: str, meta: dict[str, Any]) -> NetworkParams:
    parts = {}
    for part in ("encoder", "head"):
        layers = int(meta[f"{part}_layers"])
        try:
            weights = tuple(arrays[f"{prefix}.{part}.weight.{index}"] for index in range(layers))
            biases = tuple(arrays[f"{prefix}.{part}.bias.{index}"] for index in range(layers))
        except KeyError as exc:
            raise FormatError(f"Checkpoint is missing array {exc.args[0]}") from exc
        parts[part] = MLPParams(weights=weights, biases=biases, activation=str(meta[f"{part}_activation"]))
    return NetworkParams(encoder=parts["encoder"], head=parts["head"])


class _Reader:
    def __init__(self, raw: bytes, path: Path) -> None:
        self._raw = raw
        self._path = path
        self._offset = 0

    def take(self, count: int) -> bytes:
        end = self._offset + count
        if end > len(self._raw):
            raise FormatError(f"{self._path}: truncated checkpoint")
        chunk = self._raw[self._offset:end]
        self._offset = end
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(_U32.size))[0]

    @property
    def exhausted(self) -> bool:
        return self._offset == len(self._raw)


__all__ = ["write_checkpoint", "read_checkpoint"]
