"""Versioned binary checkpoints.

Layout: magic ``T2S1`` | 32-byte config hash | little-endian u64 step | f64
arrays for student, teacher, first moments, second moments, each in declared
architecture order. Shapes come from the architecture, so none are stored.
"""
import dataclasses
import pathlib
import struct

import numpy as np

import pullseg.model
from pullseg.utils import errors

MAGIC = b"T2S1"
HASH_BYTES = 32
STEP = struct.Struct("<Q")


@dataclasses.dataclass
class Checkpoint:
    step: int
    student: pullseg.model.ModelParams
    teacher: pullseg.model.ModelParams
    first: pullseg.model.Gradients
    second: pullseg.model.Gradients


def _pack(tensors, names) -> bytes:
    return b"".join(
        np.ascontiguousarray(tensors[name], dtype="<f8").tobytes() for name in names
    )


def save_checkpoint(path, config_hash: bytes, ckpt: Checkpoint):
    if len(config_hash) != HASH_BYTES:
        raise errors.ConfigInvalid("config hash must be 32 bytes")
    names = ckpt.student.names()
    payload = b"".join(
        [
            MAGIC,
            config_hash,
            STEP.pack(ckpt.step),
            _pack(ckpt.student.tensors, names),
            _pack(ckpt.teacher.tensors, names),
            _pack(ckpt.first, names),
            _pack(ckpt.second, names),
        ]
    )
    path = pathlib.Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload)
    except OSError as exc:
        raise errors.IoError(f"cannot write checkpoint {path}: {exc}") from exc


def _read(path) -> bytes:
    try:
        raw = pathlib.Path(path).read_bytes()
    except OSError as exc:
        raise errors.IoError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:4] != MAGIC or len(raw) < 4 + HASH_BYTES + STEP.size:
        raise errors.FormatError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    return raw


def read_header(path) -> tuple:
    raw = _read(path)
    (step,) = STEP.unpack_from(raw, 4 + HASH_BYTES)
    return raw[4 : 4 + HASH_BYTES], step


def load_checkpoint(
    path, arch: pullseg.model.Architecture, config_hash: bytes
) -> Checkpoint:
    raw = _read(path)
    stored_hash = raw[4 : 4 + HASH_BYTES]
    if stored_hash != config_hash:
        raise errors.ConfigInvalid(f"{path} was written under a different configuration")
    (step,) = STEP.unpack_from(raw, 4 + HASH_BYTES)
    offset = 4 + HASH_BYTES + STEP.size

    layout = arch.layout()
    per_set = sum(int(np.prod(shape)) for _, shape in layout)
    if len(raw) - offset != 4 * per_set * 8:
        raise errors.FormatError(
            f"{path}: payload holds {len(raw) - offset} bytes, expected {4 * per_set * 8}"
        )
    values = np.frombuffer(raw, dtype="<f8", offset=offset).astype(np.float64)

    sets = []
    cursor = 0
    for _ in range(4):
        tensors = {}
        for name, shape in layout:
            size = int(np.prod(shape))
            tensors[name] = values[cursor : cursor + size].reshape(shape).copy()
            cursor += size
        sets.append(tensors)
    student, teacher, first, second = sets
    return Checkpoint(
        step=step,
        student=pullseg.model.ModelParams(arch, student),
        teacher=pullseg.model.ModelParams(arch, teacher),
        first=first,
        second=second,
    )
