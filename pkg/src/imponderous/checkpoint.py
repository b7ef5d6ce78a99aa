"""Binary checkpoint format for named float32 tensors.

Layout (all integers little-endian)::

    b"IMPN"  u32 version (=1)  u32 entry count
    per entry: u16 name length, UTF-8 name, u8 ndim, ndim x u32 dims,
               float32 data in row-major order
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .layers import eca_kernel_size
from .model import BASE_CHANNELS, ModelConfig, build, param_shapes
from .tensor import Variable

MAGIC = b"IMPN"
VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint problems."""


class CheckpointFormatError(CheckpointError):
    """Bad magic bytes or unsupported version."""


class CheckpointTruncatedError(CheckpointError):
    """The file ends before the declared content does."""


class UnknownParameterError(CheckpointError):
    """The file names a parameter the configuration does not have."""


class MissingParameterError(CheckpointError):
    """The configuration needs a parameter the file does not provide."""


class ShapeMismatchError(CheckpointError):
    """A parameter's stored shape disagrees with the configuration."""


def save_checkpoint(params: dict[str, Variable], path) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, var in params.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(var.value, dtype="<f4")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(
                f"checkpoint truncated: needed {n} bytes at offset {self.pos}, file has {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    """Parse a checkpoint into ``{name: float32 array}`` without any config checks."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        try:
            name = r.take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"{path}: parameter name is not UTF-8") from exc
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}I")
        size = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims)
        out[name] = arr.astype(np.float32)
    if r.pos != len(r.data):
        raise CheckpointFormatError(f"{path}: {len(r.data) - r.pos} trailing bytes after last entry")
    return out


def load_checkpoint(path, config: ModelConfig | None = None, partial: bool = False,
                    seed: int = 0) -> dict[str, Variable]:
    """Load parameters, validating names and shapes against ``config`` if given.

    With ``partial=True`` a subset (e.g. only ``base.*``) is accepted and the
    remaining parameters come from ``build(config, seed)``.
    """
    arrays = read_checkpoint(path)
    if config is None:
        return {k: Variable(v, requires_grad=True, name=k) for k, v in arrays.items()}
    expected = param_shapes(config)
    for name, arr in arrays.items():
        if name not in expected:
            raise UnknownParameterError(f"{path}: unknown parameter {name!r} for this configuration")
        if arr.shape != expected[name]:
            raise ShapeMismatchError(
                f"{path}: parameter {name!r} has shape {arr.shape}, configuration expects {expected[name]}")
    missing = [k for k in expected if k not in arrays]
    if missing and not partial:
        raise MissingParameterError(f"{path}: missing {len(missing)} parameters, first {missing[0]!r}")
    params = build(config, seed) if missing else {}
    for name in expected:
        if name in arrays:
            params[name] = Variable(arrays[name], requires_grad=True, name=name)
    return params


def infer_config(arrays: dict, eca_placement: str = "after_partition") -> ModelConfig:
    """Recover the architecture switches a checkpoint was saved with.

    ECA placement leaves no trace in the parameter set and has to be given.
    """
    names = set(arrays)
    value = lambda k: arrays[k].value if isinstance(arrays[k], Variable) else arrays[k]  # noqa: E731
    slot = "global" if "head.global.classifier.weight" in names else "0"
    cls_w = value(f"head.{slot}.classifier.weight")
    dense_w = value(f"head.{slot}.dense.weight")
    eca_names = [n for n in names if n.startswith("eca.")]
    kernel = value(eca_names[0]).shape[0] if eca_names else None
    if kernel == eca_kernel_size(BASE_CHANNELS):
        kernel = None
    return ModelConfig(
        num_classes=cls_w.shape[1],
        feature_dim=cls_w.shape[0],
        eca_enabled=bool(eca_names),
        eca_placement=eca_placement,
        global_head="head.global.classifier.weight" in names,
        ensemble="head.0.classifier.weight" in names,
        head_activation="mfm" if dense_w.shape[1] == 2 * cls_w.shape[0] else "identity",
        eca_kernel_override=kernel,
    )
