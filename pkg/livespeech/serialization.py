"""
Little-endian binary formats.

Codebooks (RVQ1):
    "RVQ1" | u32 Q | u32 K | u32 D | u32 zero_reserved | Q*K*D f32, row-major

Code grids (GRID):
    "GRID" | u32 Q | u32 T | u32 K | u32 flags | codes as u16, row-major
    flags bit 0 marks a delayed (shifted) grid: the payload then holds
    Q*(T+Q-1) codes and PAD (= K) is allowed outside the diagonal band.

Checkpoints (LSPC):
    "LSPC" | u32 version | u32 config_len | config JSON (utf-8)
    | u32 n_tensors | per tensor:
        u32 name_len | name | u8 dtype (0 = f32, 1 = f64) | u32 rank
        | u32 extents[rank] | u64 payload_len | payload | u32 crc32(payload)
"""

import json
import logging
import os
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Union

import numpy as np

from .codec import CodeGrid, Codebooks
from .config import RunConfig
from .exceptions import CheckpointError, FormatError, ShapeError, ValidationError
from .model import ModelConfig, Parameters
from .patterns import ShiftedGrid, validate_shifted
from .utils import ensure_directory_exists, format_bytes

logger = logging.getLogger("livespeech.serialization")

RVQ_MAGIC = b"RVQ1"
GRID_MAGIC = b"GRID"
CKPT_MAGIC = b"LSPC"
CKPT_VERSION = 1
GRID_SHIFTED = 0x1

_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class _Reader:
    """Sequential reader that reports truncation with the field being read."""

    def __init__(self, data: bytes, path: str, error=FormatError):
        self.data = data
        self.path = path
        self.offset = 0
        self.error = error

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise self.error(f"{self.path}: file truncated while reading {what}")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def u8(self, what: str) -> int:
        return struct.unpack("<B", self.take(1, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def magic(self, expected: bytes):
        found = self.take(len(expected), "magic")
        if found != expected:
            raise self.error(f"{self.path}: bad magic {found!r}, expected {expected!r}")

    def finish(self):
        if self.offset != len(self.data):
            raise self.error(f"{self.path}: {len(self.data) - self.offset} unexpected trailing bytes")


def _read_bytes(path: str, error=FormatError) -> bytes:
    try:
        with open(path, 'rb') as f:
            return f.read()
    except OSError as e:
        raise error(f"Cannot read {path}: {e}")


def _write_bytes(path: str, payload: bytes):
    ensure_directory_exists(path)
    with open(path, 'wb') as f:
        f.write(payload)


# ---------------------------------------------------------------------------
# Codebooks and code grids
# ---------------------------------------------------------------------------

def write_codebooks(cb: Codebooks, path: str):
    header = RVQ_MAGIC + struct.pack("<4I", cb.n_codebooks, cb.codebook_size, cb.dim, int(cb.zero_reserved))
    _write_bytes(path, header + cb.stages.astype("<f4").tobytes())
    logger.debug(f"Wrote {cb.n_codebooks}x{cb.codebook_size}x{cb.dim} codebooks to {path}")


def read_codebooks(path: str) -> Codebooks:
    reader = _Reader(_read_bytes(path), path)
    reader.magic(RVQ_MAGIC)
    n_q, n_k, dim = reader.u32("Q"), reader.u32("K"), reader.u32("D")
    flag = reader.u32("zero_reserved")
    if flag not in (0, 1):
        raise FormatError(f"{path}: zero_reserved flag must be 0 or 1, got {flag}")
    values = np.frombuffer(reader.take(4 * n_q * n_k * dim, "codewords"), dtype="<f4")
    reader.finish()
    return Codebooks(values.reshape(n_q, n_k, dim).astype(np.float32), zero_reserved=bool(flag))


def write_grid(grid: Union[CodeGrid, ShiftedGrid], path: str):
    if grid.codebook_size + 1 > np.iinfo(np.uint16).max:
        raise FormatError(f"write_grid: codebook size {grid.codebook_size} does not fit u16 codes")
    shifted = isinstance(grid, ShiftedGrid)
    n_frames = grid.n_frames
    header = GRID_MAGIC + struct.pack("<4I", grid.n_codebooks, n_frames, grid.codebook_size,
                                      GRID_SHIFTED if shifted else 0)
    _write_bytes(path, header + grid.codes.astype("<u2").tobytes())


def read_grid(path: str) -> Union[CodeGrid, ShiftedGrid]:
    """Read a GRID file; returns a ShiftedGrid when the shifted flag is set."""
    reader = _Reader(_read_bytes(path), path)
    reader.magic(GRID_MAGIC)
    n_q, n_t, n_k = reader.u32("Q"), reader.u32("T"), reader.u32("K")
    flags = reader.u32("flags")
    if flags & ~GRID_SHIFTED:
        raise FormatError(f"{path}: unknown grid flags {flags:#x}")
    shifted = bool(flags & GRID_SHIFTED)
    n_cols = n_t + n_q - 1 if shifted else n_t
    codes = np.frombuffer(reader.take(2 * n_q * n_cols, "codes"), dtype="<u2").astype(np.int64)
    reader.finish()
    codes = codes.reshape(n_q, n_cols)
    if shifted:
        grid = ShiftedGrid(codes, n_k, n_t)
        try:
            validate_shifted(grid)
        except ValidationError as e:
            raise FormatError(f"{path}: {e}")
        return grid
    if np.any(codes >= n_k):
        raise FormatError(f"{path}: unshifted grid contains codes >= K = {n_k}")
    return CodeGrid(codes, n_k)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: Parameters
    run: RunConfig
    step: int = 0
    optim_state: Dict[str, np.ndarray] = field(default_factory=OrderedDict)
    extra: Dict[str, Any] = field(default_factory=dict)


def _encode_tensor(name: str, array: np.ndarray) -> bytes:
    dtype = np.dtype(array.dtype)
    if dtype not in _DTYPE_TAGS:
        raise CheckpointError(f"save_checkpoint: tensor {name} has unsupported dtype {dtype}")
    encoded = name.encode("utf-8")
    payload = np.ascontiguousarray(array).astype(_TAG_DTYPES[_DTYPE_TAGS[dtype]]).tobytes()
    parts = [
        struct.pack("<I", len(encoded)), encoded,
        struct.pack("<BI", _DTYPE_TAGS[dtype], array.ndim),
        struct.pack(f"<{array.ndim}I", *array.shape),
        struct.pack("<Q", len(payload)), payload,
        struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF),
    ]
    return b"".join(parts)


def save_checkpoint(path: str, params: Parameters, run: RunConfig, step: int = 0,
                    optim_state: Optional[Dict[str, np.ndarray]] = None,
                    extra: Optional[Dict[str, Any]] = None):
    """Write parameters, run config and optional optimizer state to an LSPC file."""
    if params.config != run.model:
        raise CheckpointError("save_checkpoint: parameters were built for a different model config")
    block = json.dumps({"run": run.to_dict(), "step": int(step), "extra": extra or {}},
                       sort_keys=True, separators=(",", ":")).encode("utf-8")
    tensors = list(params.arrays().items()) + list((optim_state or {}).items())
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(block)), block, struct.pack("<I", len(tensors))]
    parts.extend(_encode_tensor(name, array) for name, array in tensors)
    # atomic replace
    tmp_path = f"{path}.tmp"
    payload = b"".join(parts)
    _write_bytes(tmp_path, payload)
    os.replace(tmp_path, path)
    logger.info(f"Saved checkpoint at step {step} to {path} ({format_bytes(len(payload))})")


def _config_diff(expected: ModelConfig, stored: ModelConfig):
    a, b = expected.to_dict(), stored.to_dict()
    return sorted(key for key in a if a[key] != b.get(key))


def load_checkpoint(path: str, expected_model: Optional[ModelConfig] = None) -> Checkpoint:
    """
    Read an LSPC file.

    Raises CheckpointError on bad magic or version, truncation, checksum
    mismatch, tensors that disagree with the stored config, or a stored model
    config that differs from expected_model (naming the differing fields).
    """
    reader = _Reader(_read_bytes(path, CheckpointError), path, CheckpointError)
    reader.magic(CKPT_MAGIC)
    version = reader.u32("version")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}, expected {CKPT_VERSION}")
    block_len = reader.u32("config length")
    try:
        block = json.loads(reader.take(block_len, "config block").decode("utf-8"))
        run = RunConfig.from_dict(block["run"])
        step = int(block["step"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: invalid config block: {e}")

    if expected_model is not None and expected_model != run.model:
        fields = ", ".join(_config_diff(expected_model, run.model))
        raise CheckpointError(f"{path}: model config mismatch in fields: {fields}")

    tensors: Dict[str, np.ndarray] = OrderedDict()
    for index in range(reader.u32("tensor count")):
        name = reader.take(reader.u32(f"tensor {index} name length"), f"tensor {index} name").decode("utf-8")
        tag = reader.u8(f"{name} dtype")
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"{path}: tensor {name} has unknown dtype tag {tag}")
        rank = reader.u32(f"{name} rank")
        shape = struct.unpack(f"<{rank}I", reader.take(4 * rank, f"{name} extents"))
        payload_len = reader.u64(f"{name} payload length")
        expected_len = int(np.prod(shape, dtype=np.int64)) * _TAG_DTYPES[tag].itemsize
        if payload_len != expected_len:
            raise CheckpointError(f"{path}: tensor {name} declares {payload_len} bytes, shape {shape} needs {expected_len}")
        payload = reader.take(payload_len, f"{name} payload")
        crc = reader.u32(f"{name} checksum")
        if zlib.crc32(payload) & 0xFFFFFFFF != crc:
            raise CheckpointError(f"{path}: checksum mismatch in tensor {name}")
        tensors[name] = np.frombuffer(payload, dtype=_TAG_DTYPES[tag]).reshape(shape).astype(_TAG_DTYPES[tag].newbyteorder("="))
    reader.finish()

    param_arrays = OrderedDict((k, v) for k, v in tensors.items() if not k.startswith("optim."))
    optim_state = OrderedDict((k, v) for k, v in tensors.items() if k.startswith("optim."))
    try:
        params = Parameters.from_arrays(run.model, param_arrays)
    except ShapeError as e:
        raise CheckpointError(f"{path}: {e}")
    return Checkpoint(params, run, step, optim_state, block.get("extra", {}))
