"""
Binary and text file formats.

NAMT  tensor block : "NAMT", u32 rank, u32 dims[rank], f64 LE payload (row-major)
NAMF  feature file : "NAMF", u32 rows, u32 cols, f32 LE payload, 24-byte trailer
                     (f32 sample_rate, u32 hop, u32 window, u32 n_mels, u32 version, u32 reserved)
NAMC  checkpoint   : "NAMC", u8 version, u32 json length, JSON metadata,
                     u32 tensor count, then (u16 name length, name, NAMT block) per tensor
NAMK  codebook     : "NAMK", u8 version, u32 K, u32 dim, NAMT block of centroids
"""

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Dict, Iterable, List, Tuple

import numpy as np
from pydantic import BaseModel

from .errors import FormatError

FEATURE_VERSION = 1
CHECKPOINT_VERSION = 1
CODEBOOK_VERSION = 1
MAX_RANK = 8


class FeatureMeta(BaseModel):
    sample_rate: float = 16000.0
    hop: int = 320
    window: int = 800
    n_mels: int = 0


def _take(buf: bytes, offset: int, size: int, what: str) -> Tuple[bytes, int]:
    if offset + size > len(buf):
        raise FormatError(f"truncated {what}: need {size} bytes at offset {offset}")
    return buf[offset:offset + size], offset + size


# ============================================================================
# NAMT tensor blocks
# ============================================================================

def tensor_to_bytes(array: np.ndarray) -> bytes:
    array = np.asarray(array, dtype="<f8")
    header = b"NAMT" + struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape)
    return header + np.ascontiguousarray(array).tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    magic, offset = _take(buf, offset, 4, "tensor magic")
    if magic != b"NAMT":
        raise FormatError(f"bad tensor magic {magic!r}")
    raw, offset = _take(buf, offset, 4, "tensor rank")
    (rank,) = struct.unpack("<I", raw)
    if rank > MAX_RANK:
        raise FormatError(f"tensor rank {rank} exceeds {MAX_RANK}")
    raw, offset = _take(buf, offset, 4 * rank, "tensor dims")
    dims = struct.unpack(f"<{rank}I", raw)
    count = int(np.prod(dims)) if rank else 1
    raw, offset = _take(buf, offset, 8 * count, "tensor payload")
    array = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)
    return array, offset


# ============================================================================
# NAMF feature files
# ============================================================================

def write_features(path: Path, frames: np.ndarray, meta: FeatureMeta) -> None:
    frames = np.atleast_2d(np.asarray(frames, dtype="<f4"))
    rows, cols = frames.shape
    trailer = struct.pack(
        "<fIIIII", meta.sample_rate, meta.hop, meta.window, meta.n_mels or cols, FEATURE_VERSION, 0
    )
    Path(path).write_bytes(b"NAMF" + struct.pack("<II", rows, cols) + frames.tobytes() + trailer)


def read_features(path: Path) -> Tuple[np.ndarray, FeatureMeta]:
    buf = Path(path).read_bytes()
    magic, offset = _take(buf, 0, 4, "feature magic")
    if magic != b"NAMF":
        raise FormatError(f"{path}: bad feature magic {magic!r}")
    raw, offset = _take(buf, offset, 8, "feature header")
    rows, cols = struct.unpack("<II", raw)
    raw, offset = _take(buf, offset, 4 * rows * cols, "feature payload")
    frames = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(rows, cols)
    raw, offset = _take(buf, offset, 24, "feature trailer")
    sample_rate, hop, window, n_mels, version, _ = struct.unpack("<fIIIII", raw)
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported feature version {version}")
    if offset != len(buf):
        raise FormatError(f"{path}: {len(buf) - offset} trailing bytes")
    return frames, FeatureMeta(sample_rate=sample_rate, hop=hop, window=window, n_mels=n_mels)


# ============================================================================
# NAMC checkpoints
# ============================================================================

def write_checkpoint(path: Path, metadata: Dict[str, Any], tensors: Dict[str, np.ndarray]) -> None:
    meta = json.dumps(metadata, sort_keys=True).encode()
    parts = [b"NAMC", struct.pack("<BI", CHECKPOINT_VERSION, len(meta)), meta]
    parts.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        encoded = name.encode()
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(tensor_to_bytes(tensors[name]))
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path: Path) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    magic, offset = _take(buf, 0, 4, "checkpoint magic")
    if magic != b"NAMC":
        raise FormatError(f"{path}: bad checkpoint magic {magic!r}")
    raw, offset = _take(buf, offset, 5, "checkpoint header")
    version, meta_len = struct.unpack("<BI", raw)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    raw, offset = _take(buf, offset, meta_len, "checkpoint metadata")
    try:
        metadata = json.loads(raw.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unreadable checkpoint metadata") from e
    raw, offset = _take(buf, offset, 4, "tensor count")
    (count,) = struct.unpack("<I", raw)
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        raw, offset = _take(buf, offset, 2, "tensor name length")
        (name_len,) = struct.unpack("<H", raw)
        raw, offset = _take(buf, offset, name_len, "tensor name")
        tensors[raw.decode()], offset = tensor_from_bytes(buf, offset)
    return metadata, tensors


# ============================================================================
# NAMK codebooks
# ============================================================================

def write_codebook(path: Path, centroids: np.ndarray) -> None:
    k, dim = centroids.shape
    Path(path).write_bytes(
        b"NAMK" + struct.pack("<BII", CODEBOOK_VERSION, k, dim) + tensor_to_bytes(centroids)
    )


def read_codebook(path: Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    magic, offset = _take(buf, 0, 4, "codebook magic")
    if magic != b"NAMK":
        raise FormatError(f"{path}: bad codebook magic {magic!r}")
    raw, offset = _take(buf, offset, 9, "codebook header")
    version, k, dim = struct.unpack("<BII", raw)
    if version != CODEBOOK_VERSION:
        raise FormatError(f"{path}: unsupported codebook version {version}")
    centroids, _ = tensor_from_bytes(buf, offset)
    if centroids.shape != (k, dim):
        raise FormatError(f"{path}: header says {(k, dim)}, block holds {centroids.shape}")
    return centroids


# ============================================================================
# JSON helpers
# ============================================================================

def write_jsonl(path: Path, records: Iterable[BaseModel]) -> None:
    lines = [json.dumps(r.model_dump(mode="json"), sort_keys=True) for r in records]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_jsonl(path: Path) -> List[Dict[str, Any]]:
    records = []
    for number, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}:{number}: invalid JSON") from e
    return records


def write_json(path: Path, payload: Any) -> None:
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def file_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()
