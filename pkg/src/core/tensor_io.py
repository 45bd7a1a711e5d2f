"""WT4 v1 tensor file codec.

Layout: magic ``WT4\\0``, four little-endian uint32 dims (N, C, H, W), then
N*C*H*W little-endian float32 values in row-major order.
"""

import hashlib
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from src.core.exceptions import IntegrityError, ShapeError

MAGIC = b"WT4\x00"
HEADER_BYTES = len(MAGIC) + 4 * 4


def encode_wt4(array: np.ndarray) -> bytes:
    """Serialize a rank-4 array to WT4 bytes."""
    array = np.asarray(array)
    if array.ndim != 4:
        raise ShapeError(f"WT4 stores rank-4 tensors, got shape {array.shape}")
    dims = np.asarray(array.shape, dtype="<u4")
    body = np.ascontiguousarray(array, dtype="<f4")
    return MAGIC + dims.tobytes() + body.tobytes()


def decode_wt4(payload: bytes) -> np.ndarray:
    """Parse WT4 bytes into a float32 N x C x H x W array."""
    if len(payload) < HEADER_BYTES or payload[:4] != MAGIC:
        raise IntegrityError("Not a WT4 payload (bad magic or truncated header)")
    dims: Tuple[int, ...] = tuple(int(d) for d in np.frombuffer(payload, dtype="<u4", count=4, offset=4))
    expected = int(np.prod(dims, dtype=np.int64)) * 4
    if len(payload) - HEADER_BYTES != expected:
        raise IntegrityError(
            f"WT4 body has {len(payload) - HEADER_BYTES} bytes, dims {dims} need {expected}"
        )
    values = np.frombuffer(payload, dtype="<f4", offset=HEADER_BYTES)
    return values.reshape(dims).astype(np.float32)


def write_wt4(path: Union[str, Path], array: np.ndarray) -> str:
    """
    Write an array as a WT4 file.

    Args:
        path: Destination file
        array: Rank-4 array (cast to float32)

    Returns:
        sha256 hex digest of the written bytes
    """
    payload = encode_wt4(array)
    Path(path).write_bytes(payload)
    return hashlib.sha256(payload).hexdigest()


def read_wt4(path: Union[str, Path], expected_sha256: str = None) -> np.ndarray:
    """Read a WT4 file, optionally verifying its checksum."""
    path = Path(path)
    if not path.exists():
        raise IntegrityError(f"Tensor file not found: {path}")
    payload = path.read_bytes()
    if expected_sha256 is not None and hashlib.sha256(payload).hexdigest() != expected_sha256:
        raise IntegrityError(f"Checksum mismatch for {path}")
    return decode_wt4(payload)


def as_rank4(array: np.ndarray) -> np.ndarray:
    """Pad a lower-rank parameter array to rank 4 with leading unit dims."""
    array = np.asarray(array)
    if array.ndim > 4:
        raise ShapeError(f"Cannot store rank-{array.ndim} array in WT4")
    return array.reshape((1,) * (4 - array.ndim) + array.shape)
