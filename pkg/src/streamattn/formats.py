"""Binary formats: RSV raw frame streams and E2EW checkpoints."""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

RSV_MAGIC = b"RSV1"
CKPT_MAGIC = b"E2EW"
CKPT_VERSION = 1


class FormatError(ValueError):
    pass


# ----------------------------------------------------------------------- RSV


def encode_rsv(frames: np.ndarray) -> bytes:
    """``(frames, H, W, 3)`` uint8 -> RSV bytes."""
    frames = np.asarray(frames)
    if frames.dtype != np.uint8:
        raise FormatError(f"RSV frames must be uint8, got {frames.dtype}")
    if frames.ndim != 4 or frames.shape[3] != 3:
        raise FormatError(f"RSV frames must have shape (n, H, W, 3), got {frames.shape}")
    n, h, w, c = frames.shape
    return RSV_MAGIC + struct.pack("<4I", w, h, c, n) + np.ascontiguousarray(frames).tobytes()


def decode_rsv(buf: bytes) -> np.ndarray:
    if len(buf) < 4 or buf[:4] != RSV_MAGIC:
        raise FormatError("bad RSV magic at offset 0")
    if len(buf) < 20:
        raise FormatError(f"truncated RSV header: need 20 bytes, file ends at offset {len(buf)}")
    w, h, c, n = struct.unpack_from("<4I", buf, 4)
    if c != 3:
        raise FormatError(f"RSV channels must be 3, got {c} at offset 12")
    size = n * h * w * c
    if len(buf) < 20 + size:
        raise FormatError(
            f"truncated RSV payload: expected {20 + size} bytes, missing data from offset {len(buf)}")
    if len(buf) > 20 + size:
        raise FormatError(f"trailing bytes after RSV payload at offset {20 + size}")
    return np.frombuffer(buf, dtype=np.uint8, offset=20, count=size).reshape(n, h, w, c).copy()


def write_rsv(path, frames: np.ndarray) -> None:
    Path(path).write_bytes(encode_rsv(frames))


def read_rsv(path) -> np.ndarray:
    return decode_rsv(Path(path).read_bytes())


def to_unit(frames_u8: np.ndarray) -> np.ndarray:
    return frames_u8.astype(np.float64) / 255.0


def to_uint8(frames: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(frames) * 255.0), 0, 255).astype(np.uint8)


def chunk_frames(frames: np.ndarray, tau: int) -> np.ndarray:
    """``(n*tau, H, W, 3)`` -> ``(n, tau, H, W, 3)``; trailing partial chunk dropped."""
    n = frames.shape[0] // tau
    return frames[: n * tau].reshape(n, tau, *frames.shape[1:])


# ---------------------------------------------------------------- checkpoint


def encode_checkpoint(weights: dict[str, np.ndarray]) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(weights))]
    for name, arr in weights.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic at offset 0")
    if len(buf) < 12:
        raise FormatError("truncated checkpoint header")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"unknown checkpoint version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * size > len(buf):
                raise FormatError(f"truncated tensor {name!r} at offset {pos}")
            if name in out:
                raise FormatError(f"duplicate tensor name {name!r}")
            vals = np.frombuffer(buf, dtype="<f4", count=size, offset=pos)
            out[name] = vals.astype(np.float64).reshape(shape)
            pos += 4 * size
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint at offset {pos}") from exc
    if pos != len(buf):
        raise FormatError(f"trailing bytes after checkpoint at offset {pos}")
    return out


def save_checkpoint(path, weights: dict[str, np.ndarray]) -> None:
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(encode_checkpoint(weights))
    os.replace(tmp, path)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())
