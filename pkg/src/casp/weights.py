"""Weight initialization and the binary weight container.

Container layout (little endian)::

    magic   8 bytes  b"CASPWTS\\0"
    version u32
    count   u32
    count x entry:
        name_len u16, name utf-8
        ndim u8, dims u32 * ndim
        payload float32 * prod(dims)
    crc32   u32 over every preceding byte

Entries are written in sorted name order so equal weights give equal bytes.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig, WeightError, init_high_weights, init_low_weights
from .cascade import init_rsca_weights
from .interaction import init_interaction_weights
from .refine import init_fpn_weights
from .rng import make_rng
from .tensor import DTYPE

MAGIC = b"CASPWTS\0"
VERSION = 1


class WeightFileError(ValueError):
    """The container is truncated, corrupted, or not a weight file."""


def init_weights(variant: str = "full", seed: int = 0, n16_blocks: int = 2, n8_blocks: int = 2) -> dict[str, np.ndarray]:
    """Seeded random weights for every stage. Demo only: no training is involved."""
    cfg = BackboneConfig.for_variant(variant)
    weights = {}
    weights.update(init_low_weights(cfg, make_rng(seed, "weights", "low")))
    weights.update(init_high_weights(cfg, make_rng(seed, "weights", "high")))
    weights.update(init_interaction_weights(n16_blocks, cfg.high_channels, make_rng(seed, "weights", "inter")))
    weights.update(init_fpn_weights(cfg.low_channels, cfg.high_channels, make_rng(seed, "weights", "fpn")))
    weights.update(init_rsca_weights(n8_blocks, cfg.low_channels[2], make_rng(seed, "weights", "rsca")))
    return weights


def count_params(weights: dict) -> int:
    return int(sum(np.asarray(v).size for v in weights.values()))


def encode_weights(weights: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(weights))]
    for name in sorted(weights):
        arr = np.asarray(weights[name], dtype="<f4")  # keeps 0-d shapes, unlike ascontiguousarray
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"entry {name!r} cannot be encoded")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_weights(data: bytes) -> dict[str, np.ndarray]:
    if len(data) < len(MAGIC) + 12:
        raise WeightFileError("file too short for a weight container")
    if data[: len(MAGIC)] != MAGIC:
        raise WeightFileError("bad magic: not a weight container")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise WeightFileError("checksum mismatch: weight payload is corrupted")
    version, count = struct.unpack_from("<II", body, len(MAGIC))
    if version != VERSION:
        raise WeightFileError(f"unsupported container version {version}")
    pos = len(MAGIC) + 8
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64)) * 4
            if pos + size > len(body):
                raise WeightFileError(f"entry {name!r} runs past the end of the file")
            if name in out:
                raise WeightFileError(f"duplicate entry {name!r}")
            out[name] = np.frombuffer(body, "<f4", size // 4, pos).reshape(shape).astype(DTYPE)
            pos += size
    except (struct.error, UnicodeDecodeError) as exc:
        raise WeightFileError(f"malformed entry table: {exc}") from None
    if pos != len(body):
        raise WeightFileError("trailing bytes after the last entry")
    return out


def save_weights(path: str | Path, weights: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_weights(weights))


def load_weights(path: str | Path) -> dict[str, np.ndarray]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise WeightFileError(f"cannot read weights: {exc}") from None
    return decode_weights(data)


def validate_weights(weights: dict, variant: str = "full", n16_blocks: int = 2, n8_blocks: int = 2) -> None:
    """Raise :class:`WeightError` unless ``weights`` has every parameter the pipeline needs, with the right shape."""
    template = init_weights(variant, 0, n16_blocks, n8_blocks)
    missing = sorted(set(template) - set(weights))
    if missing:
        raise WeightError(f"{len(missing)} parameters missing, e.g. {missing[0]!r}")
    for name, ref in template.items():
        if tuple(np.shape(weights[name])) != ref.shape:
            raise WeightError(f"parameter {name!r} has shape {np.shape(weights[name])}, expected {ref.shape}")
