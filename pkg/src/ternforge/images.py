"""Image input (binary P6 PPM, raw float CHW) and PGM map output.

The engine accepts images already resized to the configured resolution:
either a binary PPM (P6, maxval 255) or a raw float blob with the 8-byte
header magic "RAWF" + u32 side length, followed by C*side*side little-endian
float32 values in CHW order holding unnormalized [0, 1] channel data.
Per-channel mean/std normalization (constants carried in the model config)
is applied by the loader to both formats.
"""
from __future__ import annotations

import struct

import numpy as np

from .config import VitConfig
from .errors import BadMagicError, SizeMismatchError, TruncatedError

RAWF_MAGIC = b"RAWF"


def _normalize(chw: np.ndarray, config: VitConfig) -> np.ndarray:
    mean = np.asarray(config.norm_mean, dtype=np.float32)[:, None, None]
    std = np.asarray(config.norm_std, dtype=np.float32)[:, None, None]
    return ((chw - mean) / std).astype(np.float32)


def _read_ppm_tokens(blob: bytes, count: int) -> tuple[list, int]:
    """Parse `count` whitespace/comment-delimited header tokens; returns (tokens, offset)."""
    tokens = []
    i = 0
    while len(tokens) < count:
        if i >= len(blob):
            raise TruncatedError("PPM header ended early")
        ch = blob[i:i + 1]
        if ch == b"#":
            while i < len(blob) and blob[i:i + 1] != b"\n":
                i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(blob) and not blob[j:j + 1].isspace():
                j += 1
            tokens.append(blob[i:j])
            i = j
    return tokens, i + 1  # single whitespace after maxval precedes binary data


def read_ppm(path) -> np.ndarray:
    """Binary P6 PPM -> float32 [3, H, W] in [0, 1]."""
    with open(path, "rb") as f:
        blob = f.read()
    tokens, offset = _read_ppm_tokens(blob, 4)
    if tokens[0] != b"P6":
        raise BadMagicError(f"not a binary PPM: {tokens[0]!r}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise SizeMismatchError(f"PPM maxval {maxval}, only 255 supported")
    need = w * h * 3
    data = blob[offset:offset + need]
    if len(data) < need:
        raise TruncatedError(f"PPM data {len(data)} bytes, need {need}")
    arr = np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)
    return (arr.transpose(2, 0, 1).astype(np.float32) / 255.0)


def write_ppm(path, rgb: np.ndarray) -> None:
    """uint8 [H, W, 3] -> binary P6 file."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb.tobytes())


def read_rawf(path, channels: int) -> np.ndarray:
    """RAWF blob -> float32 [C, side, side]."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 8:
        raise TruncatedError("RAWF header")
    if blob[:4] != RAWF_MAGIC:
        raise BadMagicError(f"not RAWF: {blob[:4]!r}")
    (side,) = struct.unpack("<I", blob[4:8])
    need = channels * side * side * 4
    if len(blob) != 8 + need:
        raise SizeMismatchError(f"RAWF payload {len(blob) - 8} bytes, need {need}")
    arr = np.frombuffer(blob, dtype="<f4", offset=8)
    return arr.reshape(channels, side, side).copy()


def write_rawf(path, chw: np.ndarray) -> None:
    chw = np.ascontiguousarray(chw, dtype="<f4")
    with open(path, "wb") as f:
        f.write(RAWF_MAGIC)
        f.write(struct.pack("<I", chw.shape[1]))
        f.write(chw.tobytes())


def load_image(path, config: VitConfig) -> np.ndarray:
    """Read a PPM or RAWF image, validate its size, normalize per channel."""
    name = str(path).lower()
    if name.endswith(".ppm"):
        chw = read_ppm(path)
    else:
        chw = read_rawf(path, config.in_channels)
    if chw.shape != (config.in_channels, config.img_size, config.img_size):
        raise SizeMismatchError(
            f"image {chw.shape}, config wants "
            f"({config.in_channels}, {config.img_size}, {config.img_size})"
        )
    return _normalize(chw, config)


def write_pgm(path, gray: np.ndarray) -> None:
    """float [h, w] in [0, 1] -> 8-bit binary P5 file."""
    arr = np.clip(np.asarray(gray, dtype=np.float32), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())
