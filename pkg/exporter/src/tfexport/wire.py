"""Independent implementation of the engine's NWA/FTV wire format.

This module deliberately does not import the engine package: the binary
layout documented by the engine is the contract, and implementing it here
keeps the exporter honest about that contract. All integers little-endian.

Layout: magic (4) | u16 version | 65-byte config record | u32 tensor count |
records of (u16 name_len, name, u8 kind, u8 rank, u32 dims[rank],
scale payload, data payload).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

NWA_MAGIC = b"NWA1"
FTV_MAGIC = b"FTV1"
FORMAT_VERSION = 1

KIND_F32 = 0
KIND_TERN2 = 1
KIND_TERN2_PC = 2
KIND_I8 = 3
KIND_F16 = 4

_CONFIG_STRUCT = struct.Struct("<7I3fB6f")
_FLAG_LAYERSCALE = 1

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class ModelConfig:
    """The subset of the engine config the exporter needs to emit."""

    depth: int
    dim: int
    heads: int
    patch: int
    img_size: int
    in_channels: int = 3
    num_classes: int = 1000
    mlp_ratio: float = 4.0
    eps_ln: float = 1e-6
    eps_w: float = 1e-6
    use_layerscale: bool = False
    norm_mean: tuple = IMAGENET_MEAN
    norm_std: tuple = IMAGENET_STD

    @property
    def tokens(self) -> int:
        return (self.img_size // self.patch) ** 2 + 1

    @property
    def hidden_dim(self) -> int:
        return int(self.mlp_ratio * self.dim)


CONFIGS = {
    "deit_tiny_224": ModelConfig(depth=12, dim=192, heads=3, patch=16, img_size=224),
    "deit_small_224": ModelConfig(depth=12, dim=384, heads=6, patch=16, img_size=224),
    "deit3_small_224": ModelConfig(depth=12, dim=384, heads=6, patch=16,
                                   img_size=224, use_layerscale=True),
    "deit3_small_384": ModelConfig(depth=12, dim=384, heads=6, patch=16,
                                   img_size=384, use_layerscale=True),
}


def canonical_tensor_shapes(config: ModelConfig) -> dict:
    """Canonical name -> shape, in the engine's file order."""
    d, p, c = config.dim, config.patch, config.in_channels
    hd = config.hidden_dim
    out = {
        "patch_embed.weight": (d, c, p, p),
        "patch_embed.bias": (d,),
        "cls_token": (d,),
        "pos_embed": (config.tokens, d),
    }
    for i in range(config.depth):
        b = f"blocks.{i}"
        out[f"{b}.ln1.gamma"] = (d,)
        out[f"{b}.ln1.beta"] = (d,)
        out[f"{b}.attn.qkv.weight"] = (3 * d, d)
        out[f"{b}.attn.qkv.bias"] = (3 * d,)
        out[f"{b}.attn.proj.weight"] = (d, d)
        out[f"{b}.attn.proj.bias"] = (d,)
        out[f"{b}.ln2.gamma"] = (d,)
        out[f"{b}.ln2.beta"] = (d,)
        out[f"{b}.mlp.fc1.weight"] = (hd, d)
        out[f"{b}.mlp.fc1.bias"] = (hd,)
        out[f"{b}.mlp.fc2.weight"] = (d, hd)
        out[f"{b}.mlp.fc2.bias"] = (d,)
        if config.use_layerscale:
            out[f"{b}.ls1.gamma"] = (d,)
            out[f"{b}.ls2.gamma"] = (d,)
    out["norm.gamma"] = (d,)
    out["norm.beta"] = (d,)
    out["head.weight"] = (config.num_classes, d)
    out["head.bias"] = (config.num_classes,)
    return out


def _pack_config(config: ModelConfig) -> bytes:
    return _CONFIG_STRUCT.pack(
        config.depth, config.dim, config.heads, config.patch, config.img_size,
        config.in_channels, config.num_classes,
        config.mlp_ratio, config.eps_ln, config.eps_w,
        _FLAG_LAYERSCALE if config.use_layerscale else 0,
        *config.norm_mean, *config.norm_std,
    )


def write_nwa(tensors: dict, config: ModelConfig, path) -> int:
    """Write canonical-name -> float32 array tensors as an NWA archive."""
    with open(path, "wb") as out:
        out.write(NWA_MAGIC)
        out.write(struct.pack("<H", FORMAT_VERSION))
        out.write(_pack_config(config))
        out.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            out.write(struct.pack("<H", len(encoded)))
            out.write(encoded)
            out.write(struct.pack("<BB", KIND_F32, arr.ndim))
            out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.write(arr.tobytes())
        return out.tell()


@dataclass
class WireTensor:
    name: str
    kind: int
    shape: tuple
    scale: object
    data: np.ndarray


def read_model_file(path) -> tuple[bytes, dict, dict]:
    """Parse an NWA or FTV file; returns (magic, header fields, tensors).

    Trit payloads are returned as raw packed bytes (the exporter never needs
    to unpack them; it only verifies containment and sizes).
    """
    with open(path, "rb") as f:
        blob = f.read()
    magic = blob[:4]
    if magic not in (NWA_MAGIC, FTV_MAGIC):
        raise ValueError(f"unknown magic {magic!r}")
    (version,) = struct.unpack_from("<H", blob, 4)
    header = dict(zip(
        ("depth", "dim", "heads", "patch", "img_size", "in_channels",
         "num_classes", "mlp_ratio", "eps_ln", "eps_w", "flags",
         "m0", "m1", "m2", "s0", "s1", "s2"),
        _CONFIG_STRUCT.unpack_from(blob, 6),
    ))
    header["version"] = version
    pos = 6 + _CONFIG_STRUCT.size
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        kind, rank = struct.unpack_from("<BB", blob, pos)
        pos += 2
        shape = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        n = int(np.prod(shape, dtype=np.int64))
        scale = None
        if kind == KIND_TERN2:
            (scale,) = struct.unpack_from("<f", blob, pos)
            pos += 4
        elif kind == KIND_TERN2_PC:
            scale = np.frombuffer(blob, dtype="<f4", count=shape[0], offset=pos).copy()
            pos += 4 * shape[0]
        if kind == KIND_F32:
            data = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).copy()
            pos += 4 * n
        elif kind == KIND_F16:
            data = np.frombuffer(blob, dtype="<f2", count=n, offset=pos).copy()
            pos += 2 * n
        elif kind == KIND_I8:
            data = np.frombuffer(blob, dtype=np.int8, count=n, offset=pos).copy()
            pos += n
        else:
            nbytes = (n + 3) // 4
            data = np.frombuffer(blob, dtype=np.uint8, count=nbytes, offset=pos).copy()
            pos += nbytes
        tensors[name] = WireTensor(name, kind, tuple(shape),
                                   scale, data if kind in (KIND_TERN2, KIND_TERN2_PC)
                                   else data.reshape(shape))
    if pos != len(blob):
        raise ValueError(f"{len(blob) - pos} trailing bytes in {path}")
    return magic, header, tensors
