"""2-bit trit packing and the FTV / NWA binary model formats.

Trit encoding: four weights per byte, trit i in bits [2i mod 8, 2i mod 8 + 1]
of byte i//4, little-endian within the byte. Bit pairs: 00 -> 0, 01 -> +1,
10 -> -1; 11 is invalid. Unused trailing slots of the final byte are 00.

File layout (all integers little-endian):

    magic            4 bytes   "FTV1" (packed model) or "NWA1" (fp32 archive)
    format_version   u16
    config record    65 bytes  (see _CONFIG_STRUCT)
    tensor_count     u32
    tensor records:
        name_len u16, name utf-8
        kind     u8   0=F32  1=TERN2 (per-tensor scale)  2=TERN2 per-channel
                      3=I8   4=F16
        rank     u8, dims u32 * rank   (rank <= 4)
        scales   kind 1: one f32; kind 2: dims[0] f32, contiguous
        payload  F32: 4n | F16: 2n | I8: n | TERN2: ceil(n/4) packed trits

NWA files use the identical record structure restricted to kind F32.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .config import (
    PLAN_FP32,
    PLANS,
    STORE_F16,
    STORE_F32,
    STORE_TERN,
    STORE_TERN_PC,
    TensorSpec,
    VitConfig,
    plan_storage,
    tensor_specs,
)
from .errors import (
    BadMagicError,
    BadVersionError,
    CorruptTritError,
    DuplicateTensorError,
    InvalidTritError,
    ShapeMismatchError,
    SizeMismatchError,
    TruncatedError,
)

FTV_MAGIC = b"FTV1"
NWA_MAGIC = b"NWA1"
FORMAT_VERSION = 1

KIND_F32 = 0
KIND_TERN2 = 1
KIND_TERN2_PC = 2
KIND_I8 = 3
KIND_F16 = 4

_STORE_TO_KIND = {
    STORE_F32: KIND_F32,
    STORE_TERN: KIND_TERN2,
    STORE_TERN_PC: KIND_TERN2_PC,
    STORE_F16: KIND_F16,
}

MAX_RANK = 4

# code -1/0/+1 (indexed at code+1) -> bit pair
_CODE_TO_BITS = np.array([2, 0, 1], dtype=np.uint8)
# bit pair -> code; slot 3 is the invalid marker (checked before lookup)
_BITS_TO_CODE = np.array([0, 1, -1, 0], dtype=np.int8)


@dataclass
class PackedTritBuffer:
    """Packed 2-bit trit codes plus the logical element count."""

    data: bytes
    logical_len: int

    def __post_init__(self):
        expected = (self.logical_len + 3) // 4
        if len(self.data) != expected:
            raise SizeMismatchError(
                f"trit buffer holds {len(self.data)} bytes, need {expected} "
                f"for {self.logical_len} trits"
            )


_SLOT_SHIFTS = np.array([0, 2, 4, 6], dtype=np.uint8)


def pack_trits(codes) -> PackedTritBuffer:
    """Pack a sequence of {-1, 0, +1} codes at 2 bits each, 4 per byte."""
    arr = np.ascontiguousarray(codes, dtype=np.int8).reshape(-1)
    n = arr.size
    if n and (np.abs(arr) > 1).any():
        bad = int(np.argmax(np.abs(arr) > 1))
        raise InvalidTritError(f"code {arr[bad]} at index {bad}")
    bits = np.zeros((n + 3) // 4 * 4, dtype=np.uint8)
    bits[:n] = _CODE_TO_BITS[arr + 1]  # codes validated, so arr+1 is 0..2
    quads = bits.reshape(-1, 4)
    packed = (quads[:, 0] | (quads[:, 1] << 2)) | ((quads[:, 2] << 4) | (quads[:, 3] << 6))
    return PackedTritBuffer(packed.tobytes(), n)


def unpack_trits(buf: PackedTritBuffer) -> np.ndarray:
    """Inverse of pack_trits; rejects 11 bit pairs inside the logical range."""
    raw = np.frombuffer(buf.data, dtype=np.uint8)
    n = buf.logical_len
    slots = ((raw[:, None] >> _SLOT_SHIFTS) & 3).reshape(-1)[:n]
    invalid = slots == 3
    if invalid.any():
        i = int(np.argmax(invalid))
        raise CorruptTritError(f"11 bit pair at byte {i // 4}, slot {i % 4}")
    return _BITS_TO_CODE[slots]


# ---------------------------------------------------------------------------
# Tensor records and containers
# ---------------------------------------------------------------------------

# depth dim heads patch img in_ch classes | mlp_ratio eps_ln eps_w | flags | mean std
_CONFIG_STRUCT = struct.Struct("<7I3fB6f")
_FLAG_LAYERSCALE = 1
_FLAG_PRE_RMSNORM = 2
_FLAG_FP32_LS = 4
_FLAG_SPLIT_QKV = 8


def _pack_config(config: VitConfig) -> bytes:
    flags = (
        (_FLAG_LAYERSCALE if config.use_layerscale else 0)
        | (_FLAG_PRE_RMSNORM if config.pre_quant_rmsnorm else 0)
        | (_FLAG_FP32_LS if config.fp32_layerscale else 0)
        | (_FLAG_SPLIT_QKV if config.split_qkv_scales else 0)
    )
    return _CONFIG_STRUCT.pack(
        config.depth, config.dim, config.heads, config.patch, config.img_size,
        config.in_channels, config.num_classes,
        config.mlp_ratio, config.eps_ln, config.eps_w,
        flags, *config.norm_mean, *config.norm_std,
    )


def _unpack_config(blob: bytes) -> VitConfig:
    (depth, dim, heads, patch, img, in_ch, classes,
     mlp_ratio, eps_ln, eps_w, flags,
     m0, m1, m2, s0, s1, s2) = _CONFIG_STRUCT.unpack(blob)
    return VitConfig(
        depth=depth, dim=dim, heads=heads, mlp_ratio=mlp_ratio, patch=patch,
        img_size=img, in_channels=in_ch, num_classes=classes,
        use_layerscale=bool(flags & _FLAG_LAYERSCALE),
        eps_ln=eps_ln, eps_w=eps_w,
        pre_quant_rmsnorm=bool(flags & _FLAG_PRE_RMSNORM),
        fp32_layerscale=bool(flags & _FLAG_FP32_LS),
        split_qkv_scales=bool(flags & _FLAG_SPLIT_QKV),
        norm_mean=(m0, m1, m2), norm_std=(s0, s1, s2),
    )


@dataclass
class TensorRecord:
    """One named tensor as stored in an FTV/NWA file.

    ``data`` is float32 (F32), float16 (F16), or int8 (I8 values, or
    TERN2 codes in {-1, 0, +1} kept unpacked in memory).
    """

    name: str
    kind: int
    shape: tuple
    data: np.ndarray
    scale: float | np.ndarray | None = None

    @property
    def elements(self) -> int:
        n = 1
        for s in self.shape:
            n *= s
        return n

    def scale_bytes(self) -> int:
        if self.kind == KIND_TERN2:
            return 4
        if self.kind == KIND_TERN2_PC:
            return 4 * self.shape[0]
        return 0

    def payload_bytes(self) -> int:
        n = self.elements
        if self.kind == KIND_F32:
            return 4 * n
        if self.kind == KIND_F16:
            return 2 * n
        if self.kind == KIND_I8:
            return n
        return (n + 3) // 4

    def dequantized(self) -> np.ndarray:
        """Float32 view of the record regardless of storage kind."""
        if self.kind in (KIND_F32, KIND_F16):
            return self.data.astype(np.float32)
        if self.kind == KIND_I8:
            return self.data.astype(np.float32)
        codes = self.data.astype(np.float32)
        if self.kind == KIND_TERN2:
            return codes * np.float32(self.scale)
        expand = (slice(None),) + (None,) * (codes.ndim - 1)
        return codes * np.asarray(self.scale, dtype=np.float32)[expand]


@dataclass
class ModelContainer:
    """In-memory image of an FTV or NWA file."""

    magic: bytes
    config: VitConfig
    tensors: dict = field(default_factory=dict)  # name -> TensorRecord, file order
    version: int = FORMAT_VERSION

    def add(self, record: TensorRecord) -> None:
        if record.name in self.tensors:
            raise DuplicateTensorError(record.name)
        self.tensors[record.name] = record

    def payload_bytes(self) -> int:
        return sum(t.scale_bytes() + t.payload_bytes() for t in self.tensors.values())

    def __getitem__(self, name: str) -> TensorRecord:
        return self.tensors[name]


def _write_record(out, rec: TensorRecord) -> None:
    name = rec.name.encode("utf-8")
    if len(rec.shape) > MAX_RANK:
        raise SizeMismatchError(f"{rec.name}: rank {len(rec.shape)} > {MAX_RANK}")
    out.write(struct.pack("<H", len(name)))
    out.write(name)
    out.write(struct.pack("<BB", rec.kind, len(rec.shape)))
    out.write(struct.pack(f"<{len(rec.shape)}I", *rec.shape))
    if rec.kind == KIND_TERN2:
        out.write(struct.pack("<f", float(rec.scale)))
    elif rec.kind == KIND_TERN2_PC:
        scales = np.ascontiguousarray(rec.scale, dtype="<f4")
        if scales.shape != (rec.shape[0],):
            raise ShapeMismatchError(
                f"{rec.name}: {scales.shape[0]} scales for {rec.shape[0]} channels"
            )
        out.write(scales.tobytes())
    if rec.kind == KIND_F32:
        payload = np.ascontiguousarray(rec.data, dtype="<f4").tobytes()
    elif rec.kind == KIND_F16:
        payload = np.ascontiguousarray(rec.data, dtype="<f2").tobytes()
    elif rec.kind == KIND_I8:
        payload = np.ascontiguousarray(rec.data, dtype=np.int8).tobytes()
    else:
        payload = pack_trits(rec.data).data
    if len(payload) != rec.payload_bytes():
        raise SizeMismatchError(
            f"{rec.name}: payload {len(payload)} bytes, expected {rec.payload_bytes()}"
        )
    out.write(payload)


def write_container(container: ModelContainer, path) -> int:
    """Serialize to disk; returns bytes written."""
    with open(path, "wb") as out:
        out.write(container.magic)
        out.write(struct.pack("<H", container.version))
        out.write(_pack_config(container.config))
        out.write(struct.pack("<I", len(container.tensors)))
        for rec in container.tensors.values():
            _write_record(out, rec)
        return out.tell()


class _Cursor:
    """Byte cursor raising TRUNCATED when a read runs past the end."""

    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedError(
                f"need {n} bytes at offset {self.pos}, file has {len(self.blob)}"
            )
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, st: struct.Struct):
        return st.unpack(self.take(st.size))


_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_F32 = struct.Struct("<f")
_KIND_RANK = struct.Struct("<BB")


def read_container(path, expected_magic: bytes) -> ModelContainer:
    with open(path, "rb") as f:
        blob = f.read()
    cur = _Cursor(blob)
    magic = cur.take(4)
    if magic != expected_magic:
        raise BadMagicError(f"got {magic!r}, expected {expected_magic!r}")
    (version,) = cur.unpack(_U16)
    if version != FORMAT_VERSION:
        raise BadVersionError(f"version {version}, supported {FORMAT_VERSION}")
    config = _unpack_config(cur.take(_CONFIG_STRUCT.size))
    (count,) = cur.unpack(_U32)
    container = ModelContainer(magic=bytes(magic), config=config)
    for _ in range(count):
        (name_len,) = cur.unpack(_U16)
        name = cur.take(name_len).decode("utf-8")
        kind, rank = cur.unpack(_KIND_RANK)
        if rank > MAX_RANK:
            raise SizeMismatchError(f"{name}: rank {rank}")
        shape = tuple(struct.unpack(f"<{rank}I", cur.take(4 * rank)))
        if kind not in (KIND_F32, KIND_TERN2, KIND_TERN2_PC, KIND_I8, KIND_F16):
            raise SizeMismatchError(f"{name}: unknown kind {kind}")
        scale = None
        if kind == KIND_TERN2:
            (scale,) = struct.unpack("<f", cur.take(4))
        elif kind == KIND_TERN2_PC:
            scale = np.frombuffer(cur.take(4 * shape[0]), dtype="<f4").copy()
        n = 1
        for s in shape:
            n *= s
        if kind == KIND_F32:
            data = np.frombuffer(cur.take(4 * n), dtype="<f4").copy().reshape(shape)
        elif kind == KIND_F16:
            data = np.frombuffer(cur.take(2 * n), dtype="<f2").copy().reshape(shape)
        elif kind == KIND_I8:
            data = np.frombuffer(cur.take(n), dtype=np.int8).copy().reshape(shape)
        else:
            buf = PackedTritBuffer(cur.take((n + 3) // 4), n)
            data = unpack_trits(buf).reshape(shape)
        container.add(TensorRecord(name, kind, shape, data, scale))
    if cur.pos != len(blob):
        raise SizeMismatchError(f"{len(blob) - cur.pos} trailing bytes")
    return container


def write_ftv(container: ModelContainer, path) -> int:
    """Write a packed model; returns bytes written."""
    if container.magic != FTV_MAGIC:
        container = ModelContainer(FTV_MAGIC, container.config, container.tensors)
    return write_container(container, path)


def read_ftv(path) -> ModelContainer:
    return read_container(path, FTV_MAGIC)


def write_nwa(container: ModelContainer, path) -> int:
    """Write an fp32 weight archive; every tensor must be kind F32."""
    for rec in container.tensors.values():
        if rec.kind != KIND_F32:
            raise SizeMismatchError(f"NWA tensor {rec.name} has kind {rec.kind}")
    if container.magic != NWA_MAGIC:
        container = ModelContainer(NWA_MAGIC, container.config, container.tensors)
    return write_container(container, path)


def read_nwa(path) -> ModelContainer:
    return read_container(path, NWA_MAGIC)


# ---------------------------------------------------------------------------
# Size accounting
# ---------------------------------------------------------------------------

_MB = 1e6  # decimal megabytes throughout

HEADER_BYTES = 4 + 2 + _CONFIG_STRUCT.size + 4

COMPONENTS = ("patch_embed", "attention", "ffn", "layernorm", "head", "embeddings")


def _record_bytes(spec: TensorSpec, storage: str) -> tuple[int, int]:
    """(header bytes, scale+payload bytes) for one tensor record."""
    n = 1
    for s in spec.shape:
        n *= s
    header = 2 + len(spec.name.encode("utf-8")) + 1 + 1 + 4 * len(spec.shape)
    if storage == STORE_F32:
        body = 4 * n
    elif storage == STORE_F16:
        body = 2 * n
    elif storage == STORE_TERN:
        body = 4 + (n + 3) // 4
    elif storage == STORE_TERN_PC:
        body = 4 * spec.shape[0] + (n + 3) // 4
    else:
        raise ValueError(storage)
    return header, body


@dataclass
class SizeReport:
    """Deterministic byte accounting for a config under a precision plan."""

    config_name: str
    plan: str
    component_bytes: dict
    total_bytes: int
    overhead_bytes: int
    fp32_payload_bytes: int
    f16_payload_bytes: int
    ternary_payload_bytes: int
    param_count: int
    fp32_plan_bytes: int

    @property
    def total_mb(self) -> float:
        return self.total_bytes / _MB

    @property
    def fp32_share(self) -> float:
        """Fraction of file bytes stored at full precision."""
        return self.fp32_payload_bytes / self.total_bytes

    @property
    def compression_ratio(self) -> float:
        return self.fp32_plan_bytes / self.total_bytes

    def lines(self) -> list[str]:
        out = [f"size report  plan={self.plan}  total={self.total_mb:.3f} MB "
               f"({self.total_bytes:,} B)  ratio vs fp32 {self.compression_ratio:.2f}x"]
        for comp in COMPONENTS:
            b = self.component_bytes[comp]
            out.append(f"  {comp:<12} {b / _MB:9.4f} MB  {100 * b / self.total_bytes:5.1f}%")
        out.append(f"  {'overhead':<12} {self.overhead_bytes / _MB:9.4f} MB")
        out.append(f"  fp32 byte share {100 * self.fp32_share:.1f}%  "
                   f"params {self.param_count:,}")
        return out


def model_size_report(config: VitConfig, plan: str, config_name: str = "") -> SizeReport:
    """Exact file-size breakdown; matches write_ftv output byte for byte."""
    if plan not in PLANS:
        raise ValueError(f"unknown plan '{plan}'")
    comp = {c: 0 for c in COMPONENTS}
    overhead = HEADER_BYTES
    fp32_b = f16_b = tern_b = 0
    params = 0
    for spec in tensor_specs(config):
        storage = plan_storage(spec, plan, config)
        header, body = _record_bytes(spec, storage)
        overhead += header
        comp[spec.component] += body
        n = 1
        for s in spec.shape:
            n *= s
        params += n
        if storage == STORE_F32:
            fp32_b += body
        elif storage == STORE_F16:
            f16_b += body
        else:
            tern_b += body
    total = overhead + sum(comp.values())
    if plan == PLAN_FP32:
        fp32_total = total
    else:
        fp32_total = model_size_report(config, PLAN_FP32, config_name).total_bytes
    return SizeReport(
        config_name=config_name, plan=plan, component_bytes=comp, total_bytes=total,
        overhead_bytes=overhead, fp32_payload_bytes=fp32_b, f16_payload_bytes=f16_b,
        ternary_payload_bytes=tern_b, param_count=params, fp32_plan_bytes=fp32_total,
    )
