"""Integer compute kernels for the W2A8 regime.

Ternary x INT8 matmuls accumulate exactly in 32-bit integers (realized as
float64 BLAS over integer-valued operands, which is exact for every partial
sum below 2^53 and therefore bit-identical to sequential int32 MACs), then
dequantize with (s_w / s_x). Attention runs in float32 on dequantized Q/K/V.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import erf

from . import tensor as T
from .errors import (
    AccumOverflowRiskError,
    CorruptTritError,
    DimNotDivisibleError,
    NanInputError,
    ShapeMismatchError,
)
from .packing import _BITS_TO_CODE, PackedTritBuffer, pack_trits
from .quantize import (
    QuantizedActivations,
    TernaryTensor,
    quantize_activations_per_channel,
)

_SQRT1_2 = np.float32(1.0 / np.sqrt(2.0))


@dataclass
class LinearLayerTern:
    """Ternary linear layer: [out, in] codes with fp32 bias."""

    weights: TernaryTensor
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.weights.shape) != 2:
            raise ShapeMismatchError(f"linear weight rank {len(self.weights.shape)}")
        if self.bias is not None:
            self.bias = T.as_f32(self.bias)
            if self.bias.shape != (self.weights.shape[0],):
                raise ShapeMismatchError(
                    f"bias {self.bias.shape} vs out {self.weights.shape[0]}"
                )

    @property
    def out_features(self) -> int:
        return self.weights.shape[0]

    @property
    def in_features(self) -> int:
        return self.weights.shape[1]


@dataclass
class PackedLinearLayerTern:
    """LinearLayerTern with codes held bit-packed (row-major trit order)."""

    packed: PackedTritBuffer
    shape: tuple
    scale: float | np.ndarray
    scale_kind: str = "per_tensor"
    bias: Optional[np.ndarray] = None


def pack_linear(layer: LinearLayerTern) -> PackedLinearLayerTern:
    return PackedLinearLayerTern(
        packed=pack_trits(layer.weights.codes.ravel()),
        shape=layer.weights.shape,
        scale=layer.weights.scale,
        scale_kind=layer.weights.scale_kind,
        bias=layer.bias,
    )


@dataclass
class ConvPatchEmbedTern:
    """Ternary patch-embedding conv: stride equals the kernel size."""

    weights: TernaryTensor  # [C_out, C_in, p, p], per-output-channel scales
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.weights.shape) != 4 or self.weights.shape[2] != self.weights.shape[3]:
            raise ShapeMismatchError(f"conv weight shape {self.weights.shape}")
        if self.bias is not None:
            self.bias = T.as_f32(self.bias)
            if self.bias.shape != (self.weights.shape[0],):
                raise ShapeMismatchError("conv bias length")

    @property
    def patch(self) -> int:
        return self.weights.shape[2]


def _int_matmul(values: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Exact int32 accumulator of values [t, k] x codes [o, k] -> [t, o]."""
    k = values.shape[1]
    if k != codes.shape[1]:
        raise ShapeMismatchError(f"reduction {values.shape} vs {codes.shape}")
    if k > T.MAX_REDUCTION_LEN:
        raise AccumOverflowRiskError(f"reduction length {k}")
    acc = values.astype(np.float64) @ codes.astype(np.float64).T
    return acc.astype(np.int32)


def _dequant_rows(acc: np.ndarray, layer_scale, scale_kind: str,
                  x_scales: np.ndarray, bias: Optional[np.ndarray]) -> np.ndarray:
    if scale_kind == "per_tensor":
        w_scale = np.float32(layer_scale)
    else:
        w_scale = np.asarray(layer_scale, dtype=np.float32)[None, :]
    y = acc.astype(np.float32) * (w_scale / x_scales[:, None])
    if bias is not None:
        y = y + bias
    return y.astype(np.float32)


def tern_matmul(x: QuantizedActivations, layer: LinearLayerTern) -> np.ndarray:
    """y[t, o] = (s_w / s_x(t)) * sum_j codes[o, j] * values[t, j] + bias[o]."""
    if x.values.shape[1] != layer.in_features:
        raise ShapeMismatchError(
            f"activations {x.values.shape} vs weight {layer.weights.shape}"
        )
    acc = _int_matmul(x.values, layer.weights.codes)
    return _dequant_rows(acc, layer.weights.scale, layer.weights.scale_kind,
                         x.scales, layer.bias)


def _unpack_row(raw: np.ndarray, start: int, length: int) -> np.ndarray:
    """Extract trits [start, start+length) from a packed buffer's bytes."""
    idx = start + np.arange(length)
    bits = (raw[idx >> 2] >> ((idx & 3) << 1).astype(np.uint8)) & 3
    invalid = bits == 3
    if invalid.any():
        i = start + int(np.argmax(invalid))
        raise CorruptTritError(f"11 bit pair at byte {i // 4}, slot {i % 4}")
    return _BITS_TO_CODE[bits]


def tern_matmul_packed(x: QuantizedActivations,
                       layer: PackedLinearLayerTern) -> np.ndarray:
    """tern_matmul consuming packed trits directly, one weight row at a time."""
    out_f, in_f = layer.shape
    if x.values.shape[1] != in_f:
        raise ShapeMismatchError(f"activations {x.values.shape} vs weight {layer.shape}")
    if in_f > T.MAX_REDUCTION_LEN:
        raise AccumOverflowRiskError(f"reduction length {in_f}")
    raw = np.frombuffer(layer.packed.data, dtype=np.uint8)
    values = x.values.astype(np.float64)
    acc = np.empty((x.values.shape[0], out_f), dtype=np.int32)
    for o in range(out_f):
        row = _unpack_row(raw, o * in_f, in_f)
        acc[:, o] = (values @ row.astype(np.float64)).astype(np.int32)
    return _dequant_rows(acc, layer.scale, layer.scale_kind, x.scales, layer.bias)


def fused_qkv(x: QuantizedActivations, wq: LinearLayerTern, wk: LinearLayerTern,
              wv: LinearLayerTern) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One pass over x producing Q, K, V; bit-equal to three tern_matmuls."""
    if not (wq.in_features == wk.in_features == wv.in_features):
        raise ShapeMismatchError("QKV input dims differ")
    codes = np.concatenate(
        [wq.weights.codes, wk.weights.codes, wv.weights.codes], axis=0
    )
    acc = _int_matmul(x.values, codes)
    outs = []
    offset = 0
    for layer in (wq, wk, wv):
        part = acc[:, offset:offset + layer.out_features]
        outs.append(_dequant_rows(part, layer.weights.scale,
                                  layer.weights.scale_kind, x.scales, layer.bias))
        offset += layer.out_features
    return tuple(outs)


def extract_patches_i8(values: np.ndarray, patch: int) -> np.ndarray:
    """[C, H, W] int8 -> [tokens, C, patch*patch], row-major patch order."""
    c, h, w = values.shape
    gh, gw = h // patch, w // patch
    v = values.reshape(c, gh, patch, gw, patch)
    v = v.transpose(1, 3, 0, 2, 4)  # gh, gw, C, p, p
    return np.ascontiguousarray(v.reshape(gh * gw, c, patch * patch))


def tern_conv_patch_embed(img: np.ndarray, layer: ConvPatchEmbedTern) -> np.ndarray:
    """Quantize the image per channel and run the non-overlapping ternary conv.

    Per-input-channel integer partial sums are dequantized independently
    (their activation scales differ), then combined and scaled by the
    per-filter weight scale.
    """
    img = T.as_f32(img)
    if img.ndim != 3:
        raise ShapeMismatchError(f"expected [C, H, W], got {img.shape}")
    c_out, c_in, p, _ = layer.weights.shape
    if img.shape[0] != c_in:
        raise ShapeMismatchError(f"channels {img.shape[0]} vs weight {c_in}")
    if img.shape[1] % p or img.shape[2] % p:
        raise DimNotDivisibleError(f"spatial {img.shape[1:]} not divisible by {p}")
    q = quantize_activations_per_channel(img)
    patches = extract_patches_i8(q.values, p)  # [tokens, C, p*p]
    codes = layer.weights.codes.reshape(c_out, c_in, p * p)
    tokens = patches.shape[0]
    y = np.zeros((tokens, c_out), dtype=np.float32)
    for c in range(c_in):
        acc_c = _int_matmul(patches[:, c, :], codes[:, c, :])
        y += acc_c.astype(np.float32) / q.scales[c]
    w_scale = np.asarray(layer.weights.scale, dtype=np.float32)
    y = y * w_scale[None, :]
    if layer.bias is not None:
        y = y + layer.bias
    return y.astype(np.float32)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction; rejects non-finite input."""
    x = np.asarray(x, dtype=np.float32)
    if not np.isfinite(x).all():
        raise NanInputError("softmax_rows input not finite")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return (e / e.sum(axis=-1, keepdims=True)).astype(np.float32)


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact erf-based GELU: x * Phi(x)."""
    x = np.asarray(x, dtype=np.float32)
    return (x * np.float32(0.5) * (1.0 + erf(x * _SQRT1_2))).astype(np.float32)


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Scaled dot-product attention over [heads, tokens, head_dim] inputs."""
    out, _ = attention_with_probs(q, k, v)
    return out


def attention_with_probs(q: np.ndarray, k: np.ndarray,
                         v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Attention returning ([tokens, heads*head_dim], probs [heads, t, t])."""
    q = T.as_f32(q)
    k = T.as_f32(k)
    v = T.as_f32(v)
    if not (q.shape == k.shape == v.shape) or q.ndim != 3:
        raise ShapeMismatchError(f"q {q.shape} k {k.shape} v {v.shape}")
    heads, t, hd = q.shape
    scale = np.float32(1.0 / np.sqrt(hd))
    scores = np.einsum("hqd,hkd->hqk", q, k).astype(np.float32) * scale
    probs = softmax_rows(scores)
    out = np.einsum("hqk,hkd->hqd", probs, v).astype(np.float32)
    out = out.transpose(1, 0, 2).reshape(t, heads * hd)
    return np.ascontiguousarray(out), probs


def split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    """[tokens, dim] -> [heads, tokens, head_dim], token-major layout."""
    t, d = x.shape
    if d % heads:
        raise ShapeMismatchError(f"dim {d} not divisible by {heads} heads")
    return np.ascontiguousarray(x.reshape(t, heads, d // heads).transpose(1, 0, 2))
