"""Ternary weight and 8-bit activation quantizers.

Weights are mapped onto {-1, 0, +1} by dividing through the tensor's mean
absolute value (absmean) and rounding half-away-from-zero; activations are
mapped onto signed 8-bit codes with a per-token (or per-channel) absmax
scale of 127/max|x|. LayerNorm affines get the same absmean treatment as
weights, with per-token statistics left in float32.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np

from . import tensor as T
from .errors import NanInputError, ShapeMismatchError

WeightScaleKind = Literal["per_tensor", "per_out_channel"]
ActScaleKind = Literal["per_token", "per_sample_channel"]

DEFAULT_WEIGHT_EPS = 1e-6

# Signed 8-bit code range for activations.
ACT_QMIN = -128.0
ACT_QMAX = 127.0


@dataclass
class TernaryTensor:
    """Ternary codes plus the scale(s) that dequantize them.

    ``codes`` is int8 restricted to {-1, 0, +1}. ``scale`` is a scalar for
    per-tensor scaling or a float32 vector of length ``codes.shape[0]`` for
    per-output-channel scaling. Element (c, ...) dequantizes to
    ``scale[c] * codes[c, ...]``.
    """

    codes: np.ndarray
    scale: np.ndarray | float
    scale_kind: WeightScaleKind = "per_tensor"

    def __post_init__(self):
        self.codes = np.ascontiguousarray(self.codes, dtype=np.int8)
        if self.scale_kind == "per_tensor":
            self.scale = float(self.scale)
        else:
            self.scale = np.ascontiguousarray(self.scale, dtype=np.float32)
            if self.scale.shape != (self.codes.shape[0],):
                raise ShapeMismatchError(
                    f"per-channel scales {self.scale.shape} vs filters {self.codes.shape[0]}"
                )

    @property
    def shape(self) -> T.Shape:
        return self.codes.shape

    def dequantized(self) -> np.ndarray:
        """Float32 tensor scale * codes."""
        if self.scale_kind == "per_tensor":
            return (self.codes.astype(np.float32) * np.float32(self.scale))
        expand = (slice(None),) + (None,) * (self.codes.ndim - 1)
        return self.codes.astype(np.float32) * self.scale[expand]

    def zero_fraction(self) -> float:
        return float(np.count_nonzero(self.codes == 0)) / self.codes.size


@dataclass
class QuantizedActivations:
    """Signed 8-bit activation codes with their absmax scales.

    Dequantization contract: x_hat = values / scales (scales broadcast per
    token row or per channel). All-zero slices carry the sentinel scale 1.0
    so they dequantize to zero without special-casing.
    """

    values: np.ndarray
    scales: np.ndarray
    scale_kind: ActScaleKind = "per_token"

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.int8)
        self.scales = np.ascontiguousarray(self.scales, dtype=np.float32)

    def dequantized(self) -> np.ndarray:
        if self.scale_kind == "per_token":
            return self.values.astype(np.float32) / self.scales[:, None]
        expand = (slice(None),) + (None,) * (self.values.ndim - 1)
        return self.values.astype(np.float32) / self.scales[expand]


@dataclass
class TernaryAffine:
    """Ternarized LayerNorm affine pair (gamma, beta), both 1-D."""

    gamma: TernaryTensor
    beta: TernaryTensor
    eps: float = 1e-6

    def __post_init__(self):
        if self.gamma.shape != self.beta.shape or len(self.gamma.shape) != 1:
            raise ShapeMismatchError(
                f"affine shapes gamma {self.gamma.shape} beta {self.beta.shape}"
            )

    @property
    def dim(self) -> int:
        return self.gamma.shape[0]


def round_clip(x, a: float, b: float):
    """round(x) half-away-from-zero, clamped into [a, b].

    Accepts scalars or arrays; NaN input is rejected.
    """
    arr = np.asarray(x, dtype=np.float32)
    if np.isnan(arr).any():
        raise NanInputError("round_clip received NaN")
    rounded = np.copysign(np.floor(np.abs(arr) + np.float32(0.5)), arr)
    out = np.clip(rounded, a, b)
    return float(out) if np.isscalar(x) or arr.ndim == 0 else out


def ternarize_weights(w: np.ndarray, eps: float = DEFAULT_WEIGHT_EPS) -> TernaryTensor:
    """Absmean ternarization with a single per-tensor scale.

    scale = mean|w|; codes = round_clip(w / (scale + eps), -1, +1).
    An all-zero tensor produces all-zero codes with scale 0.
    """
    w = T.as_f32(w)
    scale = T.reduce_abs_mean(w)
    denom = scale + eps
    if denom == 0.0:
        codes = np.zeros(w.shape, dtype=np.int8)
    else:
        codes = round_clip(w / np.float32(denom), -1.0, 1.0).astype(np.int8)
    return TernaryTensor(codes, scale, "per_tensor")


def quantize_activations_per_token(x: np.ndarray) -> QuantizedActivations:
    """Per-token absmax quantization of a [tokens, dim] tensor to int8.

    Each token row t gets scale s(t) = 127 / max|x[t]| and codes
    round_clip(s(t) * x[t], -128, 127); zero rows get sentinel scale 1.0.
    """
    x = T.as_f32(x)
    if x.ndim != 2:
        raise ShapeMismatchError(f"expected [tokens, dim], got {x.shape}")
    absmax = T.reduce_abs_max(x, axis=1)
    nonzero = absmax > 0
    scales = np.ones_like(absmax, dtype=np.float32)
    scales[nonzero] = np.float32(ACT_QMAX) / absmax[nonzero]
    values = round_clip(x * scales[:, None], ACT_QMIN, ACT_QMAX).astype(np.int8)
    return QuantizedActivations(values, scales, "per_token")


def ternarize_conv_weights(w: np.ndarray, eps: float = DEFAULT_WEIGHT_EPS) -> TernaryTensor:
    """Ternarize a [C_out, C_in, k, k] conv weight with one scale per filter."""
    w = T.as_f32(w)
    if w.ndim != 4:
        raise ShapeMismatchError(f"expected 4-D conv weight, got {w.shape}")
    c_out = w.shape[0]
    scales = np.empty(c_out, dtype=np.float32)
    codes = np.empty(w.shape, dtype=np.int8)
    for c in range(c_out):
        scales[c] = T.reduce_abs_mean(w[c])
        denom = float(scales[c]) + eps
        if denom == 0.0:
            codes[c] = 0
        else:
            codes[c] = round_clip(w[c] / np.float32(denom), -1.0, 1.0).astype(np.int8)
    return TernaryTensor(codes, scales, "per_out_channel")


def quantize_activations_per_channel(x: np.ndarray) -> QuantizedActivations:
    """Absmax-quantize a [C, H, W] activation map with one scale per channel."""
    x = T.as_f32(x)
    if x.ndim != 3:
        raise ShapeMismatchError(f"expected [C, H, W], got {x.shape}")
    absmax = T.reduce_abs_max(x, axis=(1, 2))
    nonzero = absmax > 0
    scales = np.ones_like(absmax, dtype=np.float32)
    scales[nonzero] = np.float32(ACT_QMAX) / absmax[nonzero]
    values = round_clip(x * scales[:, None, None], ACT_QMIN, ACT_QMAX).astype(np.int8)
    return QuantizedActivations(values, scales, "per_sample_channel")


def ternarize_affine(gamma: np.ndarray, beta: np.ndarray, eps_ln: float,
                     eps_w: float = DEFAULT_WEIGHT_EPS) -> TernaryAffine:
    """Ternarize LayerNorm gamma/beta with the per-tensor absmean scheme."""
    return TernaryAffine(
        gamma=ternarize_weights(gamma, eps_w),
        beta=ternarize_weights(beta, eps_w),
        eps=eps_ln,
    )


def ternary_layernorm(x: np.ndarray, affine: TernaryAffine,
                      bias_fp32: Optional[np.ndarray] = None) -> np.ndarray:
    """LayerNorm with float32 per-token statistics and ternary affine.

    Normalizes each token over the feature axis with its own mean and
    (population) variance, then applies the dequantized gamma/beta. The
    optional ``bias_fp32`` is an extra full-precision shift added last.
    """
    x = T.as_f32(x)
    if x.ndim != 2 or x.shape[1] != affine.dim:
        raise ShapeMismatchError(f"input {x.shape} vs affine dim {affine.dim}")
    mu = x.mean(axis=1, keepdims=True, dtype=np.float32)
    var = np.square(x - mu).mean(axis=1, keepdims=True, dtype=np.float32)
    xhat = (x - mu) / np.sqrt(var + np.float32(affine.eps))
    y = xhat * affine.gamma.dequantized() + affine.beta.dequantized()
    if bias_fp32 is not None:
        y = y + T.as_f32(bias_fp32)
    return y.astype(np.float32)


def layernorm_fp32(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                   eps: float) -> np.ndarray:
    """Plain float32 LayerNorm, used by the unquantized plans."""
    x = T.as_f32(x)
    mu = x.mean(axis=1, keepdims=True, dtype=np.float32)
    var = np.square(x - mu).mean(axis=1, keepdims=True, dtype=np.float32)
    xhat = (x - mu) / np.sqrt(var + np.float32(eps))
    return (xhat * T.as_f32(gamma) + T.as_f32(beta)).astype(np.float32)


def rms_normalize(x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Per-token RMS normalization (no learned weight).

    Optional pre-quantization stage controlled by the model config flag;
    off by default.
    """
    x = T.as_f32(x)
    rms = np.sqrt(np.square(x).mean(axis=-1, keepdims=True, dtype=np.float32)
                  + np.float32(eps))
    return (x / rms).astype(np.float32)


def ste_quantize_forward(w: np.ndarray,
                         eps: float = DEFAULT_WEIGHT_EPS) -> tuple[TernaryTensor, np.ndarray]:
    """Forward half of the straight-through estimator: ternarize + dequantize."""
    tern = ternarize_weights(w, eps)
    return tern, tern.dequantized()


def ste_backward(grad_out: np.ndarray) -> np.ndarray:
    """Backward half: the quantizer is treated as identity, gradients pass through."""
    return grad_out
