"""Synthetic fp32 weight archives for testing without pretrained checkpoints.

Weight matrices draw iid Gaussians with fan-in scaled sigma, biases are zero,
embeddings draw sigma 0.02 Gaussians, LayerNorm affines start at the identity
(gamma 1, beta 0) and LayerScale at 1. Generation is reproducible: the same
seed yields a byte-identical archive.
"""
from __future__ import annotations

import numpy as np

from .config import (
    ROLE_BIAS,
    ROLE_EMBED,
    ROLE_HEAD_W,
    ROLE_LAYERSCALE,
    ROLE_LINEAR_W,
    ROLE_LN,
    ROLE_PATCH_W,
    ROLE_QKV_W,
    VitConfig,
    tensor_specs,
)
from .packing import KIND_F32, NWA_MAGIC, ModelContainer, TensorRecord

EMBED_SIGMA = 0.02


def _fan_in(shape: tuple) -> int:
    if len(shape) == 2:
        return shape[1]
    if len(shape) == 4:
        return shape[1] * shape[2] * shape[3]
    return shape[0]


def generate_archive(config: VitConfig, seed: int) -> ModelContainer:
    rng = np.random.default_rng(seed)
    container = ModelContainer(NWA_MAGIC, config)
    for spec in tensor_specs(config):
        role = spec.role
        if role in (ROLE_PATCH_W, ROLE_QKV_W, ROLE_LINEAR_W, ROLE_HEAD_W):
            sigma = 1.0 / np.sqrt(_fan_in(spec.shape))
            data = rng.normal(0.0, sigma, size=spec.shape)
        elif role == ROLE_EMBED:
            data = rng.normal(0.0, EMBED_SIGMA, size=spec.shape)
        elif role == ROLE_BIAS:
            data = np.zeros(spec.shape)
        elif role == ROLE_LN:
            value = 1.0 if spec.name.endswith(".gamma") else 0.0
            data = np.full(spec.shape, value)
        elif role == ROLE_LAYERSCALE:
            data = np.ones(spec.shape)
        else:
            raise ValueError(f"unhandled role {role}")
        container.add(TensorRecord(spec.name, KIND_F32, spec.shape,
                                   data.astype(np.float32)))
    return container
