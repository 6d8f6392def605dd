"""Checkpoint-key to canonical-name mapping.

Covers the key spellings observed across DeiT releases: fused or split
q/k/v projections, LayerScale stored as ``ls1.gamma``/``ls2.gamma`` (timm)
or ``gamma_1``/``gamma_2`` (reference release), position embeddings with or
without the class-token row, and ``module.``/``model.``/``state_dict``
wrappers. Distillation-only tensors (``dist_token``, ``head_dist.*``) are
not part of the target model and fall under the unmapped-key policy.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import AmbiguousMapError, MissingKeyError, ShapeMismatchError
from .wire import ModelConfig, canonical_tensor_shapes

WRAPPER_KEYS = ("model", "state_dict", "module")
PREFIXES = ("module.", "model.")


def unwrap_state_dict(obj) -> dict:
    """Peel training-harness containers and prefixes off a checkpoint."""
    for key in WRAPPER_KEYS:
        if isinstance(obj, dict) and key in obj and isinstance(obj[key], dict):
            obj = obj[key]
    out = {}
    for k, v in obj.items():
        for pre in PREFIXES:
            if k.startswith(pre):
                k = k[len(pre):]
        out[k] = v
    return out


def fuse_split_qkv(sd: dict, depth: int) -> dict:
    """Fold split q/k/v projections into the fused qkv layout, if present."""
    sd = dict(sd)
    for i in range(depth):
        base = f"blocks.{i}.attn"
        for suffix in ("weight", "bias"):
            parts = [f"{base}.{n}.{suffix}" for n in ("q", "k", "v")]
            alt = [f"{base}.{n}_proj.{suffix}" for n in ("q", "k", "v")]
            for group in (parts, alt):
                if all(p in sd for p in group):
                    if f"{base}.qkv.{suffix}" in sd:
                        raise AmbiguousMapError(
                            f"both fused and split qkv {suffix} in block {i}")
                    sd[f"{base}.qkv.{suffix}"] = np.concatenate(
                        [np.asarray(sd.pop(p)) for p in group], axis=0)
    return sd


def _identity(arr, shape):
    return arr


def _flatten_token(arr, shape):
    # [1, 1, dim] or [1, dim] -> [dim]
    return arr.reshape(shape)


def _pos_embed(arr, shape):
    """[1, T, D] or [T, D]; pad a zero CLS row when only patch rows stored."""
    arr = arr.reshape(-1, arr.shape[-1])
    if arr.shape[0] == shape[0] - 1:
        arr = np.concatenate([np.zeros((1, arr.shape[1]), dtype=arr.dtype), arr])
    return arr


@dataclass
class MapEntry:
    source: str
    canonical: str
    transform: Callable = _identity


@dataclass
class NameMap:
    """Injective source-key -> canonical-name mapping for one config."""

    entries: list
    skipped: list
    policy: str = "error"

    def coverage(self, config: ModelConfig) -> list:
        """Canonical names the map fails to produce (empty when total)."""
        produced = [e.canonical for e in self.entries]
        dupes = {c for c in produced if produced.count(c) > 1}
        if dupes:
            raise AmbiguousMapError(f"multiple sources for {sorted(dupes)}")
        return [c for c in canonical_tensor_shapes(config) if c not in produced]


# canonical suffix -> candidate source spellings, in precedence order
_BLOCK_RULES = (
    ("ln1.gamma", ("norm1.weight",)),
    ("ln1.beta", ("norm1.bias",)),
    ("attn.qkv.weight", ("attn.qkv.weight",)),
    ("attn.qkv.bias", ("attn.qkv.bias",)),
    ("attn.proj.weight", ("attn.proj.weight",)),
    ("attn.proj.bias", ("attn.proj.bias",)),
    ("ln2.gamma", ("norm2.weight",)),
    ("ln2.beta", ("norm2.bias",)),
    ("mlp.fc1.weight", ("mlp.fc1.weight",)),
    ("mlp.fc1.bias", ("mlp.fc1.bias",)),
    ("mlp.fc2.weight", ("mlp.fc2.weight",)),
    ("mlp.fc2.bias", ("mlp.fc2.bias",)),
    ("ls1.gamma", ("ls1.gamma", "gamma_1", "ls1.weight")),
    ("ls2.gamma", ("ls2.gamma", "gamma_2", "ls2.weight")),
)

_TOP_RULES = (
    ("patch_embed.weight", ("patch_embed.proj.weight",), _identity),
    ("patch_embed.bias", ("patch_embed.proj.bias",), _identity),
    ("cls_token", ("cls_token",), _flatten_token),
    ("pos_embed", ("pos_embed",), _pos_embed),
    ("norm.gamma", ("norm.weight", "fc_norm.weight"), _identity),
    ("norm.beta", ("norm.bias", "fc_norm.bias"), _identity),
    ("head.weight", ("head.weight",), _identity),
    ("head.bias", ("head.bias",), _identity),
)


def build_name_map(config: ModelConfig, source_keys, policy: str = "error") -> NameMap:
    """Resolve the mapping for the keys actually present in a checkpoint."""
    if policy not in ("error", "warn-skip"):
        raise ValueError(f"unknown policy '{policy}'")
    available = set(source_keys)
    entries = []
    claimed = set()

    def claim(canonical, candidates, transform=_identity):
        hits = [c for c in candidates if c in available]
        if len(hits) > 1:
            raise AmbiguousMapError(f"{canonical}: {hits}")
        if hits:
            entries.append(MapEntry(hits[0], canonical, transform))
            claimed.add(hits[0])

    for canonical, candidates, transform in _TOP_RULES:
        claim(canonical, candidates, transform)
    for i in range(config.depth):
        prefix = f"blocks.{i}"
        for suffix, candidates in _BLOCK_RULES:
            if not config.use_layerscale and suffix.startswith("ls"):
                continue
            claim(f"{prefix}.{suffix}",
                  tuple(f"{prefix}.{c}" for c in candidates))

    skipped = sorted(available - claimed)
    if skipped and policy == "error":
        raise MissingKeyError(
            f"{len(skipped)} unmapped checkpoint keys (policy=error): "
            f"{skipped[:4]}{'...' if len(skipped) > 4 else ''}")
    return NameMap(entries=entries, skipped=skipped, policy=policy)


def apply_name_map(name_map: NameMap, sd: dict, config: ModelConfig) -> dict:
    """Produce the canonical fp32 tensor dict, validating every shape."""
    shapes = canonical_tensor_shapes(config)
    missing = name_map.coverage(config)
    if missing:
        raise MissingKeyError(f"canonical tensors not produced: {missing[:4]}"
                              f"{'...' if len(missing) > 4 else ''}")
    out = {}
    by_canonical = {e.canonical: e for e in name_map.entries}
    for canonical, shape in shapes.items():
        entry = by_canonical[canonical]
        arr = np.asarray(sd[entry.source], dtype=np.float32)
        arr = entry.transform(arr, shape)
        if tuple(arr.shape) != tuple(shape):
            raise ShapeMismatchError(
                f"{canonical}: checkpoint {tuple(arr.shape)} vs config {shape}")
        out[canonical] = np.ascontiguousarray(arr, dtype=np.float32)
    return out
