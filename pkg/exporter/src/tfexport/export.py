"""Checkpoint -> NWA export."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .namemap import apply_name_map, build_name_map, fuse_split_qkv, unwrap_state_dict
from .wire import CONFIGS, ModelConfig, write_nwa


@dataclass
class ExportSummary:
    tensor_count: int
    total_params: int
    bytes_written: int
    skipped_keys: list


def load_state_dict(ckpt_path) -> dict:
    obj = torch.load(ckpt_path, map_location="cpu", weights_only=False)
    sd = unwrap_state_dict(obj)
    return {k: v.detach().cpu().numpy() if isinstance(v, torch.Tensor) else v
            for k, v in sd.items()}


def resolve_config(config_name: str) -> ModelConfig:
    if config_name not in CONFIGS:
        raise KeyError(f"unknown config '{config_name}'; choices {sorted(CONFIGS)}")
    return CONFIGS[config_name]


def export_checkpoint(ckpt_path, config_name: str, out_path,
                      policy: str = "error") -> ExportSummary:
    """Convert a checkpoint to an NWA archive plus a preprocessing sidecar.

    Deterministic and idempotent: the same checkpoint always produces a
    byte-identical archive.
    """
    config = resolve_config(config_name)
    sd = load_state_dict(ckpt_path)
    sd = fuse_split_qkv(sd, config.depth)
    name_map = build_name_map(config, sd.keys(), policy)
    tensors = apply_name_map(name_map, sd, config)
    written = write_nwa(tensors, config, out_path)
    sidecar = {
        "config": config_name,
        "resize": [config.img_size, config.img_size],
        "interpolation": "bicubic",
        "value_range": [0.0, 1.0],
        "mean": list(config.norm_mean),
        "std": list(config.norm_std),
        "note": "engine applies (x - mean) / std to [0,1] CHW input itself; "
                "supply unnormalized pixels",
    }
    Path(str(out_path) + ".json").write_text(json.dumps(sidecar, indent=2) + "\n",
                                             encoding="utf-8")
    total = sum(int(np.prod(a.shape)) for a in tensors.values())
    return ExportSummary(tensor_count=len(tensors), total_params=total,
                         bytes_written=written, skipped_keys=name_map.skipped)
