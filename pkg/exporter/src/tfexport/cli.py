"""Exporter command line: export a checkpoint, optionally verify it."""
from __future__ import annotations

import argparse
import sys

import numpy as np
import torch

from .deit import DeiT
from .errors import ExportError
from .export import export_checkpoint, load_state_dict, resolve_config
from .namemap import fuse_split_qkv
from .verify import verify_against_engine


def cmd_export(args) -> int:
    summary = export_checkpoint(args.ckpt, args.config, args.out, args.policy)
    print(f"wrote {args.out}: {summary.tensor_count} tensors, "
          f"{summary.total_params:,} params, {summary.bytes_written:,} bytes")
    if summary.skipped_keys:
        print(f"skipped {len(summary.skipped_keys)} checkpoint keys: "
              f"{summary.skipped_keys[:6]}")
    return 0


def cmd_verify(args) -> int:
    config = resolve_config(args.config)
    model = DeiT(config)
    sd = fuse_split_qkv(load_state_dict(args.ckpt), config.depth)
    model.load_state_dict(_to_reference_keys(sd, config), strict=False)
    model.eval()
    rng = np.random.default_rng(args.seed)
    images = [rng.uniform(size=(config.in_channels, config.img_size,
                                config.img_size)).astype(np.float32)
              for _ in range(args.images)]
    report = verify_against_engine(args.nwa, images, args.config, model)
    print(f"argmax agreement {report.agreements}/{report.images} "
          f"({100 * report.agreement_rate:.1f}%)")
    if report.disagreement_indices:
        print(f"disagreements at {report.disagreement_indices[:10]}")
    return 0 if report.agreement_rate >= 0.99 else 1


def _to_reference_keys(sd: dict, config) -> dict:
    out = {}
    for k, v in sd.items():
        k = k.replace(".gamma_1", ".ls1.gamma").replace(".gamma_2", ".ls2.gamma")
        out[k] = torch.as_tensor(v)
    return out


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="ternforge-export")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("export", help="checkpoint -> NWA archive")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--config", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--policy", choices=("error", "warn-skip"), default="error")
    e.set_defaults(fn=cmd_export)

    v = sub.add_parser("verify", help="engine fp32 forward vs torch forward")
    v.add_argument("--nwa", required=True)
    v.add_argument("--ckpt", required=True)
    v.add_argument("--config", required=True)
    v.add_argument("--images", type=int, default=100)
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(fn=cmd_verify)

    args = p.parse_args(argv)
    try:
        return args.fn(args)
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
