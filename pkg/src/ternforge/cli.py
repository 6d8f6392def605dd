"""Command-line surface.

Exit codes: 0 success, 2 argument errors (argparse), 3 I/O errors,
4 file-format errors, 5 numeric errors, 6 validation errors.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis, packing, profiler, synthetic
from .config import PLANS, load_config
from .errors import (
    AccumOverflowRiskError,
    BadMagicError,
    BadVersionError,
    CorruptTritError,
    DimNotDivisibleError,
    DuplicateTensorError,
    EmptyTensorError,
    InvalidTritError,
    MissingTensorError,
    MissingTraceError,
    NanDetectedError,
    NanInputError,
    ShapeMismatchError,
    SizeMismatchError,
    TernForgeError,
    TruncatedError,
)
from .images import load_image, write_pgm
from .model import (
    TraceOptions,
    build_from_archive,
    forward,
    predict_topk,
    weights_from_container,
    weights_to_container,
)

EXIT_IO = 3
EXIT_FORMAT = 4
EXIT_NUMERIC = 5
EXIT_VALIDATION = 6

_FORMAT_ERRORS = (BadMagicError, BadVersionError, TruncatedError, CorruptTritError,
                  InvalidTritError, DuplicateTensorError, SizeMismatchError)
_NUMERIC_ERRORS = (NanInputError, NanDetectedError, AccumOverflowRiskError,
                   EmptyTensorError)
_VALIDATION_ERRORS = (ShapeMismatchError, MissingTensorError, MissingTraceError,
                      DimNotDivisibleError)


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("TERNFORGE_THREADS", "")
    return max(1, int(env)) if env.isdigit() else 1


def cmd_gen_synthetic(args) -> int:
    config = load_config(args.config)
    archive = synthetic.generate_archive(config, args.seed)
    written = packing.write_nwa(archive, args.out)
    params = sum(r.elements for r in archive.tensors.values())
    print(f"wrote {args.out}: {written:,} bytes, {params:,} params, seed {args.seed}")
    return 0


def cmd_quantize(args) -> int:
    archive = packing.read_nwa(args.input)
    weights = build_from_archive(archive, archive.config, args.plan)
    container = weights_to_container(weights)
    written = packing.write_ftv(container, args.out)
    print(f"wrote {args.out}: {written:,} bytes ({written / 1e6:.3f} MB), "
          f"plan {args.plan}")
    return 0


def _load_model(path):
    container = packing.read_ftv(path)
    return weights_from_container(container), container


def _read_labels(path) -> list:
    with open(path, "r", encoding="utf-8") as f:
        return [line.rstrip("\n") for line in f]


def cmd_infer(args) -> int:
    weights, _ = _load_model(args.model)
    img = load_image(args.image, weights.config)
    labels = _read_labels(args.labels) if args.labels else None
    logits, _ = forward(weights, img)
    for rank, (idx, name, score) in enumerate(predict_topk(logits, args.topk, labels), 1):
        print(f"{rank:2d}. class {idx:4d}  {name}  {score:+.5f}")
    return 0


def _image_paths(directory) -> list:
    exts = {".ppm", ".rawf", ".raw", ".bin"}
    paths = sorted(p for p in Path(directory).iterdir()
                   if p.is_file() and p.suffix.lower() in exts)
    if not paths:
        raise FileNotFoundError(f"no .ppm/.rawf images in {directory}")
    return paths


def cmd_compare(args) -> int:
    weights, _ = _load_model(args.model)
    archive = packing.read_nwa(args.ref)
    ref_weights = build_from_archive(archive, archive.config, "fp32")
    opts = TraceOptions(patch_embed=True)
    paths = _image_paths(args.images)

    def run_pair(path):
        img = load_image(path, weights.config)
        _, t_ref = forward(ref_weights, img, opts)
        _, t_q = forward(weights, img, opts)
        return t_ref, t_q

    n = _threads(args)
    if n > 1:
        with ThreadPoolExecutor(max_workers=n) as pool:
            pairs = list(pool.map(run_pair, paths))
    else:
        pairs = [run_pair(p) for p in paths]
    report = analysis.fidelity_compare(
        [p[0] for p in pairs], [p[1] for p in pairs], ref_weights, weights)
    report.write_csv(args.out)
    print(f"compared {len(paths)} images -> {args.out}")
    print(f"  global zero fraction  {report.zero_fraction['global']:.4f}")
    print(f"  patch cosine mean     {report.patch_cos_mean:.4f} "
          f"(std {report.patch_cos_std:.4f})")
    print(f"  logit pearson mean    {report.logit_pearson_mean:.4f} "
          f"(pooled {report.logit_pearson_pooled:.4f})")
    return 0


def cmd_profile(args) -> int:
    weights, container = _load_model(args.model)
    img = load_image(args.image, weights.config)
    report = profiler.profile_forward(weights, img, args.reps,
                                      container.payload_bytes())
    print(report.to_text())
    print()
    print(report.to_csv(), end="")
    return 0


def cmd_rollout(args) -> int:
    weights, _ = _load_model(args.model)
    img = load_image(args.image, weights.config)
    _, trace = forward(weights, img, TraceOptions(attention=True))
    grid = analysis.attention_rollout(trace)
    write_pgm(args.out, grid)
    print(f"wrote {args.out}: {grid.shape[0]}x{grid.shape[1]} rollout map")
    return 0


def _toy_model(spec: dict):
    """Build (model_fn, params, groups) from a toy-spec dict."""
    kind = spec.get("model", "quadratic")
    if kind == "quadratic":
        coeffs = np.asarray(spec["coeffs"], dtype=np.float64)
        params = np.asarray(spec["weights"], dtype=np.float64)

        def model_fn(w):
            return float(np.sum(coeffs * w * w))
    elif kind == "linear":
        coeffs = np.asarray(spec["coeffs"], dtype=np.float64)
        params = np.asarray(spec["weights"], dtype=np.float64)

        def model_fn(w):
            return float(np.sum(coeffs * w))
    elif kind == "mlp":
        sizes = list(spec["layers"])
        samples = int(spec.get("samples", 8))
        rng = np.random.default_rng(int(spec.get("data_seed", 0)))
        x = rng.normal(size=(samples, sizes[0]))
        y = rng.normal(size=(samples, sizes[-1]))
        shapes = [(sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1)]
        params = np.concatenate([
            rng.normal(0.0, 1.0 / np.sqrt(fi), size=fo * fi)
            for fo, fi in shapes
        ])

        def model_fn(w):
            h = x
            off = 0
            for li, (fo, fi) in enumerate(shapes):
                mat = w[off:off + fo * fi].reshape(fo, fi)
                off += fo * fi
                h = h @ mat.T
                if li < len(shapes) - 1:
                    h = np.tanh(h)
            return float(np.mean((h - y) ** 2))
    else:
        raise ValueError(f"unknown toy model '{kind}'")

    if "groups" in spec and isinstance(spec["groups"], dict):
        groups = {k: np.asarray(v, dtype=np.int64) for k, v in spec["groups"].items()}
    elif kind == "mlp":
        groups = {}
        off = 0
        for li, (fo, fi) in enumerate(shapes):
            groups[f"layer{li}"] = np.arange(off, off + fo * fi)
            off += fo * fi
    else:
        groups = {"all": np.arange(params.size)}
    return model_fn, params, groups


def cmd_importance(args) -> int:
    with open(args.toy, "r", encoding="utf-8") as f:
        spec = json.load(f)
    model_fn, params, groups = _toy_model(spec)
    fd_step = float(spec.get("fd_step", analysis.DEFAULT_FD_STEP))
    report = analysis.importance_report(model_fn, params, groups,
                                        probes=args.probes, fd_step=fd_step,
                                        seed=args.seed)
    report.write_csv(args.out)
    print(f"wrote {args.out}")
    for g in report.groups:
        print(f"  {g:<12} taylor {report.taylor_fo_share[g]:.4f}  "
              f"hessian {report.hessian_share[g]:.4f}  "
              f"params {report.param_share[g]:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ternforge",
                                description="Ternary ViT quantization toolkit")
    p.add_argument("--threads", type=int, default=None,
                   help="parallel forwards over multiple images "
                        "(env TERNFORGE_THREADS)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", help="write a synthetic fp32 archive")
    g.add_argument("--config", required=True, help="named config or JSON file")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_synthetic)

    q = sub.add_parser("quantize", help="quantize an NWA archive into an FTV model")
    q.add_argument("--in", dest="input", required=True)
    q.add_argument("--plan", choices=PLANS, required=True)
    q.add_argument("--out", required=True)
    q.set_defaults(fn=cmd_quantize)

    i = sub.add_parser("infer", help="classify one image")
    i.add_argument("--model", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--labels", default=None)
    i.add_argument("--topk", type=int, default=5)
    i.set_defaults(fn=cmd_infer)

    c = sub.add_parser("compare", help="fidelity report: FTV model vs fp32 archive")
    c.add_argument("--model", required=True)
    c.add_argument("--ref", required=True)
    c.add_argument("--images", required=True, help="directory of ppm/rawf images")
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_compare)

    pr = sub.add_parser("profile", help="per-component latency/memory report")
    pr.add_argument("--model", required=True)
    pr.add_argument("--image", required=True)
    pr.add_argument("--reps", type=int, default=3)
    pr.set_defaults(fn=cmd_profile)

    r = sub.add_parser("rollout", help="attention rollout map to PGM")
    r.add_argument("--model", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_rollout)

    imp = sub.add_parser("importance", help="toy-model importance estimators")
    imp.add_argument("--toy", required=True, help="toy spec JSON")
    imp.add_argument("--seed", type=int, required=True)
    imp.add_argument("--probes", type=int, default=8)
    imp.add_argument("--out", required=True)
    imp.set_defaults(fn=cmd_importance)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except _FORMAT_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except _NUMERIC_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except _VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except TernForgeError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
