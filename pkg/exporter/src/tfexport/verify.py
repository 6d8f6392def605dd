"""Cross-checks exported archives against the engine via its CLI.

The engine is driven strictly through its external surfaces: NWA files in,
`quantize`/`infer`/`compare` subprocess invocations, RAWF image blobs, and
CSV reports back.
"""
from __future__ import annotations

import csv
import shutil
import struct
import subprocess
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .deit import DeiT, preprocess
from .export import resolve_config


def engine_command() -> list:
    exe = shutil.which("ternforge")
    if exe:
        return [exe]
    return [sys.executable, "-m", "ternforge.cli"]


def run_engine(args: list, check: bool = True) -> subprocess.CompletedProcess:
    proc = subprocess.run(engine_command() + args, capture_output=True, text=True)
    if check and proc.returncode != 0:
        raise RuntimeError(
            f"engine exited {proc.returncode}: {' '.join(args)}\n{proc.stderr}")
    return proc


def write_rawf(path, chw01: np.ndarray) -> None:
    chw01 = np.ascontiguousarray(chw01, dtype="<f4")
    with open(path, "wb") as f:
        f.write(b"RAWF")
        f.write(struct.pack("<I", chw01.shape[1]))
        f.write(chw01.tobytes())


def _parse_top1(stdout: str) -> int:
    # first ranked line looks like " 1. class   42  <label>  <score>"
    for line in stdout.splitlines():
        parts = line.split()
        if parts and parts[0] == "1." and parts[1] == "class":
            return int(parts[2])
    raise RuntimeError(f"could not parse engine infer output:\n{stdout}")


@dataclass
class VerifyReport:
    images: int
    agreements: int
    engine_top1: list
    torch_top1: list
    disagreement_indices: list = field(default_factory=list)

    @property
    def agreement_rate(self) -> float:
        return self.agreements / self.images if self.images else 0.0


def verify_against_engine(nwa_path, sample_images, config_name: str,
                          checkpoint_model: DeiT) -> VerifyReport:
    """Compare engine fp32 argmax with the torch forward on the same inputs.

    ``sample_images`` is an iterable of [C, H, W] float arrays in [0, 1];
    both sides apply the identical mean/std normalization.
    """
    config = resolve_config(config_name)
    engine_top1 = []
    torch_top1 = []
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        ftv = tmp / "model.ftv"
        run_engine(["quantize", "--in", str(nwa_path), "--plan", "fp32",
                    "--out", str(ftv)])
        for i, img in enumerate(sample_images):
            img = np.asarray(img, dtype=np.float32)
            raw = tmp / f"img{i}.rawf"
            write_rawf(raw, img)
            proc = run_engine(["infer", "--model", str(ftv), "--image", str(raw),
                               "--topk", "1"])
            engine_top1.append(_parse_top1(proc.stdout))
            with torch.no_grad():
                logits = checkpoint_model(
                    preprocess(torch.from_numpy(img), config)[None])
            torch_top1.append(int(logits[0].argmax()))
    disagree = [i for i, (a, b) in enumerate(zip(engine_top1, torch_top1)) if a != b]
    return VerifyReport(images=len(engine_top1),
                        agreements=len(engine_top1) - len(disagree),
                        engine_top1=engine_top1, torch_top1=torch_top1,
                        disagreement_indices=disagree)


@dataclass
class TernaryStats:
    zero_fraction: float
    pearson_mean: float
    pearson_pooled: float


def ternary_fidelity_stats(nwa_path, images_dir, out_csv) -> TernaryStats:
    """Quantize to the fully ternary plan and pull the engine's fidelity CSV."""
    with tempfile.TemporaryDirectory() as tmp:
        ftv = Path(tmp) / "model.ftv"
        run_engine(["quantize", "--in", str(nwa_path), "--plan", "ternary",
                    "--out", str(ftv)])
        run_engine(["compare", "--model", str(ftv), "--ref", str(nwa_path),
                    "--images", str(images_dir), "--out", str(out_csv)])
    values = {}
    with open(out_csv, newline="", encoding="utf-8") as f:
        for row in csv.reader(f):
            if row[0] == "zero_fraction" and row[1] == "global":
                values["zero"] = float(row[2])
            elif row[0] in ("logit_pearson_mean", "logit_pearson_pooled"):
                values[row[0]] = float(row[2])
    return TernaryStats(zero_fraction=values["zero"],
                        pearson_mean=values["logit_pearson_mean"],
                        pearson_pooled=values["logit_pearson_pooled"])
