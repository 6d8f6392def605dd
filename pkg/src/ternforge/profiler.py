"""Per-component latency and memory profiling of a forward pass.

Component timings come from monotonic-clock sections inside the forward
loop; "Patch embed + head + other" is defined as the end-to-end remainder,
so the component column sums to the end-to-end figure by construction.
Medians over the repetitions are reported. Absolute times are platform
numbers: only the report structure and percentage consistency are
contractual.
"""
from __future__ import annotations

import csv
import io
import time
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .config import VitConfig
from .model import TraceOptions, VitWeights, forward

BLOCK_COMPONENT_ROWS = (
    ("ln", "LayerNorm (pre + post)"),
    ("qkv", "QKV projection (fused)"),
    ("attention", "Attention (Q@K^T+softmax+V)"),
    ("proj", "Output projection"),
    ("ffn", "FFN (fc1 + fc2)"),
)
REMAINDER_ROW = "Patch embed + head + other"

COMPONENT_TAXONOMY = tuple(label for _, label in BLOCK_COMPONENT_ROWS) + (REMAINDER_ROW,)


class StageTimer:
    """Accumulates wall time per named section (monotonic clock)."""

    def __init__(self):
        self.sections: dict = {}

    @contextmanager
    def section(self, name: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.sections[name] = self.sections.get(name, 0.0) + (
                time.perf_counter() - start)


@dataclass
class ProfileReport:
    config: VitConfig
    plan: str
    reps: int
    component_seconds: dict            # taxonomy label -> median seconds (12 blocks)
    end_to_end_seconds: float          # sum of the component column
    wall_seconds: float                # median raw end-to-end measurement
    packed_weight_bytes: int
    scratch_bytes: int
    input_bytes: int

    @property
    def component_names(self) -> tuple:
        return COMPONENT_TAXONOMY

    def percentages(self) -> dict:
        total = self.end_to_end_seconds
        return {name: 100.0 * s / total for name, s in self.component_seconds.items()}

    def to_text(self) -> str:
        depth = self.config.depth
        pct = self.percentages()
        lines = []
        lines.append(f"{'Component':<34}{'Time/block':>12}{f'{depth} blocks':>14}{'% total':>10}")
        for key, label in BLOCK_COMPONENT_ROWS:
            s = self.component_seconds[label]
            lines.append(f"{label:<34}{s / depth * 1e3:>10.2f}ms{s * 1e3:>12.1f}ms"
                         f"{pct[label]:>9.1f}%")
        blocks_total = sum(self.component_seconds[label]
                           for _, label in BLOCK_COMPONENT_ROWS)
        lines.append(f"{f'Total ({depth} blocks)':<34}{'':>12}{blocks_total * 1e3:>12.1f}ms"
                     f"{100.0 * blocks_total / self.end_to_end_seconds:>9.1f}%")
        s = self.component_seconds[REMAINDER_ROW]
        lines.append(f"{REMAINDER_ROW:<34}{'':>12}{s * 1e3:>12.1f}ms{pct[REMAINDER_ROW]:>9.1f}%")
        lines.append(f"{'End-to-end latency':<34}{'':>12}"
                     f"{self.end_to_end_seconds * 1e3:>12.1f}ms{100.0:>9.1f}%")
        lines.append(f"{'Throughput':<34}{'':>12}"
                     f"{1.0 / self.end_to_end_seconds:>11.3f}/s{'':>10}")
        lines.append("Memory & storage")
        lines.append(f"{'  Packed weights (payload)':<34}{self.packed_weight_bytes:>14,} B")
        lines.append(f"{'  Peak scratch (modeled)':<34}{self.scratch_bytes:>14,} B")
        lines.append(f"{'  Input image':<34}{self.input_bytes:>14,} B")
        return "\n".join(lines)

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out)
        w.writerow(["component", "seconds", "percent"])
        pct = self.percentages()
        for name in COMPONENT_TAXONOMY:
            w.writerow([name, f"{self.component_seconds[name]:.6f}",
                        f"{pct[name]:.3f}"])
        w.writerow(["end_to_end_seconds", f"{self.end_to_end_seconds:.6f}", "100.0"])
        w.writerow(["packed_weight_bytes", self.packed_weight_bytes, ""])
        w.writerow(["scratch_bytes", self.scratch_bytes, ""])
        w.writerow(["input_bytes", self.input_bytes, ""])
        return out.getvalue()


def modeled_scratch_bytes(config: VitConfig) -> int:
    """Peak live float32 activation bytes of the forward pass (analytic)."""
    t, d = config.tokens, config.dim
    heads = config.heads
    hidden = config.hidden_dim
    resid = t * d          # residual stream
    normed = t * d
    qkv_stage = normed + 3 * t * d
    attn_stage = 3 * t * d + heads * t * t + t * d
    mlp_stage = normed + t * hidden
    peak_tokens = resid + max(qkv_stage, attn_stage, mlp_stage)
    return 4 * peak_tokens


def profile_forward(weights: VitWeights, img: np.ndarray, reps: int,
                    payload_bytes: int) -> ProfileReport:
    """Time `reps` forwards and assemble the report (medians per component)."""
    reps = max(1, reps)
    cfg = weights.config
    per_rep = {label: [] for _, label in BLOCK_COMPONENT_ROWS}
    per_rep[REMAINDER_ROW] = []
    walls = []
    for _ in range(reps):
        timer = StageTimer()
        start = time.perf_counter()
        forward(weights, img, TraceOptions(), timer=timer)
        wall = time.perf_counter() - start
        walls.append(wall)
        section_total = 0.0
        for key, label in BLOCK_COMPONENT_ROWS:
            s = timer.sections.get(key, 0.0)
            per_rep[label].append(s)
            section_total += s
        per_rep[REMAINDER_ROW].append(max(wall - section_total, 0.0))
    component_seconds = {name: float(np.median(vals)) for name, vals in per_rep.items()}
    end_to_end = sum(component_seconds.values())
    return ProfileReport(
        config=cfg, plan=weights.plan, reps=reps,
        component_seconds=component_seconds,
        end_to_end_seconds=end_to_end,
        wall_seconds=float(np.median(walls)),
        packed_weight_bytes=payload_bytes,
        scratch_bytes=modeled_scratch_bytes(cfg),
        input_bytes=4 * cfg.in_channels * cfg.img_size * cfg.img_size,
    )
