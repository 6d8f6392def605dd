"""Analysis toolbox: distillation loss, importance estimators, rollout, fidelity.

The importance estimators treat the model as a black-box scalar loss over a
parameter vector and use central finite differences, so they are meant for
toy models (small MLPs, quadratic test functions), not full networks.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import MissingTraceError, NanDetectedError, ShapeMismatchError
from .model import ForwardTrace
from .quantize import TernaryAffine, TernaryTensor

DEFAULT_FD_STEP = 1e-3


def kd_kl_loss(teacher_logits: np.ndarray, student_logits: np.ndarray,
               temperature: float = 1.0) -> float:
    """KL(softmax(z_T / T) || softmax(z_S / T)).

    1-D inputs give a single divergence; 2-D [batch, classes] inputs are
    averaged over the batch. Computed in float64.
    """
    zt = np.asarray(teacher_logits, dtype=np.float64)
    zs = np.asarray(student_logits, dtype=np.float64)
    if zt.shape != zs.shape:
        raise ShapeMismatchError(f"teacher {zt.shape} vs student {zs.shape}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if zt.ndim == 1:
        zt, zs = zt[None, :], zs[None, :]

    def log_softmax(z):
        shifted = z / temperature
        shifted = shifted - shifted.max(axis=1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    ls_t = log_softmax(zt)
    ls_s = log_softmax(zs)
    kl = (np.exp(ls_t) * (ls_t - ls_s)).sum(axis=1)
    return float(kl.mean())


# ---------------------------------------------------------------------------
# Importance estimation
# ---------------------------------------------------------------------------

@dataclass
class ImportanceReport:
    """Per-group shares of total importance; each share column sums to 1."""

    groups: list                      # group names, fixed order
    taylor_fo_share: dict             # name -> fraction
    hessian_share: dict               # name -> fraction
    param_share: dict                 # name -> fraction
    taylor_uniform_fallback: bool = False
    hessian_uniform_fallback: bool = False
    raw_taylor: dict = field(default_factory=dict)
    raw_hessian: dict = field(default_factory=dict)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["group", "taylor_fo_share", "hessian_share", "param_share",
                        "taylor_raw", "hessian_raw"])
            for g in self.groups:
                w.writerow([
                    g,
                    f"{self.taylor_fo_share[g]:.8f}",
                    f"{self.hessian_share[g]:.8f}",
                    f"{self.param_share[g]:.8f}",
                    f"{self.raw_taylor.get(g, 0.0):.8g}",
                    f"{self.raw_hessian.get(g, 0.0):.8g}",
                ])


def _validate_groups(groups: dict, n: int) -> dict:
    """Groups must partition the parameter indices [0, n)."""
    seen = np.zeros(n, dtype=bool)
    out = {}
    for name, idx in groups.items():
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise ShapeMismatchError(f"group {name} indexes outside [0, {n})")
        if seen[idx].any():
            raise ShapeMismatchError(f"group {name} overlaps another group")
        seen[idx] = True
        out[name] = idx
    if not seen.all():
        raise ShapeMismatchError("groups do not cover all parameters")
    return out


def _loss_at(model_fn: Callable, w: np.ndarray) -> float:
    val = float(model_fn(w))
    if not np.isfinite(val):
        raise NanDetectedError("loss is not finite")
    return val


def fd_gradient(model_fn: Callable, params: np.ndarray,
                fd_step: float = DEFAULT_FD_STEP,
                indices: Optional[np.ndarray] = None) -> np.ndarray:
    """Central-difference gradient, step fd_step * max(1, |w_i|) per coordinate.

    With ``indices`` only those coordinates are evaluated (the rest stay 0).
    """
    params = np.asarray(params, dtype=np.float64)
    grad = np.zeros_like(params)
    idx = np.arange(params.size) if indices is None else np.asarray(indices)
    w = params.copy()
    for i in idx:
        h = fd_step * max(1.0, abs(params[i]))
        orig = w[i]
        w[i] = orig + h
        up = _loss_at(model_fn, w)
        w[i] = orig - h
        down = _loss_at(model_fn, w)
        w[i] = orig
        grad[i] = (up - down) / (2.0 * h)
    return grad


def _shares(raw: dict, order: list) -> tuple[dict, bool]:
    total = sum(raw[g] for g in order)
    if total <= 0.0:
        return {g: 1.0 / len(order) for g in order}, True
    return {g: raw[g] / total for g in order}, False


def taylor_fo_importance(model_fn: Callable, params: np.ndarray, groups: dict,
                         fd_step: float = DEFAULT_FD_STEP) -> tuple[dict, dict, bool]:
    """First-order saliency |g_i * w_i| summed per group.

    Returns (shares, raw group sums, uniform_fallback). A constant loss has
    zero importance everywhere; shares then fall back to uniform with the
    flag set.
    """
    params = np.asarray(params, dtype=np.float64)
    groups = _validate_groups(groups, params.size)
    grad = fd_gradient(model_fn, params, fd_step)
    importance = np.abs(grad * params)
    raw = {g: float(importance[idx].sum()) for g, idx in groups.items()}
    shares, fallback = _shares(raw, list(groups))
    return shares, raw, fallback


def hessian_trace_importance(model_fn: Callable, params: np.ndarray, groups: dict,
                             probes: int, fd_step: float = DEFAULT_FD_STEP,
                             seed: int = 0) -> tuple[dict, dict, bool]:
    """Hutchinson trace estimate of the per-group Hessian blocks.

    For each group G and probe m: draw Rademacher v supported on G, form
    Hv by central-differencing the finite-difference gradient at w ± h*v
    (restricted to G, which is all the dot product needs), and average
    v^T H v. Per-probe seeds derive from the master seed, so the estimate is
    bit-reproducible and independent of evaluation order.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    params = np.asarray(params, dtype=np.float64)
    groups = _validate_groups(groups, params.size)
    raw = {}
    for g_idx, (g, idx) in enumerate(groups.items()):
        total = 0.0
        for m in range(probes):
            rng = np.random.default_rng([seed, g_idx, m])
            v = np.zeros(params.size)
            v[idx] = rng.integers(0, 2, size=idx.size) * 2.0 - 1.0
            h = fd_step
            g_up = fd_gradient(model_fn, params + h * v, fd_step, indices=idx)
            g_dn = fd_gradient(model_fn, params - h * v, fd_step, indices=idx)
            hv = (g_up[idx] - g_dn[idx]) / (2.0 * h)
            total += float(v[idx] @ hv)
        raw[g] = total / probes
    shares, fallback = _shares(raw, list(groups))
    return shares, raw, fallback


def importance_report(model_fn: Callable, params: np.ndarray, groups: dict,
                      probes: int = 8, fd_step: float = DEFAULT_FD_STEP,
                      seed: int = 0) -> ImportanceReport:
    """Run both estimators and assemble the combined report."""
    params = np.asarray(params, dtype=np.float64)
    checked = _validate_groups(groups, params.size)
    t_shares, t_raw, t_flag = taylor_fo_importance(model_fn, params, groups, fd_step)
    h_shares, h_raw, h_flag = hessian_trace_importance(
        model_fn, params, groups, probes, fd_step, seed)
    p_share = {g: idx.size / params.size for g, idx in checked.items()}
    return ImportanceReport(
        groups=list(checked), taylor_fo_share=t_shares, hessian_share=h_shares,
        param_share=p_share, taylor_uniform_fallback=t_flag,
        hessian_uniform_fallback=h_flag, raw_taylor=t_raw, raw_hessian=h_raw,
    )


# ---------------------------------------------------------------------------
# Attention rollout
# ---------------------------------------------------------------------------

def attention_rollout(trace: ForwardTrace) -> np.ndarray:
    """Multiply residual-mixed attention maps; return the CLS attribution grid.

    Per layer: A' = row-normalize(0.5 * mean_heads(A) + 0.5 * I). The product
    A'_L ... A'_1 row is taken at the CLS token, restricted to patch tokens,
    reshaped to the patch grid and min-max normalized into [0, 1].
    """
    if not trace.attention:
        raise MissingTraceError("no attention maps captured in trace")
    rollout = None
    for probs in trace.attention:
        a = probs.mean(axis=0).astype(np.float64)  # heads fused by mean
        a = 0.5 * a + 0.5 * np.eye(a.shape[0])
        a = a / a.sum(axis=1, keepdims=True)
        rollout = a if rollout is None else a @ rollout
    cls_row = rollout[0, 1:]
    grid = int(np.sqrt(cls_row.size))
    m = cls_row.reshape(grid, grid)
    lo, hi = m.min(), m.max()
    # a span at float-rounding level means a genuinely flat map; min-max
    # normalizing it would amplify last-ULP matmul noise to full range
    if hi - lo > 1e-9 * max(abs(hi), 1e-30):
        m = (m - lo) / (hi - lo)
    else:
        m = np.zeros_like(m)
    return m.astype(np.float32)


# ---------------------------------------------------------------------------
# Fidelity comparison
# ---------------------------------------------------------------------------

def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 and nb == 0.0:
        return 1.0
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    sa, sb = a.std(), b.std()
    if sa == 0.0 or sb == 0.0:
        return 1.0 if np.array_equal(a, b) else 0.0
    return float(np.corrcoef(a, b)[0, 1])


@dataclass
class FidelityReport:
    zero_fraction: dict               # tensor name -> fraction; "global" key pooled
    patch_cos_mean: float
    patch_cos_std: float
    patch_cos_p5: float
    patch_cos_p95: float
    ln_gamma_cos: float
    ln_beta_cos: float
    logit_pearson_per_image: list
    logit_pearson_mean: float
    logit_pearson_pooled: float

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["metric", "name", "value"])
            for name, frac in self.zero_fraction.items():
                w.writerow(["zero_fraction", name, f"{frac:.6f}"])
            for k in ("patch_cos_mean", "patch_cos_std", "patch_cos_p5",
                      "patch_cos_p95", "ln_gamma_cos", "ln_beta_cos",
                      "logit_pearson_mean", "logit_pearson_pooled"):
                w.writerow([k, "", f"{getattr(self, k):.6f}"])
            for i, r in enumerate(self.logit_pearson_per_image):
                w.writerow(["logit_pearson", f"image_{i}", f"{r:.6f}"])


def fidelity_compare(fp32_traces, tern_traces, fp32_weights,
                     tern_weights) -> FidelityReport:
    """Compare fp32 and ternary runs of the same images plus their weights.

    Traces may be single ForwardTrace objects or equal-length lists. The
    fp32 weight set supplies reference gamma/beta vectors; the ternary set
    supplies codes for the zero-fraction census.
    """
    if isinstance(fp32_traces, ForwardTrace):
        fp32_traces = [fp32_traces]
    if isinstance(tern_traces, ForwardTrace):
        tern_traces = [tern_traces]
    if len(fp32_traces) != len(tern_traces):
        raise ShapeMismatchError(
            f"{len(fp32_traces)} fp32 traces vs {len(tern_traces)} ternary"
        )

    # zero fraction census over every ternary weight tensor
    zero_fraction = {}
    zeros = total = 0
    for name, tt in tern_weights.ternary_tensors().items():
        if not isinstance(tt, TernaryTensor):
            continue
        zero_fraction[name] = tt.zero_fraction()
        zeros += int(np.count_nonzero(tt.codes == 0))
        total += tt.codes.size
    zero_fraction["global"] = zeros / total if total else 0.0

    # per-token cosine of patch-embedding features
    cosines = []
    for ft, tt in zip(fp32_traces, tern_traces):
        if ft.patch_tokens is None or tt.patch_tokens is None:
            raise MissingTraceError("patch_tokens not captured")
        if ft.patch_tokens.shape != tt.patch_tokens.shape:
            raise ShapeMismatchError("patch token shapes differ")
        for t in range(ft.patch_tokens.shape[0]):
            cosines.append(_cosine(ft.patch_tokens[t], tt.patch_tokens[t]))
    cosines = np.asarray(cosines)

    # LayerNorm affine fidelity: fp32 vector vs dequantized ternary vector
    g_cos, b_cos = [], []
    fp32_norms = _collect_norm_vectors(fp32_weights)
    tern_norms = _collect_norm_vectors(tern_weights)
    for name, (g_ref, b_ref) in fp32_norms.items():
        g_q, b_q = tern_norms[name]
        g_cos.append(_cosine(g_ref, g_q))
        b_cos.append(_cosine(b_ref, b_q))

    per_image = []
    pooled_f, pooled_t = [], []
    for ft, tt in zip(fp32_traces, tern_traces):
        per_image.append(_pearson(ft.logits, tt.logits))
        pooled_f.append(np.asarray(ft.logits, dtype=np.float64))
        pooled_t.append(np.asarray(tt.logits, dtype=np.float64))
    pooled = _pearson(np.concatenate(pooled_f), np.concatenate(pooled_t))

    return FidelityReport(
        zero_fraction=zero_fraction,
        patch_cos_mean=float(cosines.mean()),
        patch_cos_std=float(cosines.std()),
        patch_cos_p5=float(np.percentile(cosines, 5)),
        patch_cos_p95=float(np.percentile(cosines, 95)),
        ln_gamma_cos=float(np.mean(g_cos)),
        ln_beta_cos=float(np.mean(b_cos)),
        logit_pearson_per_image=per_image,
        logit_pearson_mean=float(np.mean(per_image)),
        logit_pearson_pooled=pooled,
    )


def _collect_norm_vectors(weights) -> dict:
    """name -> (gamma, beta) float vectors for every LayerNorm in the model."""
    out = {}

    def vec(norm):
        if isinstance(norm, TernaryAffine):
            return norm.gamma.dequantized(), norm.beta.dequantized()
        return np.asarray(norm.gamma), np.asarray(norm.beta)

    for i, blk in enumerate(weights.blocks):
        out[f"blocks.{i}.ln1"] = vec(blk.ln1)
        out[f"blocks.{i}.ln2"] = vec(blk.ln2)
    out["norm"] = vec(weights.norm)
    return out
