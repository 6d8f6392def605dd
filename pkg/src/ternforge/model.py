"""ViT computation graph: weights containers, precision plans, forward pass.

The graph is the standard pre-norm encoder: patch embedding, prepended CLS
token, additive position embedding, ``depth`` blocks of
``x += LS1(Attn(LN1(x)))`` and ``x += LS2(MLP(LN2(x)))``, a final LayerNorm
and a classifier head on the CLS token. Under a quantized plan every ternary
linear/conv quantizes its input activations on the fly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import kernels as K
from . import tensor as T
from .config import (
    PLAN_FP32,
    PLAN_PARTIAL_W2,
    PLAN_TERNARY,
    PLANS,
    STORE_F16,
    STORE_F32,
    STORE_TERN_PC,
    VitConfig,
    plan_storage,
    tensor_specs,
)
from .errors import (
    MissingTensorError,
    NanDetectedError,
    ShapeMismatchError,
)
from .packing import (
    KIND_F16,
    KIND_F32,
    KIND_TERN2,
    KIND_TERN2_PC,
    FTV_MAGIC,
    ModelContainer,
    TensorRecord,
)
from .quantize import (
    TernaryAffine,
    TernaryTensor,
    layernorm_fp32,
    quantize_activations_per_token,
    rms_normalize,
    ternarize_conv_weights,
    ternarize_weights,
    ternary_layernorm,
)


@dataclass
class LinearF32:
    weight: np.ndarray  # [out, in]
    bias: Optional[np.ndarray] = None


@dataclass
class AffineF32:
    gamma: np.ndarray
    beta: np.ndarray
    eps: float


@dataclass
class ConvPatchEmbedF32:
    weight: np.ndarray  # [C_out, C_in, p, p]
    bias: Optional[np.ndarray] = None


Linear = Union[K.LinearLayerTern, LinearF32]
Norm = Union[TernaryAffine, AffineF32]
PatchEmbed = Union[K.ConvPatchEmbedTern, ConvPatchEmbedF32]
LayerScale = Union[TernaryTensor, np.ndarray, None]


@dataclass
class BlockWeights:
    ln1: Norm
    qkv: Linear
    proj: Linear
    ln2: Norm
    fc1: Linear
    fc2: Linear
    ls1: LayerScale = None
    ls2: LayerScale = None


@dataclass
class VitWeights:
    """Immutable weight set for one precision plan; shareable across threads."""

    config: VitConfig
    plan: str
    patch_embed: PatchEmbed
    cls_token: np.ndarray
    pos_embed: np.ndarray
    blocks: list
    norm: Norm
    head: Linear

    def ternary_tensors(self) -> dict:
        """name -> TernaryTensor for every ternarized weight (fidelity input)."""
        out = {}

        def grab(name, obj):
            if isinstance(obj, K.LinearLayerTern):
                out[name] = obj.weights
            elif isinstance(obj, K.ConvPatchEmbedTern):
                out[name] = obj.weights
            elif isinstance(obj, TernaryAffine):
                out[f"{name}.gamma"] = obj.gamma
                out[f"{name}.beta"] = obj.beta
            elif isinstance(obj, TernaryTensor):
                out[name] = obj

        grab("patch_embed", self.patch_embed)
        for i, blk in enumerate(self.blocks):
            b = f"blocks.{i}"
            grab(f"{b}.ln1", blk.ln1)
            grab(f"{b}.attn.qkv", blk.qkv)
            grab(f"{b}.attn.proj", blk.proj)
            grab(f"{b}.ln2", blk.ln2)
            grab(f"{b}.mlp.fc1", blk.fc1)
            grab(f"{b}.mlp.fc2", blk.fc2)
            grab(f"{b}.ls1", blk.ls1)
            grab(f"{b}.ls2", blk.ls2)
        grab("norm", self.norm)
        grab("head", self.head)
        return out


@dataclass
class TraceOptions:
    attention: bool = False
    patch_embed: bool = False
    accumulators: bool = False


@dataclass
class ForwardTrace:
    patch_tokens: Optional[np.ndarray] = None      # [grid*grid, dim]
    attention: list = field(default_factory=list)  # per block [heads, t, t]
    cls_pre_head: Optional[np.ndarray] = None
    logits: Optional[np.ndarray] = None
    accumulators: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Building weights from an archive
# ---------------------------------------------------------------------------

def _f16_round(arr: np.ndarray) -> np.ndarray:
    """Round to the nearest half-precision value, kept as float32 for compute."""
    return arr.astype(np.float16).astype(np.float32)


def _archive_tensor(archive: ModelContainer, name: str, shape: tuple) -> np.ndarray:
    if name not in archive.tensors:
        raise MissingTensorError(name)
    rec = archive.tensors[name]
    if tuple(rec.shape) != tuple(shape):
        raise ShapeMismatchError(f"{name}: archive {rec.shape} vs config {shape}")
    return rec.dequantized().reshape(shape)


def _split_scale_qkv(w: np.ndarray, eps: float) -> TernaryTensor:
    """Ternarize each of the Q/K/V thirds with its own absmean scale."""
    out = w.shape[0]
    third = out // 3
    codes = np.empty(w.shape, dtype=np.int8)
    scales = np.empty(out, dtype=np.float32)
    for s in range(3):
        sl = slice(s * third, (s + 1) * third)
        t = ternarize_weights(w[sl], eps)
        codes[sl] = t.codes
        scales[sl] = t.scale
    return TernaryTensor(codes, scales, "per_out_channel")


def build_from_archive(archive: ModelContainer, config: VitConfig,
                       plan: str) -> VitWeights:
    """Quantize an fp32 archive into a VitWeights set under a precision plan."""
    if plan not in PLANS:
        raise ValueError(f"unknown plan '{plan}'")
    eps_w = config.eps_w
    specs = {s.name: s for s in tensor_specs(config)}

    def fetch(name):
        return _archive_tensor(archive, name, specs[name].shape)

    def storage(name):
        return plan_storage(specs[name], plan, config)

    def make_linear(wname, bname) -> Linear:
        w = fetch(wname)
        b = fetch(bname)
        if storage(wname) == STORE_F32:
            return LinearF32(w, b)
        bias = _f16_round(b) if storage(bname) == STORE_F16 else b
        if storage(wname) == STORE_TERN_PC:  # split-scale fused QKV
            return K.LinearLayerTern(_split_scale_qkv(w, eps_w), bias)
        return K.LinearLayerTern(ternarize_weights(w, eps_w), bias)

    def make_norm(prefix) -> Norm:
        g = fetch(f"{prefix}.gamma")
        b = fetch(f"{prefix}.beta")
        if storage(f"{prefix}.gamma") == STORE_F32:
            return AffineF32(g, b, config.eps_ln)
        return TernaryAffine(ternarize_weights(g, eps_w),
                             ternarize_weights(b, eps_w), config.eps_ln)

    def make_layerscale(name) -> LayerScale:
        if name not in specs:
            return None
        g = fetch(name)
        if storage(name) == STORE_F32:
            return g
        return ternarize_weights(g, eps_w)

    pw = fetch("patch_embed.weight")
    pb = fetch("patch_embed.bias")
    if storage("patch_embed.weight") == STORE_F32:
        patch: PatchEmbed = ConvPatchEmbedF32(pw, pb)
    else:
        bias = _f16_round(pb) if storage("patch_embed.bias") == STORE_F16 else pb
        patch = K.ConvPatchEmbedTern(ternarize_conv_weights(pw, eps_w), bias)

    cls = fetch("cls_token")
    pos = fetch("pos_embed")
    if storage("cls_token") == STORE_F16:
        cls = _f16_round(cls)
        pos = _f16_round(pos)

    blocks = []
    for i in range(config.depth):
        b = f"blocks.{i}"
        blocks.append(BlockWeights(
            ln1=make_norm(f"{b}.ln1"),
            qkv=make_linear(f"{b}.attn.qkv.weight", f"{b}.attn.qkv.bias"),
            proj=make_linear(f"{b}.attn.proj.weight", f"{b}.attn.proj.bias"),
            ln2=make_norm(f"{b}.ln2"),
            fc1=make_linear(f"{b}.mlp.fc1.weight", f"{b}.mlp.fc1.bias"),
            fc2=make_linear(f"{b}.mlp.fc2.weight", f"{b}.mlp.fc2.bias"),
            ls1=make_layerscale(f"{b}.ls1.gamma"),
            ls2=make_layerscale(f"{b}.ls2.gamma"),
        ))

    return VitWeights(
        config=config, plan=plan, patch_embed=patch, cls_token=cls, pos_embed=pos,
        blocks=blocks, norm=make_norm("norm"),
        head=make_linear("head.weight", "head.bias"),
    )


# ---------------------------------------------------------------------------
# FTV container conversion
# ---------------------------------------------------------------------------

def weights_to_container(weights: VitWeights) -> ModelContainer:
    """Flatten VitWeights into an FTV container under the canonical naming."""
    cfg = weights.config
    container = ModelContainer(FTV_MAGIC, cfg)
    specs = {s.name: s for s in tensor_specs(cfg)}

    def add(name, obj):
        spec = specs[name]
        storage = plan_storage(spec, weights.plan, cfg)
        if isinstance(obj, TernaryTensor):
            kind = KIND_TERN2 if obj.scale_kind == "per_tensor" else KIND_TERN2_PC
            rec = TensorRecord(name, kind, spec.shape, obj.codes, obj.scale)
        elif storage == STORE_F16:
            rec = TensorRecord(name, KIND_F16, spec.shape,
                               np.asarray(obj).astype(np.float16))
        else:
            rec = TensorRecord(name, KIND_F32, spec.shape,
                               np.asarray(obj).astype(np.float32))
        container.add(rec)

    def add_linear(wname, bname, layer):
        if isinstance(layer, K.LinearLayerTern):
            add(wname, layer.weights)
            add(bname, layer.bias)
        else:
            add(wname, layer.weight)
            add(bname, layer.bias)

    def add_norm(prefix, norm):
        add(f"{prefix}.gamma", norm.gamma)
        add(f"{prefix}.beta", norm.beta)

    pe = weights.patch_embed
    if isinstance(pe, K.ConvPatchEmbedTern):
        add("patch_embed.weight", pe.weights)
        add("patch_embed.bias", pe.bias)
    else:
        add("patch_embed.weight", pe.weight)
        add("patch_embed.bias", pe.bias)
    add("cls_token", weights.cls_token)
    add("pos_embed", weights.pos_embed)
    for i, blk in enumerate(weights.blocks):
        b = f"blocks.{i}"
        add_norm(f"{b}.ln1", blk.ln1)
        add_linear(f"{b}.attn.qkv.weight", f"{b}.attn.qkv.bias", blk.qkv)
        add_linear(f"{b}.attn.proj.weight", f"{b}.attn.proj.bias", blk.proj)
        add_norm(f"{b}.ln2", blk.ln2)
        add_linear(f"{b}.mlp.fc1.weight", f"{b}.mlp.fc1.bias", blk.fc1)
        add_linear(f"{b}.mlp.fc2.weight", f"{b}.mlp.fc2.bias", blk.fc2)
        if blk.ls1 is not None:
            add(f"{b}.ls1.gamma", blk.ls1)
            add(f"{b}.ls2.gamma", blk.ls2)
    add_norm("norm", weights.norm)
    add_linear("head.weight", "head.bias", weights.head)
    return container


def weights_from_container(container: ModelContainer, plan: str = "") -> VitWeights:
    """Rebuild VitWeights from a loaded FTV container."""
    cfg = container.config
    specs = {s.name: s for s in tensor_specs(cfg)}
    for name in specs:
        if name not in container.tensors:
            raise MissingTensorError(name)

    def rec(name) -> TensorRecord:
        r = container.tensors[name]
        if tuple(r.shape) != tuple(specs[name].shape):
            raise ShapeMismatchError(f"{name}: {r.shape} vs {specs[name].shape}")
        return r

    def as_tern(r: TensorRecord) -> TernaryTensor:
        kind = "per_tensor" if r.kind == KIND_TERN2 else "per_out_channel"
        return TernaryTensor(r.data, r.scale, kind)

    def get_linear(wname, bname) -> Linear:
        w, b = rec(wname), rec(bname)
        if w.kind in (KIND_TERN2, KIND_TERN2_PC):
            return K.LinearLayerTern(as_tern(w), b.dequantized())
        return LinearF32(w.dequantized(), b.dequantized())

    def get_norm(prefix) -> Norm:
        g, b = rec(f"{prefix}.gamma"), rec(f"{prefix}.beta")
        if g.kind == KIND_TERN2:
            return TernaryAffine(as_tern(g), as_tern(b), cfg.eps_ln)
        return AffineF32(g.dequantized(), b.dequantized(), cfg.eps_ln)

    def get_ls(name) -> LayerScale:
        if name not in specs:
            return None
        r = rec(name)
        return as_tern(r) if r.kind == KIND_TERN2 else r.dequantized()

    pw = rec("patch_embed.weight")
    if pw.kind == KIND_TERN2_PC:
        patch: PatchEmbed = K.ConvPatchEmbedTern(
            as_tern(pw), rec("patch_embed.bias").dequantized())
    else:
        patch = ConvPatchEmbedF32(pw.dequantized(),
                                  rec("patch_embed.bias").dequantized())

    # Infer the plan from stored kinds when not supplied.
    if not plan:
        if pw.kind == KIND_TERN2_PC:
            plan = PLAN_TERNARY
        elif rec("blocks.0.attn.qkv.weight").kind in (KIND_TERN2, KIND_TERN2_PC):
            plan = PLAN_PARTIAL_W2
        else:
            plan = PLAN_FP32

    blocks = []
    for i in range(cfg.depth):
        b = f"blocks.{i}"
        blocks.append(BlockWeights(
            ln1=get_norm(f"{b}.ln1"),
            qkv=get_linear(f"{b}.attn.qkv.weight", f"{b}.attn.qkv.bias"),
            proj=get_linear(f"{b}.attn.proj.weight", f"{b}.attn.proj.bias"),
            ln2=get_norm(f"{b}.ln2"),
            fc1=get_linear(f"{b}.mlp.fc1.weight", f"{b}.mlp.fc1.bias"),
            fc2=get_linear(f"{b}.mlp.fc2.weight", f"{b}.mlp.fc2.bias"),
            ls1=get_ls(f"{b}.ls1.gamma"),
            ls2=get_ls(f"{b}.ls2.gamma"),
        ))
    return VitWeights(
        config=cfg, plan=plan, patch_embed=patch,
        cls_token=rec("cls_token").dequantized(),
        pos_embed=rec("pos_embed").dequantized(),
        blocks=blocks, norm=get_norm("norm"),
        head=get_linear("head.weight", "head.bias"),
    )


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

class _NullTimer:
    def section(self, name):
        import contextlib
        return contextlib.nullcontext()


_NULL_TIMER = _NullTimer()


def _apply_linear(x: np.ndarray, layer: Linear, cfg: VitConfig,
                  acc_sink=None, acc_name: str = "") -> np.ndarray:
    if isinstance(layer, LinearF32):
        y = x @ layer.weight.T
        if layer.bias is not None:
            y = y + layer.bias
        return y.astype(np.float32)
    if cfg.pre_quant_rmsnorm:
        x = rms_normalize(x, cfg.eps_ln)
    q = quantize_activations_per_token(x)
    if acc_sink is not None:
        acc_sink[acc_name] = K._int_matmul(q.values, layer.weights.codes)
    return K.tern_matmul(q, layer)


def _apply_norm(x: np.ndarray, norm: Norm) -> np.ndarray:
    if isinstance(norm, TernaryAffine):
        return ternary_layernorm(x, norm)
    return layernorm_fp32(x, norm.gamma, norm.beta, norm.eps)


def _apply_layerscale(x: np.ndarray, ls: LayerScale) -> np.ndarray:
    if ls is None:
        return x
    vec = ls.dequantized() if isinstance(ls, TernaryTensor) else ls
    return (x * vec).astype(np.float32)


def _patch_embed_f32(img: np.ndarray, layer: ConvPatchEmbedF32) -> np.ndarray:
    c_out, c_in, p, _ = layer.weight.shape
    if img.shape[1] % p or img.shape[2] % p:
        raise ShapeMismatchError(f"image {img.shape} vs patch {p}")
    gh, gw = img.shape[1] // p, img.shape[2] // p
    v = img.reshape(c_in, gh, p, gw, p).transpose(1, 3, 0, 2, 4)
    cols = v.reshape(gh * gw, c_in * p * p)
    y = cols @ layer.weight.reshape(c_out, -1).T
    if layer.bias is not None:
        y = y + layer.bias
    return y.astype(np.float32)


def forward(weights: VitWeights, img: np.ndarray,
            trace_opts: Optional[TraceOptions] = None,
            timer=None) -> tuple[np.ndarray, ForwardTrace]:
    """Run one image through the model; returns (logits, trace).

    ``img`` is the normalized [C, H, W] float32 input at the configured
    resolution. Non-finite intermediates abort with the offending layer name.
    """
    cfg = weights.config
    opts = trace_opts or TraceOptions()
    sw = timer or _NULL_TIMER
    trace = ForwardTrace()
    img = T.as_f32(img)
    if img.shape != (cfg.in_channels, cfg.img_size, cfg.img_size):
        raise ShapeMismatchError(
            f"image {img.shape}, config wants "
            f"({cfg.in_channels}, {cfg.img_size}, {cfg.img_size})"
        )
    if not np.isfinite(img).all():
        raise NanDetectedError("input image")

    acc_sink = trace.accumulators if opts.accumulators else None

    with sw.section("patch_embed"):
        if isinstance(weights.patch_embed, K.ConvPatchEmbedTern):
            tokens = K.tern_conv_patch_embed(img, weights.patch_embed)
        else:
            tokens = _patch_embed_f32(img, weights.patch_embed)
    if opts.patch_embed:
        trace.patch_tokens = tokens.copy()

    x = np.concatenate([weights.cls_token[None, :], tokens], axis=0)
    x = (x + weights.pos_embed).astype(np.float32)
    _check_finite(x, "pos_embed")

    for i, blk in enumerate(weights.blocks):
        with sw.section("ln"):
            h = _apply_norm(x, blk.ln1)
        with sw.section("qkv"):
            qkv = _apply_linear(h, blk.qkv, cfg, acc_sink, f"blocks.{i}.attn.qkv")
        with sw.section("attention"):
            q, k, v = np.split(qkv, 3, axis=1)
            out, probs = K.attention_with_probs(
                K.split_heads(q, cfg.heads),
                K.split_heads(k, cfg.heads),
                K.split_heads(v, cfg.heads),
            )
        if opts.attention:
            trace.attention.append(probs.copy())
        with sw.section("proj"):
            out = _apply_linear(out, blk.proj, cfg, acc_sink, f"blocks.{i}.attn.proj")
        x = (x + _apply_layerscale(out, blk.ls1)).astype(np.float32)
        with sw.section("ln"):
            h = _apply_norm(x, blk.ln2)
        with sw.section("ffn"):
            h = _apply_linear(h, blk.fc1, cfg, acc_sink, f"blocks.{i}.mlp.fc1")
            h = K.gelu(h)
            h = _apply_linear(h, blk.fc2, cfg, acc_sink, f"blocks.{i}.mlp.fc2")
        x = (x + _apply_layerscale(h, blk.ls2)).astype(np.float32)
        _check_finite(x, f"blocks.{i}")

    with sw.section("head"):
        x = _apply_norm(x, weights.norm)
        cls = x[0:1, :]
        logits = _apply_linear(cls, weights.head, cfg, acc_sink, "head")[0]
    _check_finite(logits, "head")
    if opts.patch_embed or opts.attention or opts.accumulators:
        trace.cls_pre_head = cls[0].copy()
    trace.logits = logits.copy()
    return logits, trace


def _check_finite(x: np.ndarray, where: str) -> None:
    if not np.isfinite(x).all():
        raise NanDetectedError(where)


def predict_topk(logits: np.ndarray, k: int,
                 labels: Optional[list] = None) -> list:
    """Top-k (class index, label, score), ties broken by lower class index."""
    logits = np.asarray(logits)
    k = min(k, logits.size)
    order = np.argsort(-logits, kind="stable")[:k]
    out = []
    for idx in order:
        name = labels[idx] if labels and idx < len(labels) else str(int(idx))
        out.append((int(idx), name, float(logits[idx])))
    return out
