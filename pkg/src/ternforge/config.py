"""Model configuration, canonical tensor naming, and precision plans.

The canonical naming scheme (``patch_embed.weight``, ``blocks.{i}.attn.qkv.weight``,
``blocks.{i}.ln1.gamma``, ``head.weight``, ...) is the contract between weight
archives, the packed model format, and the inference engine. ``tensor_specs``
enumerates every tensor a config requires, in file order.

Precision plans:
  fp32        everything stored and computed in float32.
  partial-w2  encoder linears and the classifier head ternarized; patch
              embedding, LayerNorm affines, biases and embeddings stay float32.
  ternary     every weight matrix, LayerNorm affine and (by default)
              LayerScale ternarized; biases and embeddings stored at
              half precision and upcast for compute.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

# ImageNet per-channel normalization applied to image inputs.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

PLAN_FP32 = "fp32"
PLAN_PARTIAL_W2 = "partial-w2"
PLAN_TERNARY = "ternary"
PLANS = (PLAN_FP32, PLAN_PARTIAL_W2, PLAN_TERNARY)

# Storage classes a plan assigns to a tensor (mapped to format kind bytes
# by the packing module).
STORE_F32 = "f32"
STORE_F16 = "f16"
STORE_TERN = "tern"
STORE_TERN_PC = "tern_pc"


@dataclass
class VitConfig:
    depth: int = 12
    dim: int = 192
    heads: int = 3
    mlp_ratio: float = 4.0
    patch: int = 16
    img_size: int = 224
    in_channels: int = 3
    num_classes: int = 1000
    use_layerscale: bool = False
    eps_ln: float = 1e-6
    eps_w: float = 1e-6
    pre_quant_rmsnorm: bool = False
    fp32_layerscale: bool = False
    split_qkv_scales: bool = False
    norm_mean: tuple = IMAGENET_MEAN
    norm_std: tuple = IMAGENET_STD

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.img_size % self.patch != 0:
            raise ValueError(f"img_size {self.img_size} not divisible by patch {self.patch}")
        # float fields are stored at f32 in the model file; normalize now so a
        # config survives the write/read roundtrip unchanged
        self.mlp_ratio = float(np.float32(self.mlp_ratio))
        self.eps_ln = float(np.float32(self.eps_ln))
        self.eps_w = float(np.float32(self.eps_w))
        self.norm_mean = tuple(float(np.float32(v)) for v in self.norm_mean)
        self.norm_std = tuple(float(np.float32(v)) for v in self.norm_std)

    @property
    def grid(self) -> int:
        return self.img_size // self.patch

    @property
    def tokens(self) -> int:
        return self.grid * self.grid + 1

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def hidden_dim(self) -> int:
        return int(self.mlp_ratio * self.dim)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "VitConfig":
        return cls(**json.loads(text))


NAMED_CONFIGS = {
    "deit_tiny_224": dict(depth=12, dim=192, heads=3),
    "deit_small_224": dict(depth=12, dim=384, heads=6),
    "deit3_small_224": dict(depth=12, dim=384, heads=6, use_layerscale=True),
    "deit3_small_384": dict(depth=12, dim=384, heads=6, use_layerscale=True,
                            img_size=384),
}


def named_config(name: str) -> VitConfig:
    if name not in NAMED_CONFIGS:
        raise KeyError(f"unknown config '{name}'; choices: {sorted(NAMED_CONFIGS)}")
    return VitConfig(**NAMED_CONFIGS[name])


def load_config(name_or_path: str) -> VitConfig:
    """Resolve a named preset, else read a JSON config file."""
    if name_or_path in NAMED_CONFIGS:
        return named_config(name_or_path)
    with open(name_or_path, "r", encoding="utf-8") as f:
        return VitConfig.from_json(f.read())


# Tensor roles drive the plan -> storage mapping.
ROLE_PATCH_W = "patch_w"
ROLE_QKV_W = "qkv_w"
ROLE_LINEAR_W = "linear_w"
ROLE_HEAD_W = "head_w"
ROLE_LN = "ln"
ROLE_LAYERSCALE = "layerscale"
ROLE_BIAS = "bias"
ROLE_EMBED = "embed"


@dataclass(frozen=True)
class TensorSpec:
    name: str
    shape: tuple
    role: str
    component: str  # patch_embed | attention | ffn | layernorm | head | embeddings


def tensor_specs(config: VitConfig) -> list[TensorSpec]:
    """Every tensor of the model in canonical (file) order."""
    d, p, c = config.dim, config.patch, config.in_channels
    hd = config.hidden_dim
    specs = [
        TensorSpec("patch_embed.weight", (d, c, p, p), ROLE_PATCH_W, "patch_embed"),
        TensorSpec("patch_embed.bias", (d,), ROLE_BIAS, "patch_embed"),
        TensorSpec("cls_token", (d,), ROLE_EMBED, "embeddings"),
        TensorSpec("pos_embed", (config.tokens, d), ROLE_EMBED, "embeddings"),
    ]
    for i in range(config.depth):
        b = f"blocks.{i}"
        specs += [
            TensorSpec(f"{b}.ln1.gamma", (d,), ROLE_LN, "layernorm"),
            TensorSpec(f"{b}.ln1.beta", (d,), ROLE_LN, "layernorm"),
            TensorSpec(f"{b}.attn.qkv.weight", (3 * d, d), ROLE_QKV_W, "attention"),
            TensorSpec(f"{b}.attn.qkv.bias", (3 * d,), ROLE_BIAS, "attention"),
            TensorSpec(f"{b}.attn.proj.weight", (d, d), ROLE_LINEAR_W, "attention"),
            TensorSpec(f"{b}.attn.proj.bias", (d,), ROLE_BIAS, "attention"),
            TensorSpec(f"{b}.ln2.gamma", (d,), ROLE_LN, "layernorm"),
            TensorSpec(f"{b}.ln2.beta", (d,), ROLE_LN, "layernorm"),
            TensorSpec(f"{b}.mlp.fc1.weight", (hd, d), ROLE_LINEAR_W, "ffn"),
            TensorSpec(f"{b}.mlp.fc1.bias", (hd,), ROLE_BIAS, "ffn"),
            TensorSpec(f"{b}.mlp.fc2.weight", (d, hd), ROLE_LINEAR_W, "ffn"),
            TensorSpec(f"{b}.mlp.fc2.bias", (d,), ROLE_BIAS, "ffn"),
        ]
        if config.use_layerscale:
            specs += [
                TensorSpec(f"{b}.ls1.gamma", (d,), ROLE_LAYERSCALE, "attention"),
                TensorSpec(f"{b}.ls2.gamma", (d,), ROLE_LAYERSCALE, "ffn"),
            ]
    specs += [
        TensorSpec("norm.gamma", (d,), ROLE_LN, "layernorm"),
        TensorSpec("norm.beta", (d,), ROLE_LN, "layernorm"),
        TensorSpec("head.weight", (config.num_classes, d), ROLE_HEAD_W, "head"),
        TensorSpec("head.bias", (config.num_classes,), ROLE_BIAS, "head"),
    ]
    return specs


def param_count(config: VitConfig) -> int:
    total = 0
    for spec in tensor_specs(config):
        n = 1
        for s in spec.shape:
            n *= s
        total += n
    return total


def plan_storage(spec: TensorSpec, plan: str, config: VitConfig) -> str:
    """Storage class for one tensor under a precision plan."""
    if plan not in PLANS:
        raise ValueError(f"unknown plan '{plan}'")
    if plan == PLAN_FP32:
        return STORE_F32
    if plan == PLAN_PARTIAL_W2:
        if spec.role in (ROLE_QKV_W, ROLE_LINEAR_W, ROLE_HEAD_W):
            return STORE_TERN
        return STORE_F32
    # fully ternary
    if spec.role == ROLE_PATCH_W:
        return STORE_TERN_PC
    if spec.role == ROLE_QKV_W:
        return STORE_TERN_PC if config.split_qkv_scales else STORE_TERN
    if spec.role in (ROLE_LINEAR_W, ROLE_HEAD_W, ROLE_LN):
        return STORE_TERN
    if spec.role == ROLE_LAYERSCALE:
        return STORE_F32 if config.fp32_layerscale else STORE_TERN
    # biases and embeddings: half-precision storage, float32 compute
    return STORE_F16
