"""Float emulation of the quantized forward path.

Re-runs the engine's graph propagating engine-identical float32 state, and at
every ternary matmul recomputes the result two independent ways from the same
quantized operands:

  * an exact float64 accumulator of the int8 values x ternary codes, which
    must equal the engine's int32 accumulator bit for bit, and
  * a float64 matmul of the dequantized operands (values / s_x) @ (s_w *
    codes)^T, the "float emulation" whose outputs the engine must track.

Returns the emulated logits and the worst per-layer relative deviation.
"""
import numpy as np

from ternforge import kernels as K
from ternforge.model import (
    TraceOptions,
    VitWeights,
    _apply_layerscale,
    _apply_norm,
    _patch_embed_f32,
    forward,
)
from ternforge.quantize import (
    quantize_activations_per_channel,
    quantize_activations_per_token,
)


def _rel_diff(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / denom) if denom else float(np.linalg.norm(a))


class QuantizedEmulation:
    """Engine-state-propagating emulation of one quantized forward pass."""

    def __init__(self, weights: VitWeights):
        self.weights = weights
        self.accumulators = {}
        self.emulated = {}
        self.max_layer_rel_diff = 0.0

    def _linear(self, x: np.ndarray, layer, name: str) -> np.ndarray:
        """Engine-exact output, plus emulated output and exact accumulator."""
        cfg = self.weights.config
        if cfg.pre_quant_rmsnorm:
            from ternforge.quantize import rms_normalize
            x = rms_normalize(x, cfg.eps_ln)
        q = quantize_activations_per_token(x)
        codes = layer.weights.codes
        acc = q.values.astype(np.float64) @ codes.astype(np.float64).T
        self.accumulators[name] = acc.astype(np.int32)
        x_hat = q.values.astype(np.float64) / q.scales[:, None].astype(np.float64)
        if layer.weights.scale_kind == "per_tensor":
            w_hat = codes.astype(np.float64) * float(layer.weights.scale)
        else:
            w_hat = codes.astype(np.float64) * np.asarray(
                layer.weights.scale, dtype=np.float64)[:, None]
        y_emul = x_hat @ w_hat.T
        if layer.bias is not None:
            y_emul = y_emul + layer.bias.astype(np.float64)
        self.emulated[name] = y_emul
        y_engine = K.tern_matmul(q, layer)
        self.max_layer_rel_diff = max(self.max_layer_rel_diff,
                                      _rel_diff(y_engine, y_emul))
        return y_engine

    def _patch_embed(self, img: np.ndarray) -> np.ndarray:
        layer = self.weights.patch_embed
        if not isinstance(layer, K.ConvPatchEmbedTern):
            return _patch_embed_f32(img, layer)
        p = layer.patch
        q = quantize_activations_per_channel(img)
        patches = K.extract_patches_i8(q.values, p).astype(np.float64)
        c_out, c_in = layer.weights.shape[:2]
        codes = layer.weights.codes.reshape(c_out, c_in, p * p).astype(np.float64)
        y_emul = np.zeros((patches.shape[0], c_out))
        for c in range(c_in):
            x_hat = patches[:, c, :] / float(q.scales[c])
            w_hat = codes[:, c, :] * np.asarray(layer.weights.scale,
                                                dtype=np.float64)[:, None]
            y_emul += x_hat @ w_hat.T
        if layer.bias is not None:
            y_emul = y_emul + layer.bias.astype(np.float64)
        y_engine = K.tern_conv_patch_embed(img, layer)
        self.max_layer_rel_diff = max(self.max_layer_rel_diff,
                                      _rel_diff(y_engine, y_emul))
        self.emulated["patch_embed"] = y_emul
        return y_engine

    def run(self, img: np.ndarray) -> np.ndarray:
        w = self.weights
        cfg = w.config
        tokens = self._patch_embed(np.asarray(img, dtype=np.float32))
        x = np.concatenate([w.cls_token[None, :], tokens], axis=0)
        x = (x + w.pos_embed).astype(np.float32)
        for i, blk in enumerate(w.blocks):
            h = _apply_norm(x, blk.ln1)
            qkv = self._linear(h, blk.qkv, f"blocks.{i}.attn.qkv")
            q3, k3, v3 = np.split(qkv, 3, axis=1)
            out, _ = K.attention_with_probs(
                K.split_heads(q3, cfg.heads),
                K.split_heads(k3, cfg.heads),
                K.split_heads(v3, cfg.heads),
            )
            out = self._linear(out, blk.proj, f"blocks.{i}.attn.proj")
            x = (x + _apply_layerscale(out, blk.ls1)).astype(np.float32)
            h = _apply_norm(x, blk.ln2)
            h = self._linear(h, blk.fc1, f"blocks.{i}.mlp.fc1")
            h = K.gelu(h)
            h = self._linear(h, blk.fc2, f"blocks.{i}.mlp.fc2")
            x = (x + _apply_layerscale(h, blk.ls2)).astype(np.float32)
        x = _apply_norm(x, w.norm)
        logits = self._linear(x[0:1, :], w.head, "head")[0]
        return logits


def run_emulation_check(weights: VitWeights, img) -> dict:
    """Engine forward + emulation; returns comparison summary."""
    engine_logits, trace = forward(weights, img,
                                   TraceOptions(accumulators=True))
    emu = QuantizedEmulation(weights)
    emu_logits = emu.run(img)
    acc_equal = all(
        np.array_equal(trace.accumulators[name], emu.accumulators[name])
        for name in emu.accumulators
    )
    emulated_head = emu.emulated["head"][0]
    return {
        "engine_logits": engine_logits,
        "emulation_logits": emu_logits,
        "accumulators_bit_equal": acc_equal and set(trace.accumulators)
        == set(emu.accumulators),
        "logits_rel_diff": _rel_diff(engine_logits, emulated_head),
        "max_layer_rel_diff": emu.max_layer_rel_diff,
        "logits_bit_equal": bool(np.array_equal(engine_logits, emu_logits)),
    }
