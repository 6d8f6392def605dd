import numpy as np
import pytest

from emulation import run_emulation_check
from reference import naive_forward
from ternforge.config import VitConfig, named_config
from ternforge.errors import MissingTensorError, NanDetectedError, ShapeMismatchError
from ternforge.model import (
    TraceOptions,
    build_from_archive,
    forward,
    predict_topk,
    weights_from_container,
    weights_to_container,
)
from ternforge.packing import KIND_F16, KIND_F32, KIND_TERN2, KIND_TERN2_PC
from ternforge.synthetic import generate_archive


def _image(rng, cfg):
    return rng.normal(size=(cfg.in_channels, cfg.img_size, cfg.img_size)).astype(np.float32)


class TestBuildPlans:
    def test_fully_ternary_kinds(self, mini_config, mini_archive):
        w = build_from_archive(mini_archive, mini_config, "ternary")
        container = weights_to_container(w)
        kinds = {name: rec.kind for name, rec in container.tensors.items()}
        assert kinds["patch_embed.weight"] == KIND_TERN2_PC
        for name, kind in kinds.items():
            if name.endswith(".weight") and name != "patch_embed.weight":
                assert kind == KIND_TERN2, name
            if ".ln" in name or name.startswith("norm."):
                assert kind == KIND_TERN2, name
            if name.endswith(".bias") or name in ("cls_token", "pos_embed"):
                assert kind == KIND_F16, name
            if ".ls" in name:
                assert kind == KIND_TERN2, name

    def test_fp32_plan_has_no_ternary(self, mini_config, mini_archive):
        w = build_from_archive(mini_archive, mini_config, "fp32")
        container = weights_to_container(w)
        assert all(rec.kind == KIND_F32 for rec in container.tensors.values())

    def test_partial_w2_layout(self, mini_config, mini_archive):
        w = build_from_archive(mini_archive, mini_config, "partial-w2")
        container = weights_to_container(w)
        kinds = {name: rec.kind for name, rec in container.tensors.items()}
        assert kinds["patch_embed.weight"] == KIND_F32
        assert kinds["blocks.0.ln1.gamma"] == KIND_F32
        assert kinds["blocks.0.attn.qkv.weight"] == KIND_TERN2
        assert kinds["blocks.0.mlp.fc1.weight"] == KIND_TERN2
        assert kinds["head.weight"] == KIND_TERN2
        assert kinds["pos_embed"] == KIND_F32

    def test_missing_tensor(self, mini_config, mini_archive):
        import copy
        broken = copy.copy(mini_archive)
        broken.tensors = dict(mini_archive.tensors)
        del broken.tensors["blocks.1.mlp.fc2.weight"]
        with pytest.raises(MissingTensorError):
            build_from_archive(broken, mini_config, "ternary")

    def test_split_qkv_scales_flag(self, rng):
        cfg = VitConfig(depth=1, dim=16, heads=2, img_size=16, patch=8,
                        num_classes=5, split_qkv_scales=True)
        archive = generate_archive(cfg, seed=3)
        w = build_from_archive(archive, cfg, "ternary")
        qkv = w.blocks[0].qkv
        assert qkv.weights.scale_kind == "per_out_channel"
        scales = np.asarray(qkv.weights.scale)
        # one scale per row, constant within each of the three sections
        assert scales.shape == (48,)
        for s in range(3):
            sec = scales[s * 16:(s + 1) * 16]
            assert np.unique(sec).size == 1

    def test_fp32_layerscale_flag(self):
        cfg = VitConfig(depth=1, dim=16, heads=2, img_size=16, patch=8,
                        num_classes=5, use_layerscale=True, fp32_layerscale=True)
        archive = generate_archive(cfg, seed=4)
        w = build_from_archive(archive, cfg, "ternary")
        assert isinstance(w.blocks[0].ls1, np.ndarray)


class TestForwardShapes:
    def test_token_counts(self):
        assert named_config("deit_tiny_224").tokens == 197
        assert named_config("deit3_small_384").tokens == 577

    @pytest.mark.parametrize("dim,heads,img", [(192, 3, 224), (384, 6, 224),
                                               (192, 3, 384), (384, 6, 384)])
    def test_resolution_and_width_combinations(self, rng, dim, heads, img):
        # full-width blocks at both resolutions, depth cut for speed
        cfg = VitConfig(depth=2, dim=dim, heads=heads, img_size=img, patch=16,
                        num_classes=10, use_layerscale=True)
        archive = generate_archive(cfg, seed=dim + img)
        w = build_from_archive(archive, cfg, "ternary")
        logits, trace = forward(w, _image(rng, cfg), TraceOptions(attention=True))
        assert logits.shape == (10,)
        tokens = (img // 16) ** 2 + 1
        assert trace.attention[0].shape == (heads, tokens, tokens)

    @pytest.mark.parametrize("plan", ["fp32", "partial-w2", "ternary"])
    def test_logit_shape_and_finite(self, mini_config, mini_archive, rng, plan):
        w = build_from_archive(mini_archive, mini_config, plan)
        logits, _ = forward(w, _image(rng, mini_config))
        assert logits.shape == (mini_config.num_classes,)
        assert np.isfinite(logits).all()

    def test_wrong_image_shape(self, mini_config, mini_archive):
        w = build_from_archive(mini_archive, mini_config, "fp32")
        with pytest.raises(ShapeMismatchError):
            forward(w, np.zeros((3, 16, 16), dtype=np.float32))

    def test_nan_input_detected(self, mini_config, mini_archive):
        w = build_from_archive(mini_archive, mini_config, "fp32")
        img = np.zeros((3, 32, 32), dtype=np.float32)
        img[0, 0, 0] = np.nan
        with pytest.raises(NanDetectedError):
            forward(w, img)

    def test_determinism(self, mini_config, mini_archive, rng):
        w = build_from_archive(mini_archive, mini_config, "ternary")
        img = _image(rng, mini_config)
        l1, _ = forward(w, img)
        l2, _ = forward(w, img)
        np.testing.assert_array_equal(l1, l2)

    def test_trace_capture(self, mini_config, mini_archive, rng):
        w = build_from_archive(mini_archive, mini_config, "ternary")
        _, trace = forward(w, _image(rng, mini_config),
                           TraceOptions(attention=True, patch_embed=True))
        t = mini_config.tokens
        assert len(trace.attention) == mini_config.depth
        assert trace.attention[0].shape == (mini_config.heads, t, t)
        assert trace.patch_tokens.shape == (t - 1, mini_config.dim)
        assert trace.logits.shape == (mini_config.num_classes,)


class TestForwardOracles:
    def test_fp32_vs_naive_reference(self, mini_config, mini_archive, rng):
        w = build_from_archive(mini_archive, mini_config, "fp32")
        img = _image(rng, mini_config)
        logits, _ = forward(w, img)
        tensors = {n: r.data for n, r in mini_archive.tensors.items()}
        expect = naive_forward(tensors, mini_config, img)
        rel = np.linalg.norm(logits - expect) / np.linalg.norm(expect)
        assert rel <= 1e-4

    def test_ternary_vs_emulation(self, mini_config, mini_archive, rng):
        w = build_from_archive(mini_archive, mini_config, "ternary")
        result = run_emulation_check(w, _image(rng, mini_config))
        assert result["accumulators_bit_equal"]
        assert result["logits_bit_equal"]
        assert result["logits_rel_diff"] <= 1e-5
        assert result["max_layer_rel_diff"] <= 1e-5

    def test_exactly_representable_weights_match_fp32(self, rng):
        # weights that are fixed points of absmean ternarization (scale * sign
        # pattern, no zero codes): the ternary forward then differs from the
        # fp32 forward only through 8-bit activation quantization
        cfg = VitConfig(depth=1, dim=16, heads=2, img_size=16, patch=8,
                        num_classes=7)
        archive = generate_archive(cfg, seed=9)
        for name, rec in archive.tensors.items():
            if name == "patch_embed.weight":
                signs = np.sign(rec.data) + (rec.data == 0)
                scales = rng.uniform(0.05, 0.5, size=(rec.shape[0], 1, 1, 1))
                rec.data = (signs * scales).astype(np.float32)
            elif name.endswith("weight"):
                signs = np.sign(rec.data) + (rec.data == 0)
                rec.data = (signs * 0.25).astype(np.float32)
            elif name in ("cls_token", "pos_embed"):
                # pre-round so the half-precision residue storage is lossless
                rec.data = rec.data.astype(np.float16).astype(np.float32)
        w_fp = build_from_archive(archive, cfg, "fp32")
        w_t = build_from_archive(archive, cfg, "ternary")
        # the plans now hold identical dequantized weights
        np.testing.assert_allclose(
            w_t.blocks[0].qkv.weights.dequantized(),
            w_fp.blocks[0].qkv.weight, rtol=1e-6)
        img = _image(rng, cfg)
        lf, _ = forward(w_fp, img)
        lt, _ = forward(w_t, img)
        # difference attributable to 8-bit activation quantization only
        rel = np.linalg.norm(lf - lt) / np.linalg.norm(lf)
        assert rel < 0.05

    def test_roundtrip_preserves_logits(self, mini_config, mini_archive, rng, tmp_path):
        from ternforge.packing import read_ftv, write_ftv
        w = build_from_archive(mini_archive, mini_config, "ternary")
        path = tmp_path / "m.ftv"
        write_ftv(weights_to_container(w), path)
        w2 = weights_from_container(read_ftv(path))
        img = _image(rng, mini_config)
        l1, _ = forward(w, img)
        l2, _ = forward(w2, img)
        np.testing.assert_array_equal(l1, l2)


class TestPredictTopk:
    def test_basic(self):
        out = predict_topk(np.array([0.1, 0.9, 0.2]), 1, ["a", "b", "c"])
        assert out == [(1, "b", pytest.approx(0.9))]

    def test_tie_breaks_to_lower_index(self):
        out = predict_topk(np.zeros(4), 2)
        assert [c for c, _, _ in out] == [0, 1]

    def test_full_permutation(self, rng):
        logits = rng.normal(size=9)
        out = predict_topk(logits, 9)
        assert sorted(c for c, _, _ in out) == list(range(9))
        scores = [s for _, _, s in out]
        assert scores == sorted(scores, reverse=True)


class TestPreQuantRmsNorm:
    def test_flag_changes_output(self, rng):
        cfg_off = VitConfig(depth=1, dim=16, heads=2, img_size=16, patch=8,
                            num_classes=5)
        cfg_on = VitConfig(depth=1, dim=16, heads=2, img_size=16, patch=8,
                           num_classes=5, pre_quant_rmsnorm=True)
        a_off = generate_archive(cfg_off, seed=5)
        a_on = generate_archive(cfg_on, seed=5)
        w_off = build_from_archive(a_off, cfg_off, "ternary")
        w_on = build_from_archive(a_on, cfg_on, "ternary")
        img = rng.normal(size=(3, 16, 16)).astype(np.float32)
        l_off, _ = forward(w_off, img)
        l_on, _ = forward(w_on, img)
        assert l_off.shape == l_on.shape
        assert not np.array_equal(l_off, l_on)
