import numpy as np
import pytest

from ternforge import packing as P
from ternforge.config import PLANS, VitConfig, named_config, param_count
from ternforge.errors import (
    BadMagicError,
    BadVersionError,
    CorruptTritError,
    DuplicateTensorError,
    InvalidTritError,
    SizeMismatchError,
    TruncatedError,
)
from ternforge.model import build_from_archive, weights_to_container
from ternforge.synthetic import generate_archive


class TestTritPacking:
    def test_single_byte_layout(self):
        buf = P.pack_trits([1, -1, 0, 1])
        assert buf.data == bytes([0x49])
        assert buf.logical_len == 4

    def test_zeros(self):
        assert P.pack_trits([0, 0, 0, 0]).data == bytes([0x00])

    def test_five_ones(self):
        assert P.pack_trits([1, 1, 1, 1, 1]).data == bytes([0x55, 0x01])

    def test_invalid_code(self):
        with pytest.raises(InvalidTritError):
            P.pack_trits([0, 2, 0, 0])

    def test_unpack_known_byte(self):
        buf = P.PackedTritBuffer(bytes([0x49]), 4)
        np.testing.assert_array_equal(P.unpack_trits(buf), [1, -1, 0, 1])

    def test_unpack_rejects_11_pattern(self):
        with pytest.raises(CorruptTritError):
            P.unpack_trits(P.PackedTritBuffer(bytes([0x0C]), 4))  # slot 1 = 11

    def test_trailing_11_outside_logical_len_ignored(self):
        # only bit pairs inside the logical range are validated
        buf = P.PackedTritBuffer(bytes([0xC1]), 2)
        np.testing.assert_array_equal(P.unpack_trits(buf), [1, 0])

    def test_roundtrip_random(self, rng):
        for _ in range(300):
            n = int(rng.integers(1, 300))
            codes = rng.integers(-1, 2, size=n).astype(np.int8)
            buf = P.pack_trits(codes)
            assert len(buf.data) == (n + 3) // 4
            np.testing.assert_array_equal(P.unpack_trits(buf), codes)

    def test_trailing_slots_are_zero(self, rng):
        for n in (1, 2, 3, 5, 6, 7):
            codes = np.ones(n, dtype=np.int8)
            buf = P.pack_trits(codes)
            last = buf.data[-1]
            used_slots = n % 4 or 4
            assert last >> (2 * used_slots) == 0

    def test_buffer_length_invariant(self):
        with pytest.raises(SizeMismatchError):
            P.PackedTritBuffer(bytes([0, 0]), 9)


class TestContainers:
    def test_nwa_roundtrip(self, mini_config, mini_archive, tmp_path):
        path = tmp_path / "a.nwa"
        written = P.write_nwa(mini_archive, path)
        assert written == path.stat().st_size
        back = P.read_nwa(path)
        assert back.config == mini_config
        assert list(back.tensors) == list(mini_archive.tensors)
        for name, rec in mini_archive.tensors.items():
            got = back.tensors[name]
            assert got.kind == rec.kind and got.shape == rec.shape
            np.testing.assert_array_equal(got.data, rec.data)

    @pytest.mark.parametrize("plan", PLANS)
    def test_ftv_roundtrip_bit_exact(self, mini_config, mini_archive, tmp_path, plan):
        weights = build_from_archive(mini_archive, mini_config, plan)
        container = weights_to_container(weights)
        path = tmp_path / "m.ftv"
        P.write_ftv(container, path)
        back = P.read_ftv(path)
        assert list(back.tensors) == list(container.tensors)
        for name, rec in container.tensors.items():
            got = back.tensors[name]
            assert got.kind == rec.kind
            assert tuple(got.shape) == tuple(rec.shape)
            np.testing.assert_array_equal(got.data, rec.data)
            if rec.kind == P.KIND_TERN2:
                assert got.scale == np.float32(rec.scale)
            elif rec.kind == P.KIND_TERN2_PC:
                np.testing.assert_array_equal(got.scale,
                                              np.asarray(rec.scale, dtype=np.float32))
        # second write is byte-identical
        path2 = tmp_path / "m2.ftv"
        P.write_ftv(back, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_randomized_small_models_roundtrip(self, tmp_path, rng):
        for trial in range(4):
            cfg = VitConfig(
                depth=int(rng.integers(1, 3)),
                dim=int(rng.choice([8, 16, 24])),
                heads=2,
                img_size=16,
                patch=8,
                num_classes=int(rng.integers(2, 9)),
                use_layerscale=bool(rng.integers(0, 2)),
            )
            archive = generate_archive(cfg, seed=int(rng.integers(0, 2**31)))
            weights = build_from_archive(archive, cfg, "ternary")
            container = weights_to_container(weights)
            path = tmp_path / f"r{trial}.ftv"
            P.write_ftv(container, path)
            back = P.read_ftv(path)
            for name, rec in container.tensors.items():
                np.testing.assert_array_equal(back.tensors[name].data, rec.data)

    def test_bad_magic(self, tmp_path, mini_archive):
        path = tmp_path / "x.nwa"
        P.write_nwa(mini_archive, path)
        with pytest.raises(BadMagicError):
            P.read_ftv(path)

    def test_bad_version(self, tmp_path, mini_archive):
        path = tmp_path / "x.nwa"
        P.write_nwa(mini_archive, path)
        raw = bytearray(path.read_bytes())
        raw[4] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(BadVersionError):
            P.read_nwa(path)

    def test_truncation_detected(self, tmp_path, mini_archive):
        path = tmp_path / "x.nwa"
        P.write_nwa(mini_archive, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-1])
        with pytest.raises(TruncatedError):
            P.read_nwa(path)

    def test_trailing_garbage_detected(self, tmp_path, mini_archive):
        path = tmp_path / "x.nwa"
        P.write_nwa(mini_archive, path)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(SizeMismatchError):
            P.read_nwa(path)

    def test_duplicate_tensor_rejected(self, mini_archive):
        rec = next(iter(mini_archive.tensors.values()))
        with pytest.raises(DuplicateTensorError):
            mini_archive.add(rec)

    def test_nwa_rejects_non_f32(self, tmp_path, mini_config):
        container = P.ModelContainer(P.NWA_MAGIC, mini_config)
        container.add(P.TensorRecord("t", P.KIND_I8, (2,),
                                     np.zeros(2, dtype=np.int8)))
        with pytest.raises(SizeMismatchError):
            P.write_nwa(container, tmp_path / "bad.nwa")


class TestSizeReport:
    def test_tiny_param_count_hand_computed(self):
        # depth 12, dim 192, heads 3, patch 16, 1000 classes, 197 tokens
        assert param_count(named_config("deit_tiny_224")) == 5_717_416

    def test_report_matches_file_exactly(self, mini_config, mini_archive, tmp_path):
        for plan in PLANS:
            weights = build_from_archive(mini_archive, mini_config, plan)
            path = tmp_path / f"{plan}.ftv"
            P.write_ftv(weights_to_container(weights), path)
            report = P.model_size_report(mini_config, plan)
            assert report.total_bytes == path.stat().st_size

    def test_deterministic(self):
        cfg = named_config("deit_tiny_224")
        a = P.model_size_report(cfg, "ternary")
        b = P.model_size_report(cfg, "ternary")
        assert a.total_bytes == b.total_bytes
        assert a.component_bytes == b.component_bytes

    def test_component_partition(self):
        cfg = named_config("deit_tiny_224")
        rep = P.model_size_report(cfg, "ternary")
        assert sum(rep.component_bytes.values()) + rep.overhead_bytes == rep.total_bytes

    def test_fully_ternary_sizes(self):
        assert P.model_size_report(named_config("deit3_small_224"),
                                   "ternary").total_mb == pytest.approx(5.81, rel=0.02)
        assert P.model_size_report(named_config("deit3_small_384"),
                                   "ternary").total_mb == pytest.approx(6.09, rel=0.02)
        assert P.model_size_report(named_config("deit_tiny_224"),
                                   "ternary").total_mb == pytest.approx(1.53, rel=0.03)

    def test_fp32_size_and_ratio(self):
        rep = P.model_size_report(named_config("deit_small_224"), "fp32")
        assert rep.total_mb == pytest.approx(88.3, rel=0.01)
        tern = P.model_size_report(named_config("deit_small_224"), "ternary")
        assert tern.compression_ratio == pytest.approx(15.2, abs=0.3)

    def test_partial_w2_fp32_share(self):
        rep = P.model_size_report(named_config("deit_tiny_224"), "partial-w2")
        assert rep.fp32_share == pytest.approx(0.38, abs=0.02)
