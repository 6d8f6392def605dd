"""Engine round-trip and cross-framework verification (engine CLI required)."""
import numpy as np
import pytest

from tfexport.export import export_checkpoint
from tfexport.verify import (
    run_engine,
    verify_against_engine,
    write_rawf,
)
from tfexport.wire import KIND_F32, read_model_file


@pytest.fixture(scope="module")
def exported(small_ckpt, tmp_path_factory):
    ckpt, model = small_ckpt
    d = tmp_path_factory.mktemp("verify")
    nwa = d / "w.nwa"
    export_checkpoint(ckpt, "test_small", nwa)
    return nwa, model, d


def test_engine_roundtrip_preserves_tensors(exported):
    # quantize --plan fp32 must keep every tensor bit-exact
    nwa, model, d = exported
    ftv = d / "fp32.ftv"
    run_engine(["quantize", "--in", str(nwa), "--plan", "fp32", "--out", str(ftv)])
    _, _, nwa_tensors = read_model_file(nwa)
    _, _, ftv_tensors = read_model_file(ftv)
    assert set(nwa_tensors) == set(ftv_tensors)
    for name, rec in nwa_tensors.items():
        got = ftv_tensors[name]
        assert got.kind == KIND_F32, name
        np.testing.assert_array_equal(got.data, rec.data)


def test_argmax_agreement_small_batch(exported):
    nwa, model, _ = exported
    rng = np.random.default_rng(42)
    images = [rng.uniform(size=(3, 32, 32)).astype(np.float32) for _ in range(12)]
    report = verify_against_engine(nwa, images, "test_small", model)
    assert report.images == 12
    assert report.agreement_rate >= 0.99, report.disagreement_indices


def test_zero_image_both_finite(exported):
    nwa, model, _ = exported
    images = [np.zeros((3, 32, 32), dtype=np.float32)]
    report = verify_against_engine(nwa, images, "test_small", model)
    # finite logits on both sides imply a parsed top-1 from each
    assert len(report.engine_top1) == 1 and len(report.torch_top1) == 1


def test_corrupted_nwa_engine_error_propagates(exported, tmp_path):
    nwa, model, _ = exported
    bad = tmp_path / "bad.nwa"
    raw = bytearray(nwa.read_bytes())
    raw[:4] = b"XXXX"
    bad.write_bytes(bytes(raw))
    proc = run_engine(["quantize", "--in", str(bad), "--plan", "fp32",
                       "--out", str(tmp_path / "x.ftv")], check=False)
    assert proc.returncode == 4  # engine format-error exit code
    assert "BAD_MAGIC" in proc.stderr


def test_rawf_writer_layout(tmp_path):
    img = np.arange(2 * 4 * 4, dtype=np.float32).reshape(2, 4, 4)
    path = tmp_path / "x.rawf"
    write_rawf(path, img)
    blob = path.read_bytes()
    assert blob[:4] == b"RAWF"
    assert int.from_bytes(blob[4:8], "little") == 4
    np.testing.assert_array_equal(
        np.frombuffer(blob, dtype="<f4", offset=8).reshape(2, 4, 4), img)
