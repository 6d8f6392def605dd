import json

import numpy as np
import pytest

from ternforge.cli import main
from ternforge.config import VitConfig
from ternforge.images import write_ppm, write_rawf
from ternforge.profiler import COMPONENT_TAXONOMY, profile_forward
from ternforge.model import build_from_archive
from ternforge.packing import read_ftv, read_nwa


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A small config json, synthetic archive, quantized model, and images."""
    d = tmp_path_factory.mktemp("cli")
    cfg = VitConfig(depth=2, dim=32, heads=2, img_size=32, patch=8, num_classes=9)
    cfg_path = d / "cfg.json"
    cfg_path.write_text(cfg.to_json())
    assert main(["gen-synthetic", "--config", str(cfg_path), "--seed", "5",
                 "--out", str(d / "w.nwa")]) == 0
    assert main(["quantize", "--in", str(d / "w.nwa"), "--plan", "ternary",
                 "--out", str(d / "m.ftv")]) == 0
    rng = np.random.default_rng(0)
    img_dir = d / "imgs"
    img_dir.mkdir()
    for i in range(3):
        write_rawf(img_dir / f"i{i}.rawf",
                   rng.uniform(size=(3, 32, 32)).astype(np.float32))
    write_ppm(d / "img.ppm", rng.integers(0, 256, size=(32, 32, 3)).astype(np.uint8))
    labels = d / "labels.txt"
    labels.write_text("\n".join(f"class_{i}" for i in range(9)) + "\n")
    return d, cfg


def test_gen_synthetic_deterministic(tmp_path):
    cfg = VitConfig(depth=1, dim=16, heads=2, img_size=16, patch=8, num_classes=3)
    p = tmp_path / "c.json"
    p.write_text(cfg.to_json())
    a, b = tmp_path / "a.nwa", tmp_path / "b.nwa"
    assert main(["gen-synthetic", "--config", str(p), "--seed", "99", "--out", str(a)]) == 0
    assert main(["gen-synthetic", "--config", str(p), "--seed", "99", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_gen_synthetic_named_config_param_counts(tmp_path, capsys):
    out = tmp_path / "t.nwa"
    assert main(["gen-synthetic", "--config", "deit_tiny_224", "--seed", "1",
                 "--out", str(out)]) == 0
    text = capsys.readouterr().out
    params = int(text.split("bytes, ")[1].split(" params")[0].replace(",", ""))
    assert params == pytest.approx(5.5e6, rel=0.05)


def test_infer_topk(workdir, capsys):
    d, cfg = workdir
    assert main(["infer", "--model", str(d / "m.ftv"), "--image", str(d / "img.ppm"),
                 "--labels", str(d / "labels.txt"), "--topk", "5"]) == 0
    lines = [l for l in capsys.readouterr().out.splitlines() if l.strip()]
    assert len(lines) == 5
    scores = [float(l.split()[-1]) for l in lines]
    assert scores == sorted(scores, reverse=True)
    assert "class_" in lines[0]


def test_infer_deterministic_pipeline(workdir, capsys):
    d, cfg = workdir
    args = ["infer", "--model", str(d / "m.ftv"), "--image",
            str(d / "imgs" / "i0.rawf"), "--labels", str(d / "labels.txt"),
            "--topk", "3"]
    assert main(args) == 0
    first = capsys.readouterr().out
    assert main(args) == 0
    assert capsys.readouterr().out == first


def test_compare_writes_csv(workdir, capsys):
    d, cfg = workdir
    out = d / "fid.csv"
    assert main(["compare", "--model", str(d / "m.ftv"), "--ref", str(d / "w.nwa"),
                 "--images", str(d / "imgs"), "--out", str(out)]) == 0
    assert "zero_fraction,global" in out.read_text()


def test_compare_threads_match_serial(workdir, tmp_path):
    d, cfg = workdir
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    assert main(["compare", "--model", str(d / "m.ftv"), "--ref", str(d / "w.nwa"),
                 "--images", str(d / "imgs"), "--out", str(a)]) == 0
    assert main(["--threads", "3", "compare", "--model", str(d / "m.ftv"),
                 "--ref", str(d / "w.nwa"), "--images", str(d / "imgs"),
                 "--out", str(b)]) == 0
    assert a.read_text() == b.read_text()


def test_profile_report(workdir, capsys):
    d, cfg = workdir
    assert main(["profile", "--model", str(d / "m.ftv"), "--image",
                 str(d / "img.ppm"), "--reps", "3"]) == 0
    text = capsys.readouterr().out
    for row in COMPONENT_TAXONOMY:
        assert row in text
    assert "End-to-end latency" in text
    assert "Throughput" in text


def test_profile_percentages_and_memory(workdir):
    d, cfg = workdir
    container = read_ftv(d / "m.ftv")
    weights = build_from_archive(read_nwa(d / "w.nwa"), cfg, "ternary")
    img = np.zeros((3, 32, 32), dtype=np.float32)
    report = profile_forward(weights, img, reps=3,
                             payload_bytes=container.payload_bytes())
    assert tuple(report.component_names) == COMPONENT_TAXONOMY
    assert sum(report.percentages().values()) == pytest.approx(100.0, abs=0.1)
    assert report.packed_weight_bytes == container.payload_bytes()
    assert report.input_bytes == 3 * 32 * 32 * 4


def test_rollout_pgm(workdir):
    d, cfg = workdir
    out = d / "map.pgm"
    assert main(["rollout", "--model", str(d / "m.ftv"), "--image",
                 str(d / "img.ppm"), "--out", str(out)]) == 0
    blob = out.read_bytes()
    assert blob.startswith(b"P5\n4 4\n255\n")
    assert len(blob) == len(b"P5\n4 4\n255\n") + 16


def test_importance_toy_quadratic(tmp_path, capsys):
    spec = {
        "model": "quadratic",
        "coeffs": [1.0, 2.0, 3.0, 4.0],
        "weights": [1.0, 1.0, 1.0, 1.0],
        "groups": {"low": [0, 1], "high": [2, 3]},
    }
    p = tmp_path / "toy.json"
    p.write_text(json.dumps(spec))
    out = tmp_path / "imp.csv"
    assert main(["importance", "--toy", str(p), "--seed", "7", "--probes", "4",
                 "--out", str(out)]) == 0
    rows = out.read_text().splitlines()
    assert rows[0].startswith("group,taylor_fo_share,hessian_share,param_share")
    vals = {r.split(",")[0]: r.split(",") for r in rows[1:]}
    # taylor: |2 a w^2| -> low 6, high 14 -> shares 0.3 / 0.7
    assert float(vals["low"][1]) == pytest.approx(0.3, abs=1e-3)
    assert float(vals["high"][1]) == pytest.approx(0.7, abs=1e-3)
    # hessian: traces 2(a1+a2)=6 vs 14 -> same shares (diagonal, exact)
    assert float(vals["low"][2]) == pytest.approx(0.3, abs=1e-2)
    assert float(vals["high"][2]) == pytest.approx(0.7, abs=1e-2)


def test_importance_mlp_groups(tmp_path):
    spec = {"model": "mlp", "layers": [3, 5, 2], "samples": 6, "data_seed": 2}
    p = tmp_path / "toy.json"
    p.write_text(json.dumps(spec))
    out = tmp_path / "imp.csv"
    assert main(["importance", "--toy", str(p), "--seed", "1", "--probes", "2",
                 "--out", str(out)]) == 0
    rows = out.read_text().splitlines()
    assert {r.split(",")[0] for r in rows[1:]} == {"layer0", "layer1"}


class TestExitCodes:
    def test_missing_file_io_error(self, tmp_path):
        assert main(["quantize", "--in", str(tmp_path / "none.nwa"),
                     "--plan", "fp32", "--out", str(tmp_path / "x.ftv")]) == 3

    def test_bad_magic_format_error(self, workdir, tmp_path):
        d, _ = workdir
        bad = tmp_path / "bad.nwa"
        bad.write_bytes(b"JUNKJUNKJUNK" * 20)
        assert main(["quantize", "--in", str(bad), "--plan", "fp32",
                     "--out", str(tmp_path / "x.ftv")]) == 4

    def test_truncated_format_error(self, workdir, tmp_path):
        d, _ = workdir
        trunc = tmp_path / "t.ftv"
        trunc.write_bytes((d / "m.ftv").read_bytes()[:-7])
        assert main(["infer", "--model", str(trunc), "--image", str(d / "img.ppm"),
                     "--topk", "1"]) == 4

    def test_wrong_image_size_validation_error(self, workdir, tmp_path):
        d, _ = workdir
        img = tmp_path / "small.rawf"
        write_rawf(img, np.zeros((3, 16, 16), dtype=np.float32))
        assert main(["infer", "--model", str(d / "m.ftv"), "--image", str(img),
                     "--topk", "1"]) == 4

    def test_unknown_config_validation(self, tmp_path):
        assert main(["gen-synthetic", "--config", "nope_model", "--seed", "1",
                     "--out", str(tmp_path / "x.nwa")]) in (3, 6)

    def test_usage_error_exit_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["quantize", "--plan", "bogus"])
        assert exc.value.code == 2
