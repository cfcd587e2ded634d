import json
import os

import numpy as np
import pytest

from casp.cli import EXIT_INPUT, EXIT_INVARIANT, EXIT_OK, EXIT_WEIGHTS, load_schema, main, validate_json
from casp.evalharness.scenes import render_images
from casp.images import read_image, write_image
from casp.supervision import SceneTruth


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    a, _ = render_images(SceneTruth("homography", (64, 96), (64, 96), H=np.eye(3)), seed=2)
    write_image(tmp_path / "a.png", a)
    return tmp_path


def listing(path):
    return sorted(str(p.relative_to(path)) for p in path.rglob("*"))


def test_image_io_roundtrip(tmp_path):
    img = np.linspace(0, 1, 48, dtype=np.float32).reshape(6, 8)
    write_image(tmp_path / "x.png", img)
    np.testing.assert_allclose(read_image(tmp_path / "x.png"), img, atol=1 / 255)


def test_match_to_stdout_writes_nothing(workdir, capsys):
    before = listing(workdir)
    assert main(["match", "a.png", "a.png", "--variant", "lite"]) == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    validate_json(doc, "match")
    assert doc["scale"] == 8 and doc["image_sizes"] == [[64, 96], [64, 96]]
    assert all(m["iA"] == m["iB"] for m in doc["matches"])
    assert listing(workdir) == before


def test_match_to_out_dir(workdir):
    assert main(["match", "a.png", "a.png", "--variant", "lite", "--out", "res"]) == EXIT_OK
    assert listing(workdir / "res") == ["matches.json", "timings.json"]
    validate_json(json.loads((workdir / "res" / "matches.json").read_text()), "match")


def test_input_errors(workdir):
    assert main(["match", "a.png", "a.png", "--k", "3"]) == EXIT_INPUT
    (workdir / "bad.png").write_bytes(b"not an image")
    assert main(["match", "a.png", "bad.png"]) == EXIT_INPUT
    assert main(["match", "a.png", "missing.png"]) == EXIT_INPUT
    (workdir / "cfg").write_text("k = 12\nk = 13\n")
    assert main(["match", "a.png", "a.png", "--config", "cfg"]) == EXIT_INPUT


def test_weight_errors(workdir):
    assert main(["init-weights", "--variant", "lite", "--out", "w"]) == EXIT_OK
    assert main(["match", "a.png", "a.png", "--variant", "full", "--weights", "w/weights.bin"]) == EXIT_WEIGHTS
    assert main(["match", "a.png", "a.png", "--variant", "lite", "--weights", "w/weights.bin", "--no-refine"]) == EXIT_OK
    blob = bytearray((workdir / "w" / "weights.bin").read_bytes())
    blob[100] ^= 0xFF
    (workdir / "w" / "bad.bin").write_bytes(bytes(blob))
    assert main(["match", "a.png", "a.png", "--variant", "lite", "--weights", "w/bad.bin"]) == EXIT_WEIGHTS
    assert main(["init-weights"]) == EXIT_INPUT


def test_eval(workdir, capsys):
    spec = {"family": "homography", "n_scenes": 2, "image_size": [128, 128], "channels": 64}
    (workdir / "spec.json").write_text(json.dumps(spec))
    assert main(["eval", "spec.json", "--out", "e1"]) == EXIT_OK
    assert main(["eval", "spec.json", "--out", "e2"]) == EXIT_OK
    assert listing(workdir / "e1") == ["eval.csv", "eval.json", "runtime.json"]
    for name in ("eval.json", "eval.csv"):
        assert (workdir / "e1" / name).read_bytes() == (workdir / "e2" / name).read_bytes()
    validate_json(json.loads((workdir / "e1" / "eval.json").read_text()), "eval")
    capsys.readouterr()
    assert main(["eval", "spec.json", "--k", "12"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["spec"]["k"] == 12
    (workdir / "bad.json").write_text(json.dumps({"family": "cubes"}))
    assert main(["eval", "bad.json"]) == EXIT_INPUT
    assert main(["eval", "spec.json", "--k", "2"]) == EXIT_INPUT
    assert main(["eval", "nope.json"]) == EXIT_INPUT


def test_bench(workdir, capsys):
    assert main(["bench", "--sizes", "64", "128", "--out", "b"]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.splitlines()[0].startswith("height,width") and len(out.splitlines()) == 3
    assert listing(workdir / "b") == ["bench.csv", "bench.dat", "bench.json"]
    validate_json(json.loads((workdir / "b" / "bench.json").read_text()), "bench")
    assert main(["bench", "--sizes", "100"]) == EXIT_INPUT


def test_selftest_reports_named_failure(workdir, capsys):
    assert main(["init-weights", "--out", "w"]) == EXIT_OK
    blob = bytearray((workdir / "w" / "weights.bin").read_bytes())
    blob[-1] ^= 1
    (workdir / "w" / "weights.bin").write_bytes(bytes(blob))
    skip = [f"AC{i}" for i in range(1, 11)]
    code = main(["selftest", "--weights", "w/weights.bin", "--out", "s", "--skip", *skip])
    assert code == EXIT_INVARIANT
    doc = json.loads((workdir / "s" / "selftest.json").read_text())
    validate_json(doc, "selftest")
    failed = [c["name"] for c in doc["checks"] if not c["passed"]]
    assert failed == ["weights-file"]
    assert "FAIL weights-file" in capsys.readouterr().out


def test_selftest_quick_checks_pass(workdir):
    skip = [f"AC{i}" for i in range(1, 11)]
    assert main(["selftest", "--skip", *skip]) == EXIT_OK


def test_schemas_load():
    for name in ("match", "eval", "bench", "selftest"):
        assert load_schema(name)["type"] == "object"


def test_log_level_env(workdir, monkeypatch, capsys):
    monkeypatch.setenv("CASP_LOG", "debug")
    assert main(["match", "a.png", "a.png", "--variant", "lite", "--no-refine"]) == EXIT_OK
    assert os.listdir(workdir) == ["a.png"]
