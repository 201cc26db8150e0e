import json
import subprocess
import sys

import numpy as np
import pytest

from chromoseg import cli
from chromoseg.dataset import Dataset, read_dataset, write_dataset
from chromoseg.network import load_checkpoint


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipe")
    assert run("gen", "--n", 40, "--seed", 7, "--out", d / "raw.chrseg") == 0
    assert run("clean", "--in", d / "raw.chrseg", "--out", d / "clean.chrseg") == 0
    assert run("split", "--in", d / "clean.chrseg", "--seed", 1, "--out", d / "s.chrseg") == 0
    assert run("train", "--train", d / "s_train.chrseg", "--val", d / "s_val.chrseg",
               "--epochs", 1, "--quiet", "--out", d / "m.ckpt") == 0
    return d


def test_fnv1a64_reference_vectors():
    assert cli.fnv1a64(b"") == 0xCBF29CE484222325
    assert cli.fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert cli.fnv1a64(b"foobar") == 0x85944171F73967E8


def test_gen_twice_identical(tmp_path):
    for name in ("a", "b"):
        assert run("gen", "--n", 10, "--seed", 7, "--out", tmp_path / f"{name}.chrseg") == 0
    assert (tmp_path / "a.chrseg").read_bytes() == (tmp_path / "b.chrseg").read_bytes()
    ma = json.loads((tmp_path / "a.chrseg.manifest.json").read_text())
    mb = json.loads((tmp_path / "b.chrseg.manifest.json").read_text())
    assert list(ma["outputs"].values()) == list(mb["outputs"].values())
    assert ma["seeds"] == {"global": 7} and ma["version"] == "0.1.0"
    assert ma["argv"][:3] == ["gen", "--n", "10"]


def test_manifest_digest_matches_file(tmp_path):
    out = tmp_path / "d.chrseg"
    run("gen", "--n", 3, "--out", out)
    m = json.loads((tmp_path / "d.chrseg.manifest.json").read_text())
    assert m["outputs"][str(out)] == f"{cli.fnv1a64(out.read_bytes()):016x}"


def test_split_sizes(tmp_path):
    rng = np.random.default_rng(0)
    ds = Dataset(rng.random((100, 4, 4)).astype(np.float32),
                 rng.integers(0, 4, (100, 4, 4)).astype(np.uint8), [None] * 100)
    write_dataset(ds, tmp_path / "in.chrseg")
    assert run("split", "--in", tmp_path / "in.chrseg", "--out", tmp_path / "p.chrseg") == 0
    sizes = [len(read_dataset(tmp_path / f"p_{s}.chrseg")) for s in ("train", "val", "test")]
    assert sizes == [64, 16, 20]


def test_eval_pred_equals_truth(pipeline, capsys):
    d = pipeline
    data = d / "s_test.chrseg"
    assert run("eval", "--data", data, "--pred", data, "--out", d / "r.json") == 0
    report = json.loads((d / "r.json").read_text())
    assert all(v in (1.0, None) for v in report["per_class_global"])
    assert report["per_class_global"][3] == 1.0
    assert "confusion" in capsys.readouterr().out


def test_pipeline_end_to_end(pipeline):
    d = pipeline
    params, state = load_checkpoint(d / "m.ckpt")
    assert state is None
    assert (d / "m.ckpt.history.csv").read_text().startswith("epoch,")
    assert run("eval", "--data", d / "s_test.chrseg", "--checkpoint", d / "m.ckpt",
               "--out", d / "e.json") == 0
    rep = json.loads((d / "e.json").read_text())
    assert rep["n_images"] == len(read_dataset(d / "s_test.chrseg"))
    m = json.loads((d / "e.json.manifest.json").read_text())
    assert set(m["inputs"]) == {str(d / "s_test.chrseg"), str(d / "m.ckpt")}


def test_baselines_and_hist(pipeline):
    d = pipeline
    for method in ("threshold", "geometric"):
        out = d / f"{method}.json"
        assert run("baseline", "--method", method, "--train", d / "s_train.chrseg",
                   "--data", d / "s_test.chrseg", "--out", out) == 0
        rep = json.loads(out.read_text())
        assert ("applicable_fraction" in rep) == (method == "geometric")
    assert run("hist", "--data", d / "clean.chrseg", "--out", d / "h.csv") == 0
    assert (d / "h.csv").read_text().splitlines()[0] == "class,bin,count"


def test_render(pipeline):
    d = pipeline
    out = d / "render"
    assert run("render", "--data", d / "s_test.chrseg", "--checkpoint", d / "m.ckpt",
               "--indices", "0,1", "--out", out) == 0
    names = sorted(p.name for p in out.glob("*.ppm"))
    assert names == ["00000_input.ppm", "00000_pred.ppm", "00000_truth.ppm",
                     "00001_input.ppm", "00001_pred.ppm", "00001_truth.ppm"]
    assert (out / "manifest.json").exists()
    assert (out / "00000_input.ppm").read_bytes().startswith(b"P6\n88 88\n255\n")


def test_train_deterministic_via_cli(pipeline, tmp_path):
    d = pipeline
    for name in ("a", "b"):
        assert run("train", "--train", d / "s_train.chrseg", "--val", d / "s_val.chrseg",
                   "--epochs", 1, "--quiet", "--seed", 3, "--out", tmp_path / f"{name}.ckpt") == 0
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_save_optimizer_flag(pipeline, tmp_path):
    d = pipeline
    assert run("train", "--train", d / "s_train.chrseg", "--val", d / "s_val.chrseg",
               "--epochs", 1, "--quiet", "--save-optimizer", "--out", tmp_path / "o.ckpt") == 0
    _, state = load_checkpoint(tmp_path / "o.ckpt")
    assert state is not None


def test_missing_input_exit_2(tmp_path, capsys):
    assert run("clean", "--in", tmp_path / "nope.chrseg", "--out", tmp_path / "x") == 2
    assert "not found" in capsys.readouterr().err
    assert not (tmp_path / "x.manifest.json").exists()


def test_corrupt_input_exit_2(tmp_path):
    (tmp_path / "bad.chrseg").write_bytes(b"garbage!garbage!")
    assert run("hist", "--data", tmp_path / "bad.chrseg", "--out", tmp_path / "h.csv") == 2


@pytest.mark.parametrize("argv", [
    ["gen", "--n", "-3", "--out", "x"],
    ["gen", "--n", "3"],
    ["gen", "--n", "3", "--out", "x", "--threads", "0"],
    ["gen", "--n", "3", "--out", "x", "--seed", "-1"],
    ["frobnicate"],
    ["eval", "--data", "d", "--out", "x"],
    ["train", "--train", "a", "--val", "b", "--out", "c", "--class-weights", "1,2"],
])
def test_flag_validation_exit_1(argv, capsys):
    assert cli.main(argv) == 1
    assert "usage:" in capsys.readouterr().err


def test_config_error_exit_1(tmp_path, capsys):
    # infeasible generation settings are a configuration problem
    assert run("gen", "--n", 2, "--canvas", "20x20", "--out", tmp_path / "x") == 1
    assert "usage:" in capsys.readouterr().err


def test_divergence_exit_3(pipeline, tmp_path):
    # a huge learning rate blows the weights up within a few steps
    assert run("train", "--train", pipeline / "s_train.chrseg", "--val", pipeline / "s_val.chrseg",
               "--epochs", 3, "--lr", "1e30", "--quiet", "--out", tmp_path / "m.ckpt") == 3


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# generation settings\nn = 4\nseed = 9\nout = " + str(tmp_path / "c.chrseg") + "\n")
    assert run("gen", "--config", cfg) == 0
    assert len(read_dataset(tmp_path / "c.chrseg")) == 4
    assert run("gen", "--config", cfg, "--n", 2, "--out", tmp_path / "f.chrseg") == 0
    assert len(read_dataset(tmp_path / "f.chrseg")) == 2
    m = json.loads((tmp_path / "f.chrseg.manifest.json").read_text())
    assert m["config"]["seed"] == 9 and m["config"]["n"] == 2


def test_config_file_errors(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("colour = blue\n")
    assert run("gen", "--config", bad, "--out", tmp_path / "x") == 1
    assert run("gen", "--config", tmp_path / "missing.cfg", "--out", tmp_path / "x") == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "chromoseg", "gen", "--n", "2",
                           "--out", str(tmp_path / "m.chrseg")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "wrote 2 samples" in proc.stdout
