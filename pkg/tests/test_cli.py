import os
import subprocess
import sys

import numpy as np
import pytest

from ssmaf import cli, gradcheck
from ssmaf.engine.tensor import make_output
from ssmaf.netpbm import read_netpbm

TINY = ["model.base_width=4", "model.depth=2", "model.fusion_dim=8", "model.sr_hidden=8"]


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert cli.main(["synth", "--out", str(root), "--n-train", "2", "--n-test", "2", "synth.hr_size=32,32"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["train", "--data", str(dataset), "--out", str(out), "--epochs", "1", *TINY]) == 0
    return out


def test_synth_layout_and_determinism(tmp_path, capsys):
    code, out, _ = run(["synth", "--out", tmp_path / "a", "--n-train", 4, "--n-test", 2, "synth.hr_size=32,32"], capsys)
    assert code == 0 and "train=4 test=2" in out
    manifest = (tmp_path / "a" / "manifest.txt").read_text().splitlines()
    assert len(manifest) == 6
    assert [m.split()[1] for m in manifest] == ["train"] * 4 + ["test"] * 2
    run(["synth", "--out", tmp_path / "b", "--n-train", 4, "--n-test", 2, "synth.hr_size=32,32"], capsys)
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_synth_errors(tmp_path, capsys):
    code, _, err = run(["synth", "--out", tmp_path, "--n-train", 0], capsys)
    assert code != 0 and "empty training split" in err
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code, _, err = run(["synth", "--out", blocker / "sub", "--n-train", 1, "--n-test", 0], capsys)
    assert code != 0 and "error:" in err
    code, _, err = run(["synth", "--out", tmp_path / "c", "model.bogus=1"], capsys)
    assert code != 0 and "bogus" in err


def test_train_outputs(trained):
    assert (trained / "final.ssmaf").exists()
    lines = (trained / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 1
    report = (trained / "report.txt").read_text()
    dice = float(report.split("pooled_dice=")[1].split()[0])
    assert 0.0 <= dice <= 1.0


def test_eval_prints_report(dataset, trained, tmp_path, capsys):
    code, out, _ = run(["eval", "--data", dataset, "--checkpoint", trained / "final.ssmaf", "--out", tmp_path], capsys)
    assert code == 0
    agg = [line for line in out.splitlines() if line.startswith("aggregate")]
    assert len(agg) == 1 and (tmp_path / "eval_test.txt").read_text().splitlines()[-1] == agg[0]
    assert 0.0 <= float(agg[0].split("pooled_dice=")[1].split()[0]) <= 1.0
    assert sum(line.startswith("image=") for line in out.splitlines()) == 2


def test_eval_errors(dataset, trained, tmp_path, capsys):
    code, _, err = run(["eval", "--data", dataset, "--checkpoint", trained / "final.ssmaf", "--variant", "baseline"], capsys)
    assert code != 0 and "variant" in err
    missing = tmp_path / "nope.ssmaf"
    code, _, err = run(["eval", "--data", dataset, "--checkpoint", missing], capsys)
    assert code != 0 and str(missing) in err
    code, _, err = run(["eval", "--data", tmp_path / "nodata", "--checkpoint", trained / "final.ssmaf"], capsys)
    assert code != 0 and "nodata" in err
    bad = tmp_path / "bad.ssmaf"
    bad.write_bytes(b"garbage")
    code, _, err = run(["eval", "--data", dataset, "--checkpoint", bad], capsys)
    assert code != 0 and "magic" in err


def test_infer_masks_and_overlays(dataset, trained, tmp_path, capsys):
    code, _, _ = run(["infer", "--data", dataset, "--checkpoint", trained / "final.ssmaf", "--out", tmp_path], capsys)
    assert code == 0
    lr = read_netpbm(dataset / "images" / "0002.ppm")
    mask = read_netpbm(tmp_path / "masks" / "0002.pgm")
    assert mask.shape == (2 * lr.shape[1], 2 * lr.shape[2])
    assert set(np.unique(mask)) <= {0.0, 1.0}
    assert read_netpbm(tmp_path / "overlays" / "0002.ppm").shape == (3,) + mask.shape


def test_overlay_colors():
    base = np.full((3, 2, 2), 0.5)
    pred = np.array([[1, 1], [0, 0]])
    gt = np.array([[1, 0], [1, 0]])
    img = cli.overlay(base, pred, gt)
    assert tuple(img[:, 0, 0]) == (1.0, 1.0, 0.0)  # both: yellow
    assert tuple(img[:, 0, 1]) == (1.0, 0.0, 0.0)  # prediction only: red
    assert tuple(img[:, 1, 0]) == (0.0, 1.0, 0.0)  # ground truth only: green
    assert tuple(img[:, 1, 1]) == (0.5, 0.5, 0.5)


def test_gradcheck_lists_every_op_once(capsys):
    code, out, _ = run(["gradcheck", "--trials", 2, "--model-samples", 3], capsys)
    assert code == 0
    names = [line.split()[1] for line in out.splitlines() if not line.split()[1] == "overall"]
    assert names == list(gradcheck.REGISTRY) + ["model_interp_sr_maf"]
    assert out.splitlines()[-1].startswith("PASS overall")


def _broken_relu(x):
    out = np.maximum(x.data, 0)
    return make_output("broken_relu", out, (x,), lambda g: (2.0 * g * (x.data > 0),))


def test_gradcheck_negative_control(monkeypatch, capsys):
    registry = {"relu": gradcheck._unary(_broken_relu, gradcheck._away_from_zero((2, 3)))}
    monkeypatch.setattr(gradcheck, "REGISTRY", registry)
    code, out, _ = run(["gradcheck", "--trials", 2, "--model-samples", 0], capsys)
    assert code != 0 and "FAIL relu" in out


def test_ablate_table(dataset, tmp_path, capsys, monkeypatch):
    argv = ["ablate", "--data", dataset, "--seeds", "0", "--epochs", 1, *TINY]
    code, out, _ = run([*argv, "--out", tmp_path / "a"], capsys)
    assert code == 0
    rows = [line for line in out.splitlines() if line.split() and line.split()[0] in
            ("baseline", "interp", "interp_sr", "interp_sr_maf") and len(line.split()) == 5]
    assert [r.split()[0] for r in rows] == ["baseline", "interp", "interp_sr", "interp_sr_maf"]
    monkeypatch.setenv("SSMAF_THREADS", "2")
    code, out2, _ = run([*argv, "--out", tmp_path / "b"], capsys)
    assert code == 0 and out2 == out
    assert (tmp_path / "a" / "ablation.txt").read_bytes() == (tmp_path / "b" / "ablation.txt").read_bytes()


def test_console_entry_point(tmp_path):
    env = {**os.environ, "PYTHONPATH": os.pathsep.join(sys.path)}
    res = subprocess.run([sys.executable, "-m", "ssmaf.cli", "synth", "--out", str(tmp_path), "--n-train", "0"],
                         capture_output=True, text=True, env=env)
    assert res.returncode != 0 and "empty training split" in res.stderr
    res = subprocess.run([sys.executable, "-m", "ssmaf.cli"], capture_output=True, text=True, env=env)
    assert res.returncode != 0
