import hashlib
import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from refprior import imageio
from refprior.cli import main

TINY_TRAIN = ["--steps", "2", "--batch-size", "2"]


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def cli_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "ds"), "--seed", "9", "--procedural", "4"]) == 0
    return root / "ds"


def test_synth_is_byte_identical(cli_data, tmp_path):
    assert main(["synth", "--out", str(tmp_path / "ds"), "--seed", "9", "--procedural", "4"]) == 0
    assert tree_digest(tmp_path / "ds") == tree_digest(cli_data)
    assert main(["synth", "--out", str(tmp_path / "other"), "--seed", "10", "--procedural", "4"]) == 0
    assert tree_digest(tmp_path / "other") != tree_digest(cli_data)


def test_synth_from_directories(cli_data, tmp_path):
    src = cli_data / "sources"
    code = main(["synth", "--out", str(tmp_path / "ds"), "--seed", "1", "--t-dir", str(src / "T"), "--r-dir", str(src / "R"), "--grids", "1", "7"])
    assert code == 0
    first = json.loads((tmp_path / "ds" / "manifest.jsonl").read_text().splitlines()[0])
    assert set(first["prior_maps"]) == {"1", "7"}


def test_train_and_infer_are_byte_identical(cli_data, tmp_path):
    image = str(sorted((cli_data / "images").glob("*_I.ppm"))[0])
    out = tmp_path / "run"
    runs = []
    for _ in range(2):
        shutil.rmtree(out, ignore_errors=True)
        assert main(["train-rpen", "--manifest", str(cli_data), "--out", str(out / "rpen"), "--seed", "2",
                     "--stem-channels", "4", "--norm-groups", "2", *TINY_TRAIN]) == 0
        assert main(["train-prrn", "--manifest", str(cli_data), "--out", str(out / "prrn"), "--seed", "2",
                     "--base-channels", "4", "--norm-groups", "2",
                     "--prior-mode", f"rpen:{out / 'rpen' / 'checkpoint.rprn'}", *TINY_TRAIN]) == 0
        assert main(["infer", "--image", image, "--prrn", str(out / "prrn" / "checkpoint.rprn"),
                     "--rpen", str(out / "rpen" / "checkpoint.rprn"), "--out", str(out / "r.ppm"), "--heatmap", str(out / "h.pgm")]) == 0
        runs.append({str(p.relative_to(out)): p.read_bytes() for p in out.rglob("*") if p.is_file()})
    assert len(runs[0]) == 10
    assert runs[0] == runs[1]


def test_eval_and_prior(cli_data, tmp_path, capsys):
    assert main(["eval", "--manifest", str(cli_data), "--out-csv", str(tmp_path / "e.csv")]) == 0
    assert "all" in capsys.readouterr().out
    assert len((tmp_path / "e.csv").read_text().splitlines()) == 5
    t = sorted((cli_data / "images").glob("*_T.ppm"))[0]
    r = sorted((cli_data / "images").glob("*_R.ppm"))[0]
    assert main(["prior", "--t", str(t), "--r", str(r), "--grid", "7", "--heatmap", str(tmp_path / "h.pgm")]) == 0
    values = np.array(json.loads(capsys.readouterr().out))
    assert values.shape == (7, 7)
    assert imageio.load_gray(tmp_path / "h.pgm").shape == (56, 56)


def test_ablate_grid(cli_data, tmp_path, capsys):
    assert main(["ablate-grid", "--manifest", str(cli_data), "--out", str(tmp_path), "--seed", "0", "--steps", "1", "--grids", "1", "7", "--base-channels", "4", "--norm-groups", "2"]) == 0
    assert (tmp_path / "ablation.csv").read_text().splitlines()[0] == "grid,psnr_db,ssim"


def test_gradcheck_subset(capsys):
    assert main(["gradcheck", "--trials", "2", "--case", "add", "--case", "conv2d"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 2


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["synth", "--out", "x"],  # --seed is mandatory
        ["train-prrn", "--manifest", "m", "--out", "o", "--steps", "1"],
        ["train-rpen", "--manifest", "m", "--out", "o", "--seed", "0", "--steps", "0"],
        ["synth", "--out", "x", "--seed", "1"],  # no sources given
        ["gradcheck", "--case", "nope"],
    ],
)
def test_usage_errors_exit_1(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    try:
        code = main(argv)
    except SystemExit as exc:
        code = exc.code
    assert code == 1


def test_malformed_ppm_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.ppm"
    bad.write_bytes(b"P6\n4 4\n255\n\x00\x01")
    assert main(["prior", "--t", str(bad), "--r", str(bad)]) == 2
    err = capsys.readouterr().err
    assert "offset" in err and "bad.ppm" in err


def test_malformed_checkpoint_exits_2(cli_data, tmp_path, capsys):
    bad = tmp_path / "bad.rprn"
    bad.write_bytes(b"RPRN\x01\x00")
    image = str(sorted((cli_data / "images").glob("*_I.ppm"))[0])
    assert main(["infer", "--image", image, "--prrn", str(bad), "--rpen", str(bad), "--out", str(tmp_path / "o.ppm")]) == 2
    assert "truncated" in capsys.readouterr().err
    assert main(["infer", "--image", image, "--prrn", str(tmp_path / "none.rprn"), "--rpen", str(bad), "--out", str(tmp_path / "o.ppm")]) == 2
    assert main(["eval", "--manifest", str(tmp_path / "missing")]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergent_training_exits_3(cli_data, tmp_path, capsys):
    code = main(["train-rpen", "--manifest", str(cli_data), "--out", str(tmp_path), "--seed", "0", "--stem-channels", "4", "--norm-groups", "2", "--steps", "5", "--lr", "1e38"])
    assert code == 3
    assert "non-finite" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "refprior", "synth", "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 1
    assert "--seed" in proc.stderr
