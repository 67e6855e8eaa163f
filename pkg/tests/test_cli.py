import json
import subprocess
import sys

import numpy as np
import pytest

from infsample.cli import main
from infsample.model import load_checkpoint
from infsample.samplers import read_feature_file

SMALL = {
    "dataset": {"format": "synthetic", "classes": 3, "per_class": 40, "dim": 4, "seed": 3},
    "model": {"hidden": [8]},
    "train": {"epochs": 60},
    "extrinsic": {"hidden": [6]},
    "removed_class": 2,
    "samplers": ["random", "logit", "ext_topk"],
    "sample_counts": [12],
    "repetitions": 2,
    "lissa": {"damping": 1.0},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


def test_no_arguments_is_usage_error(capsys):
    assert main([]) == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand(capsys):
    with pytest.raises(SystemExit) as err:
        main(["frobnicate"])
    assert err.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_bad_config_exit_1(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"removed_class": 9}))
    assert main(["benchmark", "--config", str(path)]) == 1
    assert "removed_class" in capsys.readouterr().err


def test_train_features_sample_influence(tmp_path, config, capsys):
    ckpt = tmp_path / "m.ckpt"
    assert main(["train", "--config", config, "--out", str(ckpt)]) == 0
    spec, theta = load_checkpoint(ckpt)
    assert spec.layer_sizes == (4, 8, 3)

    for mode, width in (("intrinsic", 8), ("extrinsic", 6), ("raw", 4)):
        out = tmp_path / f"{mode}.txt"
        assert main(["features", "--config", config, "--mode", mode, "--checkpoint", str(ckpt),
                     "--out", str(out)]) == 0
        assert read_feature_file(out).shape == (96, width)

    sample = tmp_path / "s.json"
    assert main(["sample", "--config", config, "--sampler", "logit", "--count", "12",
                 "--checkpoint", str(ckpt), "--out", str(sample)]) == 0
    assert len(json.loads(sample.read_text())["indices"]) == 12

    vec = tmp_path / "inf.txt"
    capsys.readouterr()
    assert main(["influence", "--config", config, "--index", "0", "--sample", str(sample),
                 "--checkpoint", str(ckpt), "--out", str(vec)]) == 0
    assert np.loadtxt(vec).shape == (spec.param_count,)
    assert json.loads(capsys.readouterr().out)["converged"] is True
    assert main(["influence", "--config", config, "--index", "9999", "--out", str(vec)]) == 1


def test_unlearn(tmp_path, config, capsys):
    edited = tmp_path / "edited.ckpt"
    assert main(["unlearn", "--config", config, "--sampler", "random", "--count", "12",
                 "--out", str(edited)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["edited"]["SA"] <= out["baseline"]["SA"]
    assert out["telemetry"][0]["converged"]
    assert edited.exists()


def test_benchmark_twice_identical(tmp_path, config):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["benchmark", "--config", config, "--out", str(a)]) == 0
    assert main(["benchmark", "--config", config, "--out", str(b), "--threads", "4"]) == 0
    for name in ("trials.csv", "aggregate.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    ma = json.loads((a / "manifest.json").read_text())
    mb = json.loads((b / "manifest.json").read_text())
    assert ma["config_digest"] == mb["config_digest"]


def test_validate_quick(capsys):
    assert main(["validate", "--quick"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 5 and all(ln.startswith("[PASS]") for ln in lines)


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "infsample.cli"], capture_output=True, text=True)
    assert proc.returncode == 2 and "usage" in proc.stderr
