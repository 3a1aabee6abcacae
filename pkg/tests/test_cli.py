import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from ovpanoptic.cli import main

SMALL = ["data.num_images=4", "data.image_size=32", "data.min_size=8", "data.max_size=12", "data.max_things=2",
         "masks.num_queries=6", "masks.hidden_dim=32", "masks.decoder_layers=2", "optim.iterations=2",
         "optim.batch_size=2", "log.every=1"]


def _sets(items):
    out = []
    for s in items:
        out += ["--set", s]
    return out


def test_malformed_config_exits_nonzero(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("optim:\n  learning_rate: 3\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "unknown config key" in capsys.readouterr().err
    bad.write_text("seed: [\n")
    assert main(["train", "--config", str(bad)]) == 2


def test_missing_checkpoint_exits_nonzero(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--dataset", "train", "--vocab", "train"]) == 2
    assert "no such checkpoint" in capsys.readouterr().err


def test_console_script_module_entry(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "ovpanoptic.cli", "train", "--set", "nope=1"],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and "unknown config key" in proc.stderr


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--out", str(out)] + _sets(SMALL)) == 0
    return out


def test_train_writes_artifacts(run_dir):
    assert (run_dir / "final.ckpt").exists() and (run_dir / "config.yaml").exists()
    lines = (run_dir / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 2
    report = json.loads((run_dir / "train_eval.json").read_text())
    assert "PQ" in report["summary"]


def test_eval_infer_cluster_generate(run_dir, tmp_path, capsys):
    ckpt = str(run_dir / "final.ckpt")
    out = tmp_path / "eval.json"
    assert main(["eval", "--checkpoint", ckpt, "--dataset", "train", "--vocab", "train", "--out", str(out)]) == 0
    assert "PQ" in json.loads(out.read_text())["summary"]
    assert main(["eval", "--checkpoint", ckpt, "--dataset", "train", "--vocab", "train", "--task", "semantic"]) == 0

    data = tmp_path / "data"
    assert main(["generate", "--out", str(data)] + _sets(SMALL)) == 0
    assert main(["eval", "--checkpoint", ckpt, "--dataset", str(data), "--vocab", "train"]) == 0

    vocab = tmp_path / "vocab.txt"
    vocab.write_text("thing: square\nthing: circle\n# comment\nthing: ball\nstuff: grass\nstuff: sky\n")
    img = tmp_path / "img.png"
    Image.fromarray(np.asarray(Image.open(data / "images" / "000000.png"))).save(img)
    capsys.readouterr()
    assert main(["infer", "--checkpoint", ckpt, "--image", str(img), "--vocab", str(vocab),
                 "--out", str(tmp_path / "pred")]) == 0
    assert (tmp_path / "pred" / "panoptic.json").exists()

    kpng = tmp_path / "k.png"
    assert main(["cluster", "--checkpoint", ckpt, "--image", str(img), "--k", "3", "--out", str(kpng)]) == 0
    assert Image.open(kpng).mode == "P"
    assert main(["cluster", "--checkpoint", ckpt, "--image", str(img), "--k", "100000", "--out", str(kpng)]) == 2
