import csv
import json
import subprocess
import sys

import pytest
from PIL import Image

from handmim.cli import main
from helpers import tree_hash

SMALL = """\
data.n_pretrain = 8
data.n_train = 8
data.n_test = 4
optimizer.batch_size = 4
"""


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL)
    return str(path)


def test_eval_without_checkpoint_is_usage_error(tmp_path, capsys):
    assert main(["eval", "--out", str(tmp_path)]) == 2
    assert "usage:" in capsys.readouterr().err


def test_unknown_flag_exits_2(tmp_path):
    assert main(["gen-data", "--n", "2", "--out", str(tmp_path), "--colour", "red"]) == 2


def test_console_script_usage_exit_code():
    proc = subprocess.run([sys.executable, "-m", "handmim.cli", "pretrain"], capture_output=True, text=True)
    assert proc.returncode == 2 and "--out" in proc.stderr


def test_gen_data_hash_stable(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-data", "--n", "50", "--seed", "1", "--out", str(tmp_path / name)]) == 0
    assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")
    assert len(list((tmp_path / "a" / "rgb").iterdir())) == 50
    main(["gen-data", "--n", "50", "--seed", "2", "--out", str(tmp_path / "c")])
    assert tree_hash(tmp_path / "c") != tree_hash(tmp_path / "a")


def test_missing_checkpoint_reports_category(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--out", str(tmp_path / "e")]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error category=checkpoint ")


def test_bad_freeze_is_config_error(tmp_path, capsys):
    assert main(["finetune", "--freeze-blocks", "9", "--out", str(tmp_path)]) == 1
    assert capsys.readouterr().err.startswith("error category=config ")


def test_plot_needs_curves(tmp_path, capsys):
    assert main(["plot", str(tmp_path)]) == 1
    assert "category=ingestion" in capsys.readouterr().err


def test_pipeline(tmp_path, small_cfg):
    pre, ft, ev, pl = (str(tmp_path / n) for n in ("pre", "ft", "ev", "pl"))
    assert main(["pretrain", "--config", small_cfg, "--epochs", "1", "--ablate", "pose", "--out", pre]) == 0
    assert "loss.w_pose = 0.0" in (tmp_path / "pre" / "config.txt").read_text()
    history = [json.loads(l) for l in (tmp_path / "pre" / "history.jsonl").read_text().splitlines()]
    assert len(history) == 1 and history[0]["pose"] > 0
    args = ["finetune", "--config", small_cfg, "--epochs", "1", "--freeze-blocks", "2"]
    assert main(args + ["--pretrained", pre + "/pretrain.ckpt", "--out", ft]) == 0
    assert main(["eval", "--checkpoint", ft + "/finetune.ckpt", "--n", "4", "--out", ev]) == 0
    metrics = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert metrics["n_samples"] == 4 and metrics["pajpe"] > 0
    assert main(["plot", ev, "--out", pl]) == 0
    for name in ("auc_pose.png", "auc_mesh.png"):
        assert Image.open(tmp_path / "pl" / name).format == "PNG"
    assert (tmp_path / "pl" / "curves.csv").read_bytes() == (tmp_path / "ev" / "curves.csv").read_bytes()


def test_finetune_on_directory(tmp_path, small_cfg):
    main(["gen-data", "--n", "6", "--seed", "4", "--out", str(tmp_path / "d")])
    out = tmp_path / "ft"
    assert main(["finetune", "--config", small_cfg, "--epochs", "1", "--data", str(tmp_path / "d"), "--out", str(out)]) == 0
    assert (out / "finetune.ckpt").exists()


def test_ablation_report(tmp_path, small_cfg):
    args = ["ablation", "--config", small_cfg, "--epochs", "1", "--n-train", "8", "--n-test", "4", "--finetune-epochs", "1"]
    assert main(args + ["--out", str(tmp_path)]) == 0
    with open(tmp_path / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["removed"] for r in rows] == ["pose", "patch", "recon"]
    for r in rows:
        assert float(r[f"w_{r['removed']}"]) == 0.0
        assert sum(float(r[f"w_{t}"]) for t in ("pose", "patch", "recon")) == 2.0
