import numpy as np
import pytest

from ferformer.cli import cli
from ferformer.data import load_split

TINY_SETS = ["--set", "embed_dim=16", "--set", "depth=1", "--set", "heads=2", "--set", "patch_sizes=6,12",
             "--set", "stem_channels=4,8,8", "--set", "text_dim=16", "--set", "mlp_ratio=2",
             "--set", "batch_size=4", "--set", "lr0=0.01"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    assert cli(["synth", "--out", str(root), "--per-class", "2", "--test-per-class", "1", "--classes", "3"]) == 0
    return root


def test_synth_writes_loadable_folder(data_dir):
    ds = load_split(data_dir, "train")
    assert len(ds) == 6 and ds.class_names == ("surprise", "fear", "disgust")


def test_train_eval_predict_export(tmp_path, data_dir, capsys):
    ck = tmp_path / "m.ferf"
    assert cli(["train", "--data-dir", str(data_dir), "--checkpoint", str(ck), "--epochs", "2"] + TINY_SETS) == 0
    rows = (tmp_path / "metrics.csv").read_text().splitlines()
    assert rows[0] == "epoch,step,L,L_text,L_image,train_acc,lr" and len(rows) == 3
    assert cli(["eval", "--data-dir", str(data_dir), "--checkpoint", str(ck), "--confusion",
                str(tmp_path / "cm.csv"), "--dump-errors", str(tmp_path / "err.csv")]) == 0
    assert "accuracy=" in capsys.readouterr().out
    img = next((data_dir / "test").glob("*.png"))
    assert cli(["predict", "--checkpoint", str(ck), str(img)]) == 0
    assert capsys.readouterr().out.startswith(str(img) + ",")
    out = tmp_path / "f.csv"
    assert cli(["export-features", "--data-dir", str(data_dir), "--checkpoint", str(ck), "--out", str(out)]) == 0
    assert (tmp_path / "f_pca.csv").exists()


def test_global_flags_after_subcommand(tmp_path, data_dir):
    ck = tmp_path / "m.ferf"
    assert cli(["--seed", "3", "train", "--epochs", "0", "--data-dir", str(data_dir), "--checkpoint", str(ck)]
               + TINY_SETS) == 0


def test_train_without_data_dir_is_usage_error(capsys):
    assert cli(["train"]) == 1
    assert "--data-dir" in capsys.readouterr().err


def test_unknown_flag_is_usage_error():
    assert cli(["train", "--bogus"]) == 1
    assert cli([]) == 1


def test_unknown_config_key_is_runtime_error(data_dir):
    assert cli(["train", "--data-dir", str(data_dir), "--set", "depht=3"]) == 2


def test_missing_checkpoint_is_runtime_error(tmp_path, data_dir):
    assert cli(["eval", "--data-dir", str(data_dir), "--checkpoint", str(tmp_path / "none.ferf")]) == 2


def test_gradcheck_passes(capsys):
    assert cli(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "all passed" in out and "end_to_end_joint_loss" in out
