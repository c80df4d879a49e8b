import re

import numpy as np
import pytest

from camoret.cli import main
from camoret.synth import read_shard, write_shard
from camoret.training import load_checkpoint

TINY = """\
model:
  encoder: {embed_dim: 16, num_heads: 2, num_blocks: 1, mlp_ratio: 2}
  text: {embed_dim: 16, num_heads: 2, num_blocks: 1, mlp_ratio: 2}
train: {batch_size: 8, stage1: {epochs: 1}, stage2: {epochs: 1}}
"""


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.yaml").write_text(TINY)
    assert main(["gen-data", "--out", str(d / "data"), "--train-n", "16", "--test-n", "40"]) == 0
    return d


def test_gen_data_deterministic_and_stats(work, tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "a"), "--train-n", "16", "--test-n", "40"]) == 0
    for f in ("train.shard", "test.shard", "vocab.txt"):
        assert (tmp_path / "a" / f).read_bytes() == (work / "data" / f).read_bytes()
    out = capsys.readouterr().out
    assert "lambda histogram" in out and "caption length" in out


def test_gen_data_camo_min(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path), "--train-n", "30", "--test-n", "10",
                 "--camo-min", "0.9"]) == 0
    means = [float(m) for m in re.findall(r"mean_lambda=([0-9.]+)", capsys.readouterr().out)]
    assert len(means) == 2 and min(means) >= 0.9


def test_gen_data_invalid_range(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "--camo-min", "0.8", "--camo-max", "0.2"]) == 2


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as ei:
        main(["gen-data", "--out", "x", "--bogus"])
    assert ei.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_config_key_exits_2(work):
    assert main(["--set", "model.nope=1", "show-config"]) == 2


def test_train_then_eval_untrained(work, capsys):
    cfg = str(work / "tiny.yaml")
    out = work / "untrained"
    rc = main(["--config", cfg, "--set", "train.stage1.epochs=0", "--set", "train.stage2.epochs=0",
               "train", "--data", str(work / "data"), "--out", str(out)])
    assert rc == 0
    assert (out / "loss.csv").read_text() == "epoch,stage,loss_t2i,loss_i2t\n"
    capsys.readouterr()
    assert main(["eval", "--ckpt", str(out / "checkpoint.cecn"), "--data", str(work / "data")]) == 0
    text = capsys.readouterr().out
    assert "# config:" in text
    r1 = float(re.search(r"i2t\s+([0-9.]+)", text).group(1))
    assert r1 <= 100 / 40 + 15  # chance is 2.5% on 40 test pairs


def test_train_is_deterministic(work):
    cfg = str(work / "tiny.yaml")
    for name in ("r1", "r2"):
        assert main(["--config", cfg, "train", "--data", str(work / "data"),
                     "--out", str(work / name)]) == 0
    for f in ("loss.csv", "checkpoint.cecn", "config.json"):
        assert (work / "r1" / f).read_bytes() == (work / "r2" / f).read_bytes()
    assert len((work / "r1" / "loss.csv").read_text().splitlines()) == 3
    assert load_checkpoint(work / "r1" / "checkpoint.cecn").config["run"]["train"]["batch_size"] == 8


def test_missing_data_exits_3(work, tmp_path):
    assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 3


def test_corrupt_checkpoint_exits_3(work, tmp_path):
    p = tmp_path / "bad.cecn"
    p.write_bytes(b"NOPE" + bytes(20))
    assert main(["eval", "--ckpt", str(p), "--data", str(work / "data")]) == 3


def test_non_finite_data_exits_4(work, tmp_path):
    d = tmp_path / "nan"
    d.mkdir()
    samples = read_shard(work / "data" / "train.shard")
    samples[0].image[0, 0, 0] = np.nan
    write_shard(samples, d / "train.shard")
    (d / "test.shard").write_bytes((work / "data" / "test.shard").read_bytes())
    out = tmp_path / "run"
    assert main(["--config", str(work / "tiny.yaml"), "train", "--data", str(d),
                 "--out", str(out)]) == 4
    assert load_checkpoint(out / "checkpoint.cecn").stage == 0


def test_ablate_writes_csvs(work):
    out = work / "abl"
    assert main(["--config", str(work / "tiny.yaml"), "--set", "train.stage2.epochs=0",
                 "ablate", "--suite", "main", "--seeds", "0", "--data", str(work / "data"),
                 "--out", str(out)]) == 0
    lines = (out / "main.csv").read_text().splitlines()
    assert lines[0].startswith("variant,seed,i2t_r1") and len(lines) == 4
    assert (out / "main_config.json").exists()


def test_show_config_example(capsys):
    assert main(["show-config", "--example"]) == 0
    assert "gradcheck:" in capsys.readouterr().out
