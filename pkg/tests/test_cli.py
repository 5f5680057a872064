import subprocess
import sys

import pytest

from muca import cli


def _run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert _run("synth", "--out", out, "--n", 20, "--seed", 7, "--ratio", 0.1) == 0
    return out


FAST = ["--set", "steps_per_epoch=2", "--set", "mc_passes=2"]


def test_synth_twice_identical(tmp_path, synth_dir):
    assert _run("synth", "--out", tmp_path / "b", "--n", 20, "--seed", 7, "--ratio", 0.1) == 0
    assert (tmp_path / "b" / "manifest.tsv").read_text() == \
        (synth_dir / "manifest.tsv").read_text()


def test_synth_missing_out_is_usage_error():
    with pytest.raises(SystemExit) as err:
        _run("synth", "--n", 10)
    assert err.value.code == 2


def test_synth_200_split(tmp_path):
    assert _run("synth", "--out", tmp_path / "d", "--n", 200, "--seed", 1) == 0
    text = (tmp_path / "d" / "manifest.tsv").read_text().splitlines()[1:]
    roles = [line.split("\t")[0] for line in text]
    assert roles.count("labeled") + roles.count("unlabeled") == 120
    assert roles.count("val") == 40 and roles.count("test") == 40


def test_unknown_mode_is_usage_error(tmp_path, synth_dir):
    with pytest.raises(SystemExit) as err:
        _run("train", "--manifest", synth_dir / "manifest.tsv", "--out", tmp_path,
             "--mode", "fancy")
    assert err.value.code == 2


def test_bad_override_is_usage_error(tmp_path, synth_dir):
    code = _run("train", "--manifest", synth_dir / "manifest.tsv", "--out", tmp_path,
                "--set", "nonsense=1")
    assert code == 2


def test_missing_manifest_is_data_error(tmp_path):
    assert _run("train", "--manifest", tmp_path / "none.tsv", "--out", tmp_path / "o") == 3


def test_train_onlysup_and_eval(tmp_path, synth_dir):
    out = tmp_path / "run"
    code = _run("train", "--manifest", synth_dir / "manifest.tsv", "--out", out,
                "--mode", "onlysup", "--epochs", 2, "--seed", 3, "--quiet", *FAST)
    assert code == 0
    rows = (out / "loss.csv").read_text().splitlines()[2:]
    for row in rows:
        f = row.split(",")
        assert f[2] == f[3] == f[4] == "0.0"
    snap = (out / "config.txt").read_text()
    for key in ("epochs", "lr0", "lr_min", "weight_decay", "ema_alpha", "mc_passes", "rho",
                "h_max", "seed", "labeled_ratio", "batch_labeled", "batch_unlabeled"):
        assert f"\n{key} = " in snap
    assert not (out / ".lock").exists()

    ev = tmp_path / "ev"
    assert _run("eval", "--checkpoint", out / "best.ckpt", "--manifest",
                synth_dir / "manifest.tsv", "--split", "val", "--out", ev) == 0
    from muca import checkpoint
    saved = float(checkpoint.load(out / "best.ckpt")["meta"]["val_miou"])
    mean_row = (ev / "metrics_val.csv").read_text().splitlines()[-1].split(",")
    assert abs(float(mean_row[1]) - saved) <= 1e-6
    conf = [list(map(int, r.split(","))) for r in (ev / "confusion_val.csv").read_text().split()]
    assert sum(map(sum, conf)) == 4 * 64 * 64


def test_eval_refuses_bad_checkpoint(tmp_path, synth_dir):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"MUCA\x09\x00rest")
    code = _run("eval", "--checkpoint", bad, "--manifest", synth_dir / "manifest.tsv",
                "--out", tmp_path / "ev")
    assert code == 3


def test_eval_empty_split_is_error(tmp_path, synth_dir):
    from muca.data import DatasetManifest
    m = DatasetManifest.read(synth_dir / "manifest.tsv")
    m.entries["test"] = []
    m.write(tmp_path / "m.tsv")
    for sub in ("images", "labels"):
        (tmp_path / sub).symlink_to(synth_dir / sub)
    out = tmp_path / "run"
    assert _run("train", "--manifest", tmp_path / "m.tsv", "--out", out, "--mode", "onlysup",
                "--epochs", 1, "--quiet", *FAST) == 0
    code = _run("eval", "--checkpoint", out / "best.ckpt", "--manifest", tmp_path / "m.tsv",
                "--split", "test")
    assert code == 3


def test_lock_blocks_second_run(tmp_path, synth_dir):
    out = tmp_path / "locked"
    out.mkdir()
    (out / ".lock").write_text("123")
    code = _run("train", "--manifest", synth_dir / "manifest.tsv", "--out", out,
                "--epochs", 1, *FAST)
    assert code == 3


def test_config_file_and_env_seed(tmp_path, synth_dir, monkeypatch):
    cfg = tmp_path / "c.txt"
    cfg.write_text("# quick\nmode = onlysup\nepochs = 1 # one\nsteps_per_epoch = 1\n")
    monkeypatch.setenv("MUCA_SEED", "11")
    out = tmp_path / "r"
    assert _run("train", "--manifest", synth_dir / "manifest.tsv", "--out", out,
                "--config", cfg, "--quiet") == 0
    snap = (out / "config.txt").read_text()
    assert "\nseed = 11\n" in snap and "\nmode = onlysup\n" in snap


def test_ablation_preset_applies_under_overrides():
    cfg = cli.ablation_config(seed=4)
    assert cfg.lr0 == float(cli.ABLATION_PRESET["lr0"]) and cfg.seed == 4
    args = cli.build_parser().parse_args(
        ["ablate", "--manifest", "m", "--out", "o", "--set", "lr0=0.01"])
    cfg = cli.resolve_config(args, cli.ABLATION_PRESET)
    assert cfg.lr0 == 0.01
    assert cfg.steps_per_epoch == int(cli.ABLATION_PRESET["steps_per_epoch"])


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "muca.cli", "--help"], capture_output=True,
                         text=True)
    assert res.returncode == 0 and "synth" in res.stdout


def test_numeric_failure_exit_code(tmp_path, synth_dir, monkeypatch):
    from muca import losses, tensor
    monkeypatch.setattr(losses, "consistency_loss", lambda *a, **k: tensor.Tensor(float("inf")))
    out = tmp_path / "nan"
    code = _run("train", "--manifest", synth_dir / "manifest.tsv", "--out", out,
                "--mode", "ctsa", "--epochs", 1, "--quiet", *FAST)
    tensor.TAPE.clear()
    assert code == 4
    assert "term = l_c" in (out / "numeric_failure.txt").read_text()
