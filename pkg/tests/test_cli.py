import time

import numpy as np
import pytest

from hsmamba.cli import dump_config, effective_config, main, parse_config_text
from hsmamba.train import read_ppm

SMALL = ["--set", "D=8", "--set", "P0=4", "--set", "groups_spe=4", "--set", "groups_spa=4",
         "--set", "state_size=2", "--set", "gn_groups=4"]


@pytest.fixture
def scene(tmp_path):
    prefix = str(tmp_path / "scene")
    assert main(["synth", "--H", "12", "--W", "12", "--C", "4", "--K", "3", "--seed", "1",
                 "--out", prefix]) == 0
    return prefix


def train_args(prefix, out, *extra):
    return ["train", "--cube", prefix + ".hsic", "--labels", prefix + ".hsil", "--out", str(out),
            "--set", "train_n=6", "--set", "val_n=3", *SMALL, *extra]


def test_missing_cube_is_usage_error(capsys):
    with pytest.raises(SystemExit) as err:
        main(["train", "--labels", "x.hsil", "--out", "o"])
    assert err.value.code == 2
    assert "--cube" in capsys.readouterr().err


def test_missing_file_exits_one(tmp_path, capsys):
    code = main(["train", "--cube", str(tmp_path / "nope.hsic"), "--labels", "x", "--out",
                 str(tmp_path / "o")])
    assert code == 1 and "nope.hsic" in capsys.readouterr().err


def test_train_writes_one_row_per_run(scene, tmp_path):
    out = tmp_path / "run"
    assert main(train_args(scene, out, "--runs", "2", "--epochs", "3")) == 0
    lines = (out / "results.csv").read_text().splitlines()
    assert lines[0] == "run,seed,oa,aa,kappa"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["0", "1", "mean", "std"]
    for r in range(2):
        assert (out / f"checkpoint_run{r}.hsmw").exists()
        assert read_ppm(out / f"map_run{r}.ppm").shape == (12, 12, 3)
        assert len((out / f"history_run{r}.csv").read_text().splitlines()) == 4


def test_same_seed_same_csv(scene, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(train_args(scene, out, "--runs", "2", "--epochs", "3",
                               "--split-seed", "7")) == 0
    assert (a / "results.csv").read_bytes() == (b / "results.csv").read_bytes()


def test_replay_from_effective_config(scene, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(train_args(scene, a, "--runs", "1", "--epochs", "2")) == 0
    cfg = a / "effective.cfg"
    text = cfg.read_text()
    assert "lr = 0.0003" in text and "D = 8" in text
    assert main(["train", "--cube", scene + ".hsic", "--labels", scene + ".hsil",
                 "--config", str(cfg), "--out", str(b)]) == 0
    assert (a / "results.csv").read_bytes() == (b / "results.csv").read_bytes()
    assert (b / "effective.cfg").read_text() == text


def test_unknown_key_reports_line(tmp_path, scene, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("# comment\nlr = 0.01\nwidth = 3\n")
    code = main(["train", "--cube", scene + ".hsic", "--labels", scene + ".hsil",
                 "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "bad.cfg:3: unknown key 'width'" in capsys.readouterr().err


def test_flags_win_over_file():
    cfg = effective_config(parse_config_text("lr = 0.5\nruns = 4\n"), {"lr": 0.1, "runs": None})
    assert cfg["lr"] == 0.1 and cfg["runs"] == 4


def test_dump_parses_back():
    cfg = effective_config({}, {})
    assert parse_config_text(dump_config(cfg)) == cfg


def test_eval_and_predict(scene, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(train_args(scene, out, "--runs", "1", "--epochs", "3")) == 0
    capsys.readouterr()
    ck = str(out / "checkpoint_run0.hsmw")
    assert main(["eval", "--cube", scene + ".hsic", "--labels", scene + ".hsil",
                 "--checkpoint", ck]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "oa,aa,kappa"
    oa = float(lines[1].split(",")[0])
    assert 0.0 <= oa <= 1.0
    assert main(["predict", "--cube", scene + ".hsic", "--checkpoint", ck,
                 "--map-out", str(tmp_path / "m.ppm")]) == 0
    assert read_ppm(tmp_path / "m.ppm").shape == (12, 12, 3)


def test_eval_band_mismatch(scene, tmp_path):
    out = tmp_path / "run"
    assert main(train_args(scene, out, "--runs", "1", "--epochs", "1")) == 0
    other = str(tmp_path / "other")
    main(["synth", "--H", "12", "--W", "12", "--C", "5", "--K", "3", "--out", other])
    assert main(["eval", "--cube", other + ".hsic", "--labels", other + ".hsil",
                 "--checkpoint", str(out / "checkpoint_run0.hsmw")]) == 1


def test_gradcheck_op_level_passes(capsys):
    assert main(["gradcheck", "--level", "op"]) == 0
    assert " 0 failed" in capsys.readouterr().out


def test_bench_rows_increase(tmp_path):
    path = tmp_path / "b.csv"
    assert main(["bench", "--scan", "--L", "256", "64", "128", "--D", "4", "--N", "4",
                 "--repeats", "1", "--out", str(path)]) == 0
    rows = path.read_text().splitlines()[1:]
    Ls = [int(r.split(",")[0]) for r in rows]
    assert Ls == sorted(Ls) and len(set(Ls)) == 3


def test_synth_then_train_smoke_32(tmp_path):
    t0 = time.perf_counter()
    prefix = str(tmp_path / "s")
    assert main(["synth", "--H", "32", "--W", "32", "--C", "8", "--K", "4", "--out", prefix]) == 0
    assert main(["train", "--cube", prefix + ".hsic", "--labels", prefix + ".hsil",
                 "--out", str(tmp_path / "o"), "--runs", "1", "--epochs", "5"]) == 0
    assert time.perf_counter() - t0 < 300
    assert np.isfinite(np.loadtxt(tmp_path / "o" / "results.csv", delimiter=",",
                                  skiprows=1, usecols=(2,))).all()
