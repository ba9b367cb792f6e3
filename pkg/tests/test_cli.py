import subprocess
import sys

import pytest

from sagcrf.cli import main, parse_synth, read_config, UsageError

SMALL = "n=40,test=10,k=3,law=uniform,tmax=8,seed=1"


def test_train_smoke(tmp_path, capsys):
    out = tmp_path / "out"
    code = main(["train", "--synth", SMALL, "--optimizer", "sag-nus-star", "--passes", "5", "--seed", "7",
                 "--out", str(out)])
    assert code == 0
    assert (out / "sag-nus-star.csv").is_file()
    assert (out / "gap.svg").is_file() and (out / "test_error.svg").is_file()
    assert any((out / "cache").iterdir())
    assert "sag-nus-star: passes" in capsys.readouterr().out


def test_benchmark_is_deterministic(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# shared options\nsynth = {SMALL}\npasses = 3\nseed = 5\neta = 0.1\n"
                   "optimizers = sag,sag-nus,sg\n")
    outs = []
    for k in range(2):
        out = tmp_path / f"o{k}"
        assert main(["--config", str(cfg), "benchmark", "--out", str(out)]) == 0
        outs.append(out)
    for name in ("sag.csv", "sag-nus.csv", "sg.csv", "gap.svg"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    assert (outs[0] / "gap.svg").read_text().count("<polyline") == 3


def test_command_line_overrides_config(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"synth = {SMALL}\npasses = 1\noptimizer = sg\neta = 0.1\n")
    out = tmp_path / "o"
    assert main(["--config", str(cfg), "train", "--passes", "2", "--out", str(out)]) == 0
    rows = (out / "sg.csv").read_text().splitlines()
    assert float(rows[-1].split(",")[0]) == 2.0


def test_missing_data_file(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "nope.txt")]) == 2
    assert "usage" in capsys.readouterr().err


def test_no_data_source(capsys):
    assert main(["train"]) == 2


def test_unknown_flag(capsys):
    assert main(["train", "--synth", "default", "--bogus"]) == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_optimizer_in_list(capsys):
    assert main(["benchmark", "--synth", SMALL, "--optimizers", "sag,lbfgs"]) == 2


def test_runtime_failure_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_text("a b X\nc Y\n")
    assert main(["inspect-memory", "--data", str(bad)]) == 1
    assert "TabularFormatError" in capsys.readouterr().err


def test_verify_convergence(tmp_path):
    out = tmp_path / "v.csv"
    assert main(["verify-convergence", "--steps", "100", "--seeds", "10", "--checkpoints", "10,100",
                 "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "variant,k,empirical_mean,bound"
    assert [ln.split(",")[:2] for ln in lines[1:]] == [["a", "10"], ["a", "100"], ["b", "10"], ["b", "100"]]


def test_inspect_memory_and_gen_synth(tmp_path, capsys):
    train = tmp_path / "d" / "train.txt"
    test = tmp_path / "d" / "test.txt"
    assert main(["gen-synth", "--n", "20", "--k", "3", "--test-n", "5", "--out", str(train),
                 "--test-out", str(test)]) == 0
    assert train.is_file() and test.is_file()
    capsys.readouterr()
    assert main(["inspect-memory", "--data", str(train)]) == 0
    text = capsys.readouterr().out
    assert text.splitlines()[0] == "mode,count,ratio"
    assert main(["train", "--data", str(train), "--test", str(test), "--passes", "2",
                 "--out", str(tmp_path / "o")]) == 0


def test_parse_synth():
    s = parse_synth("n=10,k=2")
    assert s["n"] == 10 and s["k"] == 2 and s["law"] == "heavy"
    with pytest.raises(UsageError):
        parse_synth("size=3")


def test_read_config_flags(tmp_path):
    cfg = tmp_path / "c"
    cfg.write_text("wall_clock = true\nverbose = off\nlambda = 0.5 # trailing comment\n")
    assert read_config(cfg) == ["--wall-clock", "--lambda", "0.5"]
    cfg.write_text("novalue\n")
    with pytest.raises(UsageError):
        read_config(cfg)


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "sagcrf", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "verify-convergence" in res.stdout
