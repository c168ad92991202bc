import hashlib

import pytest

from nonlocal_hjb.cli import main

FAST_LINEAR = ["--set", "grid.N=8", "--set", "grid.M=17"]


def _digest(d):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(d.iterdir())}


def test_norms_passes_and_writes_outputs(tmp_path, capsys):
    assert main(["norms", "--out", str(tmp_path)]) == 0
    names = {p.name for p in tmp_path.iterdir()}
    assert {"norms.csv", "norms.png", "summary.csv", "manifest.txt"} <= names
    assert "pass failed_inequality_sets" in capsys.readouterr().out


def test_check_failure_exits_one(tmp_path, capsys):
    assert main(["solve-linear", "--out", str(tmp_path), "--no-figures", *FAST_LINEAR]) == 1
    err = capsys.readouterr().err
    assert "check failed: max_interior_error" in err
    assert "max_interior_error,0.0139" in (tmp_path / "summary.csv").read_text()
    assert ",fail\n" in (tmp_path / "summary.csv").read_text()


def test_usage_errors_exit_two(tmp_path, capsys):
    assert main(["norms", "--out", str(tmp_path), "--set", "grid.N=1"]) == 2
    assert "grid.N" in capsys.readouterr().err
    with pytest.raises(SystemExit) as info:
        main(["run", "--problem", "nope"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        main([])
    assert info.value.code == 2


def test_bad_config_file_exits_two(tmp_path, capsys):
    f = tmp_path / "bad.cfg"
    f.write_text("grid.N = 4\ngarbage\n")
    assert main(["norms", "--config", str(f), "--out", str(tmp_path / "o")]) == 2
    assert ":2:" in capsys.readouterr().err


def test_manifest_lists_inputs_and_files(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("grid.M = 41\n")
    out = tmp_path / "o"
    main(["norms", "--config", str(f), "--out", str(out), "--seed", "9", "--no-figures"])
    text = (out / "manifest.txt").read_text()
    assert "problem: norms" in text and f"config_file: {f}" in text and "seed: 9" in text
    assert "grid.M = 41  # file:1" in text and "mc.seed = 9  # set" in text
    assert "model.alpha = 0.5  # default" in text
    assert "numpy = " in text
    for name in ("norms.csv", "summary.csv", "manifest.txt"):
        assert name in text.split("[files]")[1]
    assert "norms.png" not in text


def test_outputs_are_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["solve-hjb", "--problem", "lq-scalar", "--out", str(d), "--set", "grid.N=8"]) == 0
    da, db = _digest(a), _digest(b)
    da.pop("manifest.txt"), db.pop("manifest.txt")   # records the output path
    assert da == db and "strategy.png" in da


def test_run_exp_utility(tmp_path):
    out = tmp_path / "exp"
    code = main(["run", "--problem", "exp-utility", "--out", str(out), "--no-figures",
                 "--set", "grid.N=16", "--set", "grid.M=81"])
    names = {p.name for p in out.iterdir()}
    assert {"strategy.csv", "value.csv", "phi_table.csv", "oracle_error.csv"} <= names
    head = (out / "phi_table.csv").read_text().splitlines()[0]
    assert head == "t,s,phi1_1,phi2_1"
    assert code in (0, 1)


def test_check_command_only_runs_checks(tmp_path):
    assert main(["check", "--problem", "lq-scalar", "--out", str(tmp_path), "--set", "grid.N=4"]) == 0
    assert (tmp_path / "checks.csv").exists()
    assert not (tmp_path / "strategy.csv").exists()


def test_solve_hjb_defaults_to_manufactured(tmp_path):
    assert main(["solve-hjb", "--out", str(tmp_path), "--no-figures"]) == 0
    assert "problem: nonlinear-manufactured" in (tmp_path / "manifest.txt").read_text()
