import csv
import json
import shutil
import subprocess
import sys

import pytest

from proxidc.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def read_rows(path):
    with open(path, newline="") as fh:
        return {r["estimand"]: r for r in csv.DictReader(line for line in fh
                                                          if not line.startswith("#"))}


def test_usage_errors_exit_1(capsys):
    assert run(capsys, "simulate", "--experiment", "99", "--seed", "1")[0] == 1
    assert run(capsys, "simulate", "--experiment", "1")[0] == 1  # missing seed
    assert run(capsys, "simulate", "--seed", "1")[0] == 1
    assert run(capsys, "analyze", "--lambda-grid", "a,b")[0] == 1
    assert run(capsys, "nonsense")[0] == 1
    assert run(capsys)[0] == 1
    assert run(capsys, "--help")[0] == 0


def test_missing_file_exits_2(capsys, tmp_path):
    code, _, err = run(capsys, "analyze", "--source-csv", str(tmp_path / "nope.csv"),
                       "--target-csv", str(tmp_path / "nope2.csv"), "--e-source", "0.5",
                       "--e-target", "0.6")
    assert code == 2 and "data error" in err


def test_malformed_data_exits_2(capsys, tmp_path, fixtures_dir):
    bad = tmp_path / "bad.csv"
    text = (fixtures_dir / "shift_source.csv").read_text().splitlines()
    text[1] = text[1].replace("1,0,1,", "1,7,1,", 1)
    bad.write_text("\n".join(text) + "\n")
    code, _, err = run(capsys, "analyze", "--source-csv", str(bad), "--target-csv",
                       str(fixtures_dir / "shift_target.csv"), "--schema",
                       str(fixtures_dir / "schema.txt"), "--e-source", "0.5",
                       "--e-target", "0.6")
    assert code == 2


def test_dump_config_round_trips(capsys):
    code, out, _ = run(capsys, "simulate", "--experiment", "12", "--dump-config")
    assert code == 0
    cfg = json.loads(out)
    assert cfg["id"] == 12 and cfg["ridge"] == [1e-4, 1e-4]


def test_simulate_outputs_are_byte_identical(capsys, tmp_path):
    args = ["simulate", "--experiment", "1", "--n", "200", "--reps", "3", "--seed", "11",
            "--n-mc", "20000", "--threads", "1", "--no-timestamp"]
    assert run(capsys, *args, "--out", str(tmp_path / "a"))[0] == 0
    assert run(capsys, *args, "--out", str(tmp_path / "b"), "--threads", "2")[0] == 0
    for name in ("summary.csv", "summary.txt", "reps.csv", "config.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    header = (tmp_path / "a" / "summary.csv").read_text().splitlines()[0]
    assert header.startswith("estimator,mean,bias_e3,rmse_e1,se_e1,coverage_pct")


def test_simulate_from_config_file(capsys, tmp_path):
    _, out, _ = run(capsys, "simulate", "--experiment", "5", "--dump-config")
    path = tmp_path / "cfg.json"
    cfg = json.loads(out)
    cfg.update(n=200, reps=2)
    path.write_text(json.dumps(cfg))
    code, out, _ = run(capsys, "simulate", "--config", str(path), "--n-mc", "20000",
                       "--threads", "1", "--format", "csv")
    assert code == 0 and out.splitlines()[1].startswith("psi_mar,")


def test_oracle_exit_codes(capsys):
    code, out, _ = run(capsys, "oracle", "--experiment", "1", "--n-mc", "200000")
    assert code == 0
    assert "eta* (1, W, X): -1 2 2 2 -1 -1 -1" in out
    assert "xi*  (1, Z, X): 0.601562 -0.5 -0.5 -0.5 0 0 0" in out
    code, out, _ = run(capsys, "oracle", "--experiment", "15", "--n-mc", "200000")
    assert code == 4 and "psi truth" in out
    code, out, _ = run(capsys, "oracle", "--experiment", "11", "--n-mc", "200000")
    truth = float(out.split("psi truth:")[1].split()[0])
    assert truth == pytest.approx(0.40, abs=0.01)


def test_truth_command(capsys):
    code, out, _ = run(capsys, "truth", "--experiment", "1", "--seed", "3", "--n-mc", "100000")
    assert code == 0 and float(out.split()[0]) == pytest.approx(-2.645, abs=0.02)


def _analyze(capsys, fixtures_dir, stem, out, *extra):
    return run(capsys, "analyze", "--source-csv", str(fixtures_dir / f"{stem}_source.csv"),
               "--target-csv", str(fixtures_dir / f"{stem}_target.csv"), "--schema",
               str(fixtures_dir / "schema.txt"), "--e-source", "0.5", "--e-target", "0.6",
               "--format", "csv", "--out", str(out), *extra)


def test_analyze_fixture_end_to_end(capsys, fixtures_dir, tmp_path):
    code, _, _ = _analyze(capsys, fixtures_dir, "shift", tmp_path / "r.csv")
    assert code == 0
    rows = read_rows(tmp_path / "r.csv")
    assert set(rows) == {"psi_standard", "psi_proximal", "theta_standard", "theta_proximal",
                         "ate_target", "ate_source"}
    ate = float(rows["ate_target"]["point"])
    for kind in ("standard", "proximal"):
        assert float(rows[f"theta_{kind}"]["point"]) == ate - float(rows[f"psi_{kind}"]["point"])
    code, _, _ = _analyze(capsys, fixtures_dir, "shift", tmp_path / "r2.csv")
    assert (tmp_path / "r.csv").read_bytes() == (tmp_path / "r2.csv").read_bytes()


def test_analyze_text_report(capsys, fixtures_dir):
    code, out, _ = run(capsys, "analyze", "--source-csv", str(fixtures_dir / "shift_source.csv"),
                       "--target-csv", str(fixtures_dir / "shift_target.csv"), "--schema",
                       str(fixtures_dir / "schema.txt"), "--e-source", "0.5",
                       "--e-target", "0.6", "--no-timestamp", "--lambda-grid", "0,0.01")
    assert code == 0
    assert out.splitlines()[0].split() == ["estimand", "point", "se", "ci_low", "ci_high"]
    assert "theta = ATE(-1 vs 0) - psi" in out


@pytest.mark.skipif(shutil.which("proxidc") is None, reason="console script not installed")
def test_console_entry_point():
    proc = subprocess.run(["proxidc", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "simulate" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "proxidc.cli", "truth"], capture_output=True,
                          text=True)
    assert proc.returncode == 1
