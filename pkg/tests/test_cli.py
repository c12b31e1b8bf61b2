import json
import os
import subprocess
import sys

import pytest

from qshed import cli
from qshed.simnet import CSV_COLUMNS

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
EXAMPLE = os.path.join(ROOT, "configs", "example_logistic.conf")


def write_config(tmp_path, extra="", max_rounds=40):
    path = tmp_path / "run.conf"
    path.write_text(
        f"devices = 3\ndim = 6\nsamples = 40\nmax_rounds = {max_rounds}\n"
        f'output_dir = "{tmp_path / "out"}"\n' + extra
    )
    return path


def test_run_writes_metrics_and_summary(tmp_path, capsys):
    code = cli.main(["run", str(write_config(tmp_path)), "-q"])
    assert code == cli.EXIT_OK
    lines = (tmp_path / "out" / "metrics.csv").read_text().splitlines()
    assert lines[0].startswith("# qshed ") and "config-sha256" in lines[0]
    assert lines[1] == ",".join(CSV_COLUMNS)
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["termination"] == "converged"
    assert summary["rounds"] == len(lines) - 2
    assert summary["config"]["devices"] == 3
    assert summary["config_sha256"] == lines[0].split()[-1]


def test_round_cap_exit_code(tmp_path):
    cfg = write_config(tmp_path, "epsilon = 1e-30\n", max_rounds=2)
    assert cli.main(["run", str(cfg), "-q"]) == cli.EXIT_ROUND_CAP


def test_missing_dataset_and_bad_config(tmp_path, capsys):
    cfg = write_config(tmp_path, f'dataset = "{tmp_path / "missing.csv"}"\n')
    assert cli.main(["run", str(cfg), "-q"]) == cli.EXIT_ERROR
    bad = tmp_path / "bad.conf"
    bad.write_text("mode = warp\n")
    assert cli.main(["run", str(bad)]) == cli.EXIT_ERROR
    assert "mode" in capsys.readouterr().err
    assert cli.main(["run", str(tmp_path / "nope.conf")]) == cli.EXIT_ERROR


def test_csv_dataset(tmp_path):
    rows = ["x1,x2,y"] + [f"{i % 7 - 3},{(i * 5) % 11 - 5},{1 if i % 3 else -1}" for i in range(60)]
    (tmp_path / "d.csv").write_text("\n".join(rows) + "\n")
    cfg = write_config(tmp_path, f'dataset = "{tmp_path / "d.csv"}"\n')
    assert cli.main(["run", str(cfg), "-q"]) in (cli.EXIT_OK, cli.EXIT_ROUND_CAP)
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["rounds"] >= 1


def test_run_is_deterministic(tmp_path):
    cfg = write_config(tmp_path, "channel = rayleigh\n")
    cli.main(["run", str(cfg), "-q"])
    first = (tmp_path / "out" / "metrics.csv").read_bytes()
    cli.main(["run", str(cfg), "-q"])
    assert (tmp_path / "out" / "metrics.csv").read_bytes() == first


def test_help_lists_every_key(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["run", "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for key in cli.FIELD_DOCS:
        assert key in out


def test_verify_and_force_fail(capsys):
    assert cli.main(["verify", "convexity"]) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "PASS" in out and "FAIL" not in out
    assert cli.main(["verify", "convexity", "--force-fail"]) == cli.EXIT_ERROR
    assert "FAIL" in capsys.readouterr().out


def test_alloc_command(capsys):
    assert cli.main(["alloc", "--lambdas", "4,2,1,0.5", "--budget", "3"]) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "q*" in out and "exact" in out and "first-order" in out and "b_1" in out
    assert cli.main(["alloc", "--lambdas", "4 2", "--n", "10", "--budget", "2", "--mode", "exact"]) == 0
    assert "n = 10" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [
    ["alloc", "--lambdas", "4,2", "--budget", "0"],
    ["alloc", "--lambdas", "4,x", "--budget", "2"],
    ["alloc", "--lambdas", "1,2", "--budget", "2"],
    ["alloc", "--lambdas", "4,2,1", "--n", "2", "--budget", "2"],
])
def test_alloc_rejects_bad_input(argv):
    with pytest.raises(SystemExit) as exc:
        cli.main(argv)
    assert exc.value.code == 2


def test_regen_oracles_outputs_json(capsys):
    assert cli.main(["regen-oracles", "--seed", "1"]) == 0
    data = json.loads(capsys.readouterr().out)
    assert set(data) == {"error_law", "grid", "integer"}


def test_module_entry_point_and_example_config(tmp_path):
    env = {**os.environ, "QSHED_OUTPUT_DIR": str(tmp_path / "ex")}
    proc = subprocess.run([sys.executable, "-m", "qshed", "run", EXAMPLE, "-q"],
                          env=env, capture_output=True, text=True, timeout=600)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "ex" / "metrics.csv").exists()
