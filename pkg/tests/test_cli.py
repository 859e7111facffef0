import json

import numpy as np
import pytest

from exitlab.cli import main


def test_saddle_exit_command_passes(tmp_path, capsys):
    code = main(["saddle-exit", "--lp", "1", "--lm", "1", "--delta", "0.5",
                 "--y2", "0.25", "--eps", "1e-2", "--paths", "600",
                 "--seed", "3", "--dt", "2e-3", "--out", str(tmp_path)])
    out = capsys.readouterr().out
    assert code == 0
    assert "PASS" in out
    assert (tmp_path / "report.json").exists()


def test_report_command_round_trip(tmp_path, capsys):
    main(["saddle-exit", "--eps", "1e-2", "--paths", "600", "--seed", "5",
          "--dt", "2e-3", "--out", str(tmp_path)])
    capsys.readouterr()
    code = main(["report", "--in", str(tmp_path / "report.json")])
    out = capsys.readouterr().out
    assert code == 0
    assert "linear-saddle-exit" in out


def test_normalform_command(tmp_path, capsys):
    field = {"name": "polynomial",
             "params": {"exponents": [[1, 0], [0, 1], [2, 1]],
                        "coeffs": [[1.0, 0.0], [0.0, -1.0], [0.7, 0.0]]}}
    fpath = tmp_path / "field.json"
    fpath.write_text(json.dumps(field))
    out_path = tmp_path / "nf.json"
    code = main(["normalform", "--field", str(fpath), "--order", "3",
                 "--ratio", "1", "1", "--out", str(out_path)])
    assert code == 0
    data = json.loads(out_path.read_text())
    assert data["schema_version"] == 1
    assert any(e["coeffs"] for e in data["resonant"])


def test_quasipotential_command(tmp_path, capsys):
    out_csv = tmp_path / "path.csv"
    code = main(["quasipotential", "--src", "-0.8", "--dst", "-0.3",
                 "--domain", "-1.3", "1.2", "--n-points", "120",
                 "--restarts", "1", "--out", str(out_csv)])
    out = capsys.readouterr().out
    assert code == 0
    assert "V =" in out
    header = out_csv.read_text().splitlines()[0]
    assert header == "t,x0"


def test_hetero_classify_only(capsys):
    code = main(["hetero", "--rates", "1", "2", "1", "2", "--classify-only"])
    out = capsys.readouterr().out
    assert code == 0
    assert "case 1" in out


def test_condition1d_command(tmp_path, capsys):
    scenario = {"b": {"kind": "poly1d", "coeffs": [-1.0]}, "sigma": 1.0,
                "a1": -1.0, "a2": 1.0, "x0": 0.0, "eps": [0.05],
                "paths": 500}
    spath = tmp_path / "scenario.json"
    spath.write_text(json.dumps(scenario))
    code = main(["condition1d", "--config", str(spath), "--seed", "2",
                 "--out", str(tmp_path / "out")])
    out = capsys.readouterr().out
    assert code == 0
    assert "conditioned-time-ks" in out


def test_simulate_command_requires_inputs():
    with pytest.raises(SystemExit):
        main(["simulate"])
