import csv
import io
import json
import subprocess
import sys
from pathlib import Path

import pytest

from nishimori_lab import experiment_cli as cli

CONFIGS = Path(cli.__file__).parent / "configs"


def write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(cfg if isinstance(cfg, str) else json.dumps(cfg, indent=2))
    return str(p)


def minimal(**over):
    cfg = json.loads((CONFIGS / "minimal.json").read_text())
    cfg.update(over)
    return cfg


def run(args, capsys):
    code = cli.main(args)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_minimal_config_exits_zero(tmp_path, capsys):
    code, out, _ = run(["run", "--config", str(CONFIGS / "minimal.json"), "--output", str(tmp_path)], capsys)
    assert code == 0
    rows = list(csv.DictReader(io.StringIO((tmp_path / "results.csv").read_text())))
    assert list(rows[0]) == list(cli.CSV_COLUMNS)
    assert rows and all(r["pass"] == "true" for r in rows)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["config_hash"] == rows[0]["config_hash"]
    assert json.loads((tmp_path / "results.json").read_text())


def test_unknown_test_name_exits_two_with_line(tmp_path, capsys):
    cfg = minimal(tests=[{"name": "nishimori"}, {"name": "bogus"}])
    code, _, err = run(["run", "--config", write(tmp_path, cfg)], capsys)
    assert code == 2
    text = (tmp_path / "cfg.json").read_text().splitlines()
    line = next(i for i, t in enumerate(text, 1) if "bogus" in t)
    assert f"line {line}:" in err and "bogus" in err


def test_json_syntax_error_has_line(tmp_path, capsys):
    path = write(tmp_path, '{\n  "seed": 0,\n  "tests": [\n    {"name": "nishimori",}\n  ]\n}\n')
    code, _, err = run(["validate", "--config", path], capsys)
    assert code == 2 and "line 4:" in err


def test_missing_seed_and_unsorted_N(tmp_path, capsys):
    cfg = minimal()
    del cfg["seed"]
    assert run(["validate", "--config", write(tmp_path, cfg)], capsys)[0] == 2
    cfg = minimal(sweep={"N": [8, 4]}, perturbation={"K_max": 1})
    code, _, err = run(["validate", "--config", write(tmp_path, cfg)], capsys)
    assert code == 2 and "sorted" in err


def test_unknown_parameter_and_bad_observable(tmp_path, capsys):
    cfg = minimal(tests=[{"name": "nishimori", "flavour": 1}])
    assert run(["validate", "--config", write(tmp_path, cfg)], capsys)[0] == 2
    cfg = minimal(tests=[{"name": "variance_decomposition", "observable": "R:1,1"}])
    assert run(["validate", "--config", write(tmp_path, cfg)], capsys)[0] == 2
    cfg = minimal(tests=[{"name": "nishimori", "f": "R99"}])
    assert run(["validate", "--config", write(tmp_path, cfg)], capsys)[0] == 2


def test_infeasible_quadrature_is_a_config_error(tmp_path, capsys):
    cfg = minimal(
        model={"N": 6, "prior": {"kind": "rademacher"}, "channel": {"kind": "spiked_tensor", "p": 2}},
        tests=[{"name": "nishimori"}],
    )
    code, _, err = run(["validate", "--config", write(tmp_path, cfg)], capsys)
    assert code == 2 and "monte_carlo" in err


def test_sweep_L_must_cover_overlap(tmp_path, capsys):
    cfg = minimal(perturbation={"K_max": 1}, sweep={"N": [4], "L": 2, "observables": ["R:1,2,3"]})
    assert run(["validate", "--config", write(tmp_path, cfg)], capsys)[0] == 2


def test_validate_prints_hash_and_seed_override_changes_it(tmp_path, capsys):
    path = str(CONFIGS / "minimal.json")
    code, out, _ = run(["validate", "--config", path], capsys)
    assert code == 0 and out.startswith("ok ")
    h0 = out.split()[1]
    h1 = run(["validate", "--config", path, "--seed", "7"], capsys)[1].split()[1]
    assert len(h0) == 16 and h0 != h1


def test_csv_byte_identical_across_runs(tmp_path, capsys):
    cfg = minimal(
        model={"N": 2, "prior": {"kind": "rademacher"}, "channel": {"kind": "glm_gaussian", "M": 1}},
        perturbation={"K_max": 1, "lambda_channels": [0.0]},
        engine={"mode": "monte_carlo", "R": 20},
        tests=[{"name": "nishimori"}, {"name": "variance_decomposition", "observable": "R:1,2"}],
    )
    path = write(tmp_path, cfg)
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["run", "--config", path, "--output", str(a)], capsys)[0] == 0
    assert run(["run", "--config", path, "--output", str(b), "--jobs", "2"], capsys)[0] == 0
    assert (a / "results.csv").read_bytes() == (b / "results.csv").read_bytes()


def test_float_formatting_round_trips():
    for x in (0.1, 1 / 3, 1e-17, 2.5e300):
        assert float(cli.fmt(x)) == x
    assert cli.fmt(True) == "true" and cli.fmt(None) == ""


def test_numerical_failure_exits_one(tmp_path, capsys, monkeypatch):
    monkeypatch.setattr(cli.ids.ResidualReport, "passed", property(lambda self: False))
    code, _, _ = run(["run", "--config", str(CONFIGS / "minimal.json"), "--output", str(tmp_path)], capsys)
    assert code == 1


def sweep_cfg(prior, N, observables=("R:1,2",)):
    return {
        "seed": 1,
        "model": {"prior": prior, "channel": {"kind": "spiked_tensor", "p": 2}},
        "perturbation": {"K_max": 1},
        "sweep": {"N": N, "R": 4, "lambda_draws": 2, "L": 3, "sweeps": 20, "burn_in": 5, "thin": 1,
                  "observables": list(observables)},
    }


def test_sweep_single_N_has_no_verdict(tmp_path, capsys):
    path = write(tmp_path, sweep_cfg({"kind": "rademacher"}, [4]))
    code, _, _ = run(["sweep", "--config", path, "--output", str(tmp_path / "o")], capsys)
    assert code == 0
    rows = list(csv.DictReader(io.StringIO((tmp_path / "o" / "sweep.csv").read_text())))
    assert [r["test"] for r in rows] == ["concentration_sweep", "decoupling_sweep"]
    assert json.loads((tmp_path / "o" / "sweep.json").read_text())["verdicts"] == {"R:1,2": None, "decoupling": None}


def test_sweep_deterministic_prior_has_zero_variance(tmp_path, capsys):
    prior = {"kind": "grid_soft", "grid_points": [1.0], "grid_weights": [1.0]}
    path = write(tmp_path, sweep_cfg(prior, [3, 4], ("R:1,2", "R:1,2,3")))
    code, _, _ = run(["sweep", "--config", path, "--output", str(tmp_path / "o")], capsys)
    assert code == 0
    rows = list(csv.DictReader(io.StringIO((tmp_path / "o" / "sweep.csv").read_text())))
    conc = [r for r in rows if r["test"] == "concentration_sweep"]
    assert len(conc) == 4 and all(float(r["total_var"]) == pytest.approx(0.0, abs=1e-15) for r in conc)
    assert all(r["pass"] == "true" for r in rows if r["test"] == "trend")


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "nishimori_lab", "validate", "--config", str(CONFIGS / "minimal.json")],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0 and proc.stdout.startswith("ok ")
