import csv
import json

import pytest

from bubbletower.errors import ValidationError
from bubbletower.cli_io import (EXIT_HYPOTHESIS, EXIT_OK, EXIT_VALIDATION, RunConfig, main, parse_config)


def manifest(d):
    return json.loads((d / "manifest.json").read_text())


def test_constants_minimal_flags(tmp_path, capsys):
    assert main(["constants", "--n", "4", "--s", "0.5", "--out", str(tmp_path)]) == EXIT_OK
    m = manifest(tmp_path)
    assert m["status"] == "ok" and m["acceptance"] == {"3": True}
    assert set(m["outputs"]) == {"constants.csv", "constants.json"}
    rows = {r["name"]: float(r["value"]) for r in csv.DictReader((tmp_path / "constants.csv").open())}
    assert rows["c"] == pytest.approx(16.0, rel=1e-8)
    assert json.loads(capsys.readouterr().out)["outputs"] == m["outputs"]


def test_tower_constants_table(tmp_path):
    assert main(["constants", "--n", "4", "--s", "0.5", "--k", "3", "--out", str(tmp_path)]) == EXIT_OK
    rows = list(csv.DictReader((tmp_path / "constants.csv").open()))
    alphas = [float(r["value"]) for r in rows if r["name"] == "alpha"]
    assert alphas == pytest.approx([0.0, 2.0, 8.0])


@pytest.mark.parametrize("argv", [
    ["constants", "--n", "4", "--s", "1.5"],
    ["constants", "--n", "4", "--s", "0.5", "--opt", "bogus=1"],
    ["constants", "--s", "0.5"],
    ["constants", "--n", "4", "--s", "0.5", "--workers", "0"],
    ["nonsense", "--n", "4", "--s", "0.5"],
    ["evolve", "--n", "4", "--s", "0.5", "--opt", "n_snapshots=2.5"],
])
def test_bad_input_exits_validation(argv, tmp_path, capsys):
    assert main(argv + ["--out", str(tmp_path)]) == EXIT_VALIDATION


def test_unknown_file_key(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"params": {"n": 4, "s": 0.5, "colour": 1}}))
    assert main(["constants", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_VALIDATION
    cfg.write_text(json.dumps({"params": {"n": 4, "s": 0.5}, "extra": 1}))
    assert main(["constants", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_VALIDATION


def test_flag_overrides_file_and_is_recorded(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"subcommand": "constants", "params": {"n": 3, "s": 0.4}}))
    out = tmp_path / "o"
    assert main(["constants", "--config", str(cfg), "--s", "0.5", "--n", "4", "--out", str(out)]) == EXIT_OK
    m = manifest(out)
    assert m["config"]["params"]["s"] == 0.5
    keys = {o["key"]: (o["file"], o["flag"]) for o in m["overrides"]}
    assert keys["params.s"] == (0.4, 0.5) and keys["params.n"] == (3, 4)


def test_breached_hypothesis_exits_3(tmp_path):
    cp = json.dumps({"a": "n-2s", "b": -2.0, "c1": 0.0, "d1": 0.0, "c2": 1.0, "d2": 0.5})
    code = main(["kernel-check", "--n", "4", "--s", "0.5", "--opt", "case=B1", "--opt", f"case_params={cp}",
                 "--out", str(tmp_path)])
    assert code == EXIT_HYPOTHESIS
    m = manifest(tmp_path)
    assert m["status"] == "failed" and m["error"]["type"] == "HypothesisViolated"


def test_config_round_trip(tmp_path):
    rc = parse_config(["ansatz", "--n", "7", "--s", "0.9", "--k", "2", "--n-radial", "300",
                       "--opt", "t=2e4", "--seed", "5"])
    f = tmp_path / "rc.json"
    f.write_text(json.dumps(rc.to_dict()))
    back = parse_config(["ansatz", "--config", str(f)])
    assert isinstance(back, RunConfig)
    assert back.to_dict() == rc.to_dict()
    assert back.options["t"] == 2e4 and back.cfg.n_radial == 300 and back.seed == 5


def test_output_directory_precedence(tmp_path, monkeypatch):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"params": {"n": 4, "s": 0.5}, "out_dir": "from_file"}))
    assert parse_config(["constants", "--config", str(f)]).out_dir == "from_file"
    monkeypatch.setenv("BUBBLETOWER_OUT", str(tmp_path / "env"))
    assert parse_config(["constants", "--config", str(f)]).out_dir == str(tmp_path / "env")
    assert parse_config(["constants", "--config", str(f), "--out", "flag"]).out_dir == "flag"
    assert main(["constants", "--n", "4", "--s", "0.5"]) == EXIT_OK
    assert (tmp_path / "env" / "manifest.json").exists()


def test_subcommand_mismatch(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"subcommand": "profile", "params": {"n": 4, "s": 0.5}}))
    with pytest.raises(ValidationError):
        parse_config(["constants", "--config", str(f)])
    assert main(["constants", "--config", str(f), "--out", str(tmp_path / "o")]) == EXIT_VALIDATION
