import json
import os

import jsonschema
import pytest
from click.testing import CliRunner

from boxlab import harness as hs
from boxlab.cli import main
from boxlab.errors import ConfigInvalid, EmptyLedger

KAPPA = {"name": "kappa-sqrt2", "experiment": "dioph", "task": "kappa", "seed": 0,
         "params": {"x": {"pow": [2, 1, 2]}, "Qmax": 100000, "band": [0.9, 1.1]}}


def cfg(tmp_path, **over):
    return hs.ExperimentConfig.load(KAPPA).override(output_dir=str(tmp_path), **over)


@pytest.mark.parametrize("raw,field", [
    ({"seed": 0}, "experiment"),
    ({"experiment": "nope", "seed": 0}, "experiment"),
    ({"experiment": "dioph", "seed": -1}, "seed"),
    ({"experiment": "dioph", "seed": 2 ** 64}, "seed"),
    ({"experiment": "dioph", "seed": 0, "tolerances": {"rel": 0}}, "tolerances"),
    ({"experiment": "dioph", "seed": 0, "shape": {"lengths": [1, -2, 3]}}, "shape"),
    ({"experiment": "dioph", "seed": 0, "colour": "red"}, "colour"),
    ({"experiment": "dioph", "seed": 0, "criterion": 4}, "criterion"),
])
def test_invalid_configs_name_the_field(raw, field):
    with pytest.raises(ConfigInvalid) as exc:
        hs.ExperimentConfig(raw)
    assert exc.value.field.startswith(field)
    assert field in str(exc.value)


def test_unknown_criterion_parameter_is_rejected(tmp_path):
    c = hs.ExperimentConfig.load("criterion-11-diophantine").override(output_dir=str(tmp_path),
                                                                       params={"bogus": 1})
    with pytest.raises(ConfigInvalid) as exc:
        hs.run(c)
    assert exc.value.field == "params.bogus"


def test_shipped_configs_validate():
    named = hs.named_configs()
    assert {raw.get("criterion") for raw in named.values()} >= set(range(1, 12))
    for raw in named.values():
        hs.validate_config(raw)


def test_hash_is_canonical():
    a = dict(KAPPA)
    b = json.loads(json.dumps(KAPPA, sort_keys=True))
    assert hs.config_hash(a) == hs.config_hash(b)
    assert hs.config_hash(a) != hs.config_hash({**KAPPA, "seed": 1})


def test_symbolic_lengths():
    c = hs.ExperimentConfig.load("spectrum-diophantine")
    assert c.shape().lengths[1] == pytest.approx(2 ** (1 / 3), rel=1e-15)


def test_run_is_deterministic_and_ledgered(tmp_path):
    c = cfg(tmp_path)
    e1 = hs.run(c)
    first = {f: open(f, "rb").read() for f in e1["files"]}
    e2 = hs.run(c)
    assert e1["files"] == e2["files"]
    assert all(open(f, "rb").read() == first[f] for f in e2["files"])
    ledger = hs.RunLedger(os.path.join(tmp_path, hs.LEDGER_NAME))
    assert len(ledger) == 2 and ledger.verify() == []
    assert e1["passed"] and e1["assertions"][0]["name"] == "kappa-band"
    saved = json.load(open(os.path.join(c.run_dir(), "config.json")))
    assert hs.config_hash(saved) == c.hash


def test_ledger_detects_tampering(tmp_path):
    hs.run(cfg(tmp_path))
    path = os.path.join(tmp_path, hs.LEDGER_NAME)
    entry = json.loads(open(path).read())
    entry["config"]["seed"] = 5
    with open(path, "a") as fh:
        fh.write(json.dumps(entry) + "\n")
    assert hs.RunLedger(path).verify() == [1]


def test_parallel_runs_share_one_ledger(tmp_path):
    cfgs = [cfg(tmp_path, seed=s) for s in range(3)]
    ledger = hs.RunLedger(os.path.join(tmp_path, "many.jsonl"))
    hs.run_many(cfgs, ledger, workers=2)
    assert sorted(e["config"]["seed"] for e in ledger.entries()) == [0, 1, 2]


def test_reports(tmp_path):
    hs.run(cfg(tmp_path))
    hs.run(hs.ExperimentConfig.load("criterion-11-diophantine").override(output_dir=str(tmp_path)))
    ledger = hs.RunLedger(os.path.join(tmp_path, hs.LEDGER_NAME))
    doc = json.loads(open(hs.report(ledger, "json", tmp_path / "r.json")).read())
    hs.validate_report(doc)
    assert doc["schema"] == "harness/1" and len(doc["runs"]) == 2
    md = open(hs.report(ledger, "markdown", tmp_path / "r.md")).read()
    assert "| 11 |" in md
    csv_text = open(hs.report(ledger, "csv", tmp_path / "r.csv")).read()
    assert csv_text.splitlines()[0] == "run,criterion,assertion,passed,value,detail"
    with pytest.raises(jsonschema.ValidationError):
        hs.validate_report({"schema": "harness/1"})


def test_empty_ledger(tmp_path):
    with pytest.raises(EmptyLedger):
        hs.report(hs.RunLedger(tmp_path / "none.jsonl"), "json", tmp_path / "r.json")


def test_cli_dry_run_and_exit_codes(tmp_path):
    runner = CliRunner()
    res = runner.invoke(main, ["dioph", "--config", "kappa-cube-root", "--dry-run"])
    assert res.exit_code == 0 and json.loads(res.output)["config"]["task"] == "kappa"
    res = runner.invoke(main, ["dioph", "--config", "kappa-cube-root", "--output-dir", str(tmp_path),
                               "--param", "band=[0.9,1.1]"])
    assert res.exit_code == 0 and "PASS kappa-band" in res.output
    res = runner.invoke(main, ["dioph", "--config", "kappa-cube-root", "--output-dir", str(tmp_path),
                               "--param", "band=[5,6]"])
    assert res.exit_code == 1 and "FAIL kappa-band" in res.output
    res = runner.invoke(main, ["count", "--config", "kappa-cube-root"])
    assert res.exit_code == 2 and "experiment" in res.output
    res = runner.invoke(main, ["dioph", "--seed", "-3", "--dry-run"])
    assert res.exit_code == 2 and "seed" in res.output


def test_cli_output_env_and_report(tmp_path, monkeypatch):
    monkeypatch.setenv(hs.OUTPUT_ENV, str(tmp_path))
    runner = CliRunner()
    assert runner.invoke(main, ["dioph", "--config", "kappa-cube-root"]).exit_code == 0
    assert os.path.exists(tmp_path / hs.LEDGER_NAME)
    res = runner.invoke(main, ["report", "--format", "json", "--out", str(tmp_path / "r.json")])
    assert res.exit_code == 0 and json.load(open(tmp_path / "r.json"))["runs"]
    assert "criterion-11-diophantine" in runner.invoke(main, ["configs"]).output
