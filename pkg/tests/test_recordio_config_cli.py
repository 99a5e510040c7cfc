import json

import numpy as np
import pytest

from rctperm.cli import main
from rctperm.config import config_schema, parse_config, parse_config_dict
from rctperm.errors import ConfigError, DataError
from rctperm.model import EstimateReport
from rctperm.recordio import (dumps, load_report, load_trial_record, record_from_dict, record_to_dict,
                              save_report, save_trial_record)

from conftest import random_trial


# -- records ----------------------------------------------------------------------

@pytest.mark.parametrize("suffix", [".json", ".json.gz"])
def test_record_round_trip(tmp_path, suffix):
    rec = random_trial(3, 3, 4, kinds=("Whittle", "RoundRobin"))
    path = tmp_path / f"rec{suffix}"
    save_trial_record(rec, path)
    assert load_trial_record(path) == rec


def test_gzip_output_is_reproducible(tmp_path):
    rec = random_trial(3, 3, 4)
    save_trial_record(rec, tmp_path / "a.json.gz")
    save_trial_record(rec, tmp_path / "b.json.gz")
    assert (tmp_path / "a.json.gz").read_bytes() == (tmp_path / "b.json.gz").read_bytes()


def test_floats_survive_exactly():
    rec = random_trial(1, 2, 3, kinds=("Whittle", "Greedy"))
    back = record_from_dict(json.loads(dumps(record_to_dict(rec))))
    for pid, mat in rec.indices.items():
        assert np.array_equal(back.indices[pid], mat)


def test_budget_violation_names_arm_and_step():
    doc = record_to_dict(random_trial(2, 3, 3, budgets=(1, 1)))
    arm0 = doc["assignment"]["arm_of"].index(0)
    doc["actions"][arm0][1] = 1 - doc["actions"][arm0][1]
    with pytest.raises(DataError, match=r"arm 0 at t=2"):
        record_from_dict(doc)


def test_non_binary_state_names_location():
    doc = record_to_dict(random_trial(2, 2, 2))
    doc["states"][1][2] = 2
    with pytest.raises(DataError, match=r"states\[1\]\[2\]"):
        record_from_dict(doc)


def test_unknown_top_level_key():
    doc = record_to_dict(random_trial(2, 2, 2))
    doc["extra"] = 1
    with pytest.raises(DataError):
        record_from_dict(doc)


def test_record_without_indices_loads(tmp_path):
    doc = record_to_dict(random_trial(2, 2, 2))
    del doc["indices"]
    rec = record_from_dict(doc)
    assert rec.indices == {}


def test_report_round_trip_with_infinite_diagnostic(tmp_path):
    rep = EstimateReport("permuted", [1.0, 2.5], None, {"thresholds": [[float("inf")]]})
    save_report(rep, tmp_path / "r.json")
    back = load_report(tmp_path / "r.json")
    assert back.eval_per_arm == (1.0, 2.5)
    assert back.delta == 1.5
    assert back.diagnostics["thresholds"] == [[None]]


# -- config -----------------------------------------------------------------------

MINIMAL = {"seed": 3, "cohort": {"n1": 2, "n2": 2}, "trial": {"policies": [{"kind": "Greedy"}, {"kind": "Whittle"}]}}


def test_minimal_config_fills_defaults():
    cfg = parse_config_dict(MINIMAL)
    eff = cfg.effective()
    assert eff["trial"]["n_per_arm"] == 3
    assert eff["trial"]["budgets"] == [1, 1]
    assert [p["id"] for p in eff["trial"]["policies"]] == ["greedy", "whittle"]
    assert eff["trial"]["seed"] == 3 and eff["experiment"]["master_seed"] == 3
    assert parse_config_dict(eff).effective() == eff


def test_control_default_budget_is_zero():
    doc = dict(MINIMAL, trial={"policies": [{"kind": "Control"}, {"kind": "Greedy"}]})
    assert parse_config_dict(doc).trial.budgets == [0, 1]


def test_duplicate_kinds_get_distinct_ids():
    doc = dict(MINIMAL, trial={"policies": [{"kind": "Whittle", "beta": 0.9}, {"kind": "Whittle"}]})
    assert [p.id for p in parse_config_dict(doc).trial.policies] == ["whittle", "whittle_1"]


def test_budget_above_arm_size():
    doc = dict(MINIMAL, trial={"policies": [{"kind": "Greedy"}, {"kind": "Greedy"}], "budgets": [1, 4]})
    with pytest.raises(ConfigError, match=r"trial.budgets\[1\]=4"):
        parse_config_dict(doc)


def test_misspelled_key_gets_suggestion():
    doc = dict(MINIMAL, trial={"policies": [{"kind": "Greedy"}, {"kind": "Greedy"}], "budgett": [1, 1]})
    with pytest.raises(ConfigError, match=r"trial.budgett: unknown key \(did you mean 'budgets'\?\)"):
        parse_config_dict(doc)


def test_uneven_split_rejected():
    with pytest.raises(ConfigError, match="split evenly"):
        parse_config_dict(dict(MINIMAL, cohort={"n1": 1, "n2": 2, "eta": 0}))


def test_type_target_needs_target():
    doc = dict(MINIMAL, trial={"policies": [{"kind": "TypeTarget"}, {"kind": "Greedy"}]})
    with pytest.raises(ConfigError, match="target_type"):
        parse_config_dict(doc)


def test_malformed_json_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{\"seed\": 1,")
    with pytest.raises(ConfigError, match="malformed JSON"):
        parse_config(path)


def test_config_schema_lists_sections():
    assert {"seed", "cohort", "trial", "estimators", "experiment"} <= set(config_schema()["properties"])


# -- CLI --------------------------------------------------------------------------

def _write_config(tmp_path, **overrides):
    doc = {"seed": 11, "cohort": {"n1": 2, "n2": 2}, "trial": {"policies": [{"kind": "Greedy"}, {"kind": "Whittle"}],
                                                               "horizon": 4}}
    doc.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path


def test_simulate_is_byte_identical(tmp_path):
    cfg = _write_config(tmp_path)
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "a.json")]) == 0
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "b.json")]) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


@pytest.mark.parametrize("estimator", ["raw", "permuted", "permuted_general"])
def test_estimate_writes_valid_report(tmp_path, estimator):
    cfg = _write_config(tmp_path)
    main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "rec.json")])
    out = tmp_path / "rep.json"
    assert main(["estimate", "--record", str(tmp_path / "rec.json"), "--estimator", estimator, "--out", str(out)]) == 0
    rep = load_report(out)
    assert len(rep.eval_per_arm) == 2


def test_ipw_on_long_horizon_exits_2(tmp_path, capsys):
    cfg = _write_config(tmp_path, trial={"policies": [{"kind": "Greedy"}, {"kind": "Whittle"}], "horizon": 10})
    main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "rec.json")])
    assert main(["estimate", "--record", str(tmp_path / "rec.json"), "--estimator", "ipw"]) == 2
    assert "IPW requires T=1" in capsys.readouterr().err


def test_ipw_single_step(tmp_path, capsys):
    cfg = _write_config(tmp_path, trial={"policies": [{"kind": "Greedy"}, {"kind": "Greedy"}], "horizon": 1})
    main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "rec.json")])
    assert main(["estimate", "--record", str(tmp_path / "rec.json"), "--estimator", "ipw", "--n-resamples", "50"]) == 0
    assert json.loads(capsys.readouterr().out)["kind"] == "ipw"


def test_bad_config_exits_2(tmp_path, capsys):
    cfg = _write_config(tmp_path, trial={"policies": [{"kind": "Greedy"}, {"kind": "Greedy"}], "budgets": [1, 9]})
    assert main(["simulate", "--config", str(cfg)]) == 2
    assert "budgets[1]=9" in capsys.readouterr().err


def test_missing_file_exits_2(tmp_path):
    assert main(["estimate", "--record", str(tmp_path / "none.json")]) == 2


def test_usage_error_exits_1(capsys):
    assert main(["estimate", "--estimator", "nope"]) == 1
    assert main([]) == 1


def test_print_effective_config(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    assert main(["simulate", "--config", str(cfg), "--print-effective-config"]) == 0
    eff = json.loads(capsys.readouterr().out)
    assert eff["trial"]["budgets"] == [1, 1]


def test_mc_experiment_writes_outputs(tmp_path):
    cfg = _write_config(tmp_path)
    csv_path, summary = tmp_path / "t.csv", tmp_path / "s.json"
    assert main(["mc-experiment", "--config", str(cfg), "--n-trials", "3", "--out-csv", str(csv_path),
                 "--out-summary", str(summary)]) == 0
    assert len(csv_path.read_text().splitlines()) == 1 + 3 * 2
    assert json.loads(summary.read_text())["n_trials"] == 3


def test_oracle_command_passes(tmp_path, capsys):
    assert main(["oracle", "--json", str(tmp_path / "o.json")]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 7 and "FAIL" not in out


def test_schema_command(tmp_path):
    assert main(["schema", "--out-dir", str(tmp_path)]) == 0
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["estimate_report.schema.json", "run_config.schema.json", "trial_record.schema.json"]
