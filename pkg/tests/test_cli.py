import csv
import json
import subprocess
import sys

import pytest

from surroshap.cli import main


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["system", "gen", "--thermal", "2", "--renewable", "1", "--load", "2", "--buses", "4",
                 "--seed", "7", "-o", "sys.json"]) == 0
    assert main(["scenario", "gen", "--system", "sys.json", "--periods", "2", "-o", "sc.csv"]) == 0
    return tmp_path


def test_generated_system_validates(workdir, capsys):
    assert main(["system", "validate", "sys.json"]) == 0
    assert "ok" in capsys.readouterr().out
    man = json.loads((workdir / "sys.json.manifest.json").read_text())
    assert man["command"][:3] == ["surroshap", "system", "gen"]


def test_corrupted_system_file(workdir, capsys):
    doc = json.loads((workdir / "sys.json").read_text())
    doc["entities"][0]["p_max"] = -5
    (workdir / "bad.json").write_text(json.dumps(doc))
    assert main(["system", "validate", "bad.json"]) == 2
    assert "entities[0]" in capsys.readouterr().err
    (workdir / "junk.json").write_text("{not json")
    assert main(["system", "validate", "junk.json"]) == 2


def test_exact_allocation_rows(workdir):
    assert main(["allocate", "exact", "--system", "sys.json", "--scenario", "sc.csv", "-o", "x.csv"]) == 0
    rows = list(csv.DictReader(open("x.csv")))
    assert len(rows) == 10
    assert rows[0].keys() == {"t", "entity_id", "kind", "x_tCO2eq", "method", "M", "seed"}


def test_surroshap_runs_are_byte_identical(workdir):
    assert main(["dataset", "gen", "--system", "sys.json", "--samples", "400", "-o", "d.ssds"]) == 0
    assert main(["train", "--dataset", "d.ssds", "--hidden", "16", "--layers", "2", "--epochs", "2",
                 "-o", "m.ssnn"]) == 0
    for out in ("a.csv", "b.csv"):
        assert main(["allocate", "surroshap", "--system", "sys.json", "--scenario", "sc.csv", "--model", "m.ssnn",
                     "--samples", "2000", "--seed", "5", "-o", out]) == 0
    assert (workdir / "a.csv").read_bytes() == (workdir / "b.csv").read_bytes()


def test_odd_sample_count_is_an_argument_error(workdir):
    assert main(["allocate", "kernelshap", "--system", "sys.json", "--scenario", "sc.csv", "--samples", "1001",
                 "-o", "k.csv"]) == 2


def test_capacity_exit_code(workdir):
    assert main(["system", "gen", "--thermal", "10", "--renewable", "5", "--load", "10", "--buses", "6",
                 "-o", "big.json"]) == 0
    assert main(["scenario", "gen", "--system", "big.json", "--periods", "1", "-o", "big.csv"]) == 0
    assert main(["allocate", "exact", "--system", "big.json", "--scenario", "big.csv", "-o", "big_x.csv"]) == 3


def test_missing_input_file(workdir):
    assert main(["allocate", "exact", "--system", "nope.json", "--scenario", "sc.csv", "-o", "x.csv"]) == 2


def test_dataset_split_metadata(workdir):
    assert main(["dataset", "gen", "--system", "sys.json", "--samples", "1000", "-o", "d.ssds"]) == 0
    meta = json.loads((workdir / "d.ssds.json").read_text())
    assert meta["split"] == {"train": 700, "val": 200, "test": 100}


def test_error_budget_fit_window(workdir):
    assert main(["scenario", "gen", "--system", "sys.json", "--periods", "1", "-o", "one.csv"]) == 0
    assert main(["errors", "--system", "sys.json", "--scenario", "one.csv", "--samples", "4000000", "--tail", "0.1",
                 "--fit-csv", "fit.csv", "-o", "budget.json"]) == 0
    fit = list(csv.DictReader(open("fit.csv")))
    assert fit[0]["window"] == "400000"
    budget = json.loads((workdir / "budget.json").read_text())
    assert budget["total"] == pytest.approx(budget["eta"] + budget["epsilon"])


def test_compare_with_itself(workdir, capsys):
    assert main(["allocate", "exact", "--system", "sys.json", "--scenario", "sc.csv", "-o", "x.csv"]) == 0
    capsys.readouterr()
    assert main(["compare", "--reference", "x.csv", "--other", "x.csv"]) == 0
    assert capsys.readouterr().out.strip().splitlines()[-1] == "0.0"


def test_properties_command(workdir):
    assert main(["system", "gen", "--thermal", "2", "--renewable", "1", "--load", "2", "--buses", "4",
                 "--capacity-factor", "50", "-o", "loose.json"]) == 0
    assert main(["scenario", "gen", "--system", "loose.json", "--periods", "2", "-o", "loose.csv"]) == 0
    assert main(["properties", "--system", "loose.json", "--scenario", "loose.csv", "--budget", "2",
                 "--evidence", "ev.csv", "-o", "props.json"]) == 0
    doc = json.loads((workdir / "props.json").read_text())
    assert {d["property"] for d in doc} >= {1, 2, 4, 5}


def test_module_entry_point(workdir):
    out = subprocess.run([sys.executable, "-m", "surroshap", "--version"], capture_output=True, text=True)
    assert out.returncode == 0
    assert out.stdout.startswith("surroshap")
