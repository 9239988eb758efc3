import json

import pytest

from seeupo_lab.report import ExperimentReport, csv_text, fmt, json_text, write_atomic


def test_fmt():
    assert fmt(None) == ""
    assert fmt(float("nan")) == ""
    assert fmt(True) == "1"
    assert fmt(3) == "3"
    assert fmt(0.1) == "0.10000000000000001"
    assert float(fmt(1 / 3)) == 1 / 3


def test_csv_starts_with_schema_line():
    text = csv_text("x/1", ["a", "b"], [{"a": 1, "b": 0.5}, {"a": 2}])
    assert text.splitlines() == ["# schema: x/1", "a,b", "1,0.5", "2,"]


def test_report_rows_and_summary():
    rep = ExperimentReport({"algorithm": "t"}, j_star=2.0)
    rep.add_row({"iteration": 0, "J_exact": 1.0})
    rep.add_row({"iteration": 1, "J_exact": 0.5})
    rep.add_row({"iteration": 2, "J_exact": 1.5})
    with pytest.raises(ValueError):
        rep.add_row({"iteration": 2, "J_exact": 1.5})
    s = rep.summary()
    assert s["final_gap"] == 0.5 and s["max_decrease"] == 0.5 and s["iterations"] == 2
    assert rep.rows[1]["gap_to_J_star"] == 1.5
    doc = json.loads(rep.to_json())
    assert doc["summary"]["final_J"] == 1.5 and doc["config"] == {"algorithm": "t"}


def test_json_text_replaces_nonfinite():
    assert json.loads(json_text({"a": float("inf"), "b": [float("nan")]})) == {"a": None, "b": [None]}


def test_write_atomic(tmp_path):
    p = tmp_path / "sub" / "f.txt"
    write_atomic(str(p), "x\n")
    write_atomic(str(p), "y\n")
    assert p.read_text() == "y\n"
    assert [f.name for f in p.parent.iterdir()] == ["f.txt"]
