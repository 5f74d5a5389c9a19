"""
test_audit.py

The JSON run record: entry shape, filters and the summary the CLI logs.
"""
import json
import logging

from audit import AuditLog
from calseg import EXIT_OK, main


def test_save_and_filter(tmp_path):
    log = AuditLog(str(tmp_path / "audit.json"))
    log.save("train", {"success": True, "data": {"epochs": 3}}, run_id="a")
    log.save("eval", {"success": False, "error": "missing checkpoint"}, run_id="b")
    log.save("train", '{"success": true, "data": {"epochs": 5}}', run_id="c")

    assert len(log.get_entries()) == 3
    assert len(log.get_entries(source="train")) == 2
    assert log.get_entries(run_id="b")[0]["error"] == "missing checkpoint"
    assert log.get_entries(source="train", limit=1)[0]["data"] == {"epochs": 5}
    entry = log.get_entries(limit=1)[0]
    assert set(entry) == {"timestamp", "source", "run_id", "success", "data", "error", "notes", "metadata"}


def test_summary_counts(tmp_path):
    log = AuditLog(str(tmp_path / "nested" / "audit.json"))
    log.save("train", {"success": True})
    log.save("train", {"success": False, "error": "boom"})
    summary = log.summary()
    assert summary["total"] == 2 and summary["successful"] == 1
    assert summary["by_source"] == {"train": 2}


def test_unreadable_file_starts_fresh(tmp_path):
    path = tmp_path / "audit.json"
    path.write_text("{not json")
    log = AuditLog(str(path))
    log.save("gen-data", {"success": True})
    assert json.loads(path.read_text())["entries"][0]["source"] == "gen-data"


def test_plain_string_result_is_kept(tmp_path):
    log = AuditLog(str(tmp_path / "audit.json"))
    entry = log.save("render-heatmap", "not json at all")
    assert entry["data"] == {"raw_output": "not json at all"}


def test_cli_logs_audit_summary(tmp_path, caplog):
    caplog.set_level(logging.INFO, logger="calseg")
    code = main(["gen-data", "--out", str(tmp_path), "--set", "synth.size=16x16", "--set", "synth.count=10"])
    assert code == EXIT_OK
    assert "audit 1/1 entries successful {'gen-data': 1}" in caplog.text
