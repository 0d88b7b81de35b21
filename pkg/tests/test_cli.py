import os
import shutil

import pytest

from qkdsim.cli import main
from qkdsim.scenario import ScenarioError, format_stats, load_scenario, parse_report, parse_scenario, run_scenario

HERE = os.path.dirname(__file__)
SCENARIOS = os.path.join(HERE, "..", "scenarios")
FIG2 = os.path.join(SCENARIOS, "fig2.scn")


def sections(text):
    return dict(parse_report(text))


def test_empty_script_succeeds():
    status, report = run_scenario(parse_scenario(""))
    assert status == 0
    s = sections(report)
    assert s["run"]["steps"] == "0" and s["run"]["failed_steps"] == "0"
    assert [h for h, _ in parse_report(report)] == ["run"]


@pytest.mark.parametrize("text,line", [
    ("bogus 1 2", 1),
    ("\n\nqkd-session", 3),
    ("# c\nqkd-session X", 2),
    ("relay 1 2", 1),
    ("wait soon", 1),
    ("policy photons=10 colour=red", 1),
    ("handshake h 1 2 suites=Z", 1),
    ("inject-fault melt X", 1),
])
def test_parse_errors_carry_line_numbers(text, line):
    with pytest.raises(ScenarioError) as e:
        parse_scenario(text)
    assert e.value.lineno == line and f":{line}:" in str(e.value)


def test_fig2_report():
    status, report = run_scenario(load_scenario(FIG2))
    assert status == 0
    s = sections(report)
    relay = s["relay 0"]
    assert relay["kind"] == "multi-hop" and relay["intermediates"] == "2,3" and relay["delivered_match"] == "true"
    assert s["handshake h1"]["status"] == "ok" and s["handshake h1"]["keys_match"] == "true"
    assert s["handshake h1"]["records"] == "2"
    for lid in ("A-B", "C-D", "E-F"):
        assert s[f"link {lid}"]["sessions_ok"] == "1" and s[f"link {lid}"]["stores_identical"] == "true"
        assert float(s[f"link {lid}"]["qber_last"]) < 0.11


def test_reports_are_deterministic_and_seed_sensitive():
    scn = load_scenario(FIG2)
    assert run_scenario(scn, 3)[1] == run_scenario(scn, 3)[1]
    assert run_scenario(scn, 3)[1] != run_scenario(scn, 4)[1]


def test_faults_scenario_reports_detection():
    status, report = run_scenario(load_scenario(os.path.join(SCENARIOS, "faults.scn")))
    assert status == 0
    faults = [b for h, b in parse_report(report) if h.startswith("fault ")]
    assert [f["kind"] for f in faults] == ["tamper", "skew", "tamper-handshake"]
    assert all(f["detected"] == "true" for f in faults)
    assert [f["outcome"] for f in faults] == ["mac-failure", "desynchronized", "auth-failure"]


def test_unexpected_failure_sets_status(tmp_path):
    shutil.copy(os.path.join(SCENARIOS, "fig2.topo"), tmp_path)
    scn = tmp_path / "x.scn"
    scn.write_text("topology fig2.topo\npolicy photons=20000\nchannel A-B eve=1\nqkd-session A-B\n")
    status, report = run_scenario(load_scenario(str(scn)))
    assert status == 1
    step = sections(report)["step 1"]
    assert step["outcome"] == "eavesdrop-suspected" and step["failed"] == "true"
    table = format_stats(report)
    row = [l for l in table.splitlines() if l.startswith("A-B#0")][0]
    assert "eavesdrop-suspected" in row and "exceeds abort threshold" in row


def test_stats_minimal_and_multi_session():
    _, empty = run_scenario(parse_scenario(""))
    assert len(format_stats(empty).strip().splitlines()) == 1
    _, report = run_scenario(load_scenario(FIG2))
    lines = format_stats(report).splitlines()
    assert sum(1 for l in lines if l.split() and l.split()[0] in ("A-B#0", "C-D#0", "E-F#0")) == 3


def test_cli_run_and_stats(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", FIG2, "--seed", "5", "--out", str(out), "--transcripts"]) == 0
    report = (out / "report.txt").read_text()
    assert main(["run", FIG2, "--seed", "5", "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "report.txt").read_text() == report
    assert sorted(os.listdir(out / "transcripts"))[:3] == ["relay-0.bin", "session-A-B-0.bin", "session-C-D-0.bin"]
    capsys.readouterr()
    assert main(["stats", str(out / "report.txt")]) == 0
    assert "multi-hop" in capsys.readouterr().out
    assert main(["stats", str(tmp_path / "missing.txt")]) == 2


def test_cli_parse_error_exit(tmp_path, capsys):
    bad = tmp_path / "bad.scn"
    bad.write_text("wait\n")
    assert main(["run", str(bad), "--out", str(tmp_path)]) == 2
    assert "bad.scn:1:" in capsys.readouterr().err
