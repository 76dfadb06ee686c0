"""Exit codes, stream separation, and subcommand behavior of the CLI."""

import dataclasses
import json

import pytest

from gridflow.cli import run_cli
from gridflow.dsl import emit_dsl
from gridflow.resources import Calculator, render_descriptor_xml
from gridflow.simgrid import (
    build_case_study,
    parse_lattice_native,
    standard_registry,
)
from test_model import join_deadlock_graph

CASE_KW = dict(cells=6, walkers=3, steps=12)

EXOTIC_FLOW = """\
workflow "exotic-flow" {
  start -> a;
  activity a {
    capabilities: [exotic];
    params: [x = "1.0"];
  }
  a -> end;
}
"""

DANGLING_JOIN = """\
workflow "dangling" {
  start -> a;
  activity a { capabilities: [sim]; }
  join j waits (a) -> b;
  activity b { capabilities: [sim]; }
  b -> end;
}
"""


@pytest.fixture
def run(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("GRIDFLOW_STORE", str(tmp_path / "store"))
    monkeypatch.chdir(tmp_path)

    def call(*argv):
        code = run_cli([str(a) for a in argv])
        captured = capsys.readouterr()
        return code, captured.out, captured.err

    return call


@pytest.fixture
def case_file(tmp_path):
    path = tmp_path / "case.flow"
    path.write_text(emit_dsl(build_case_study(**CASE_KW)), encoding="utf-8")
    return path


@pytest.fixture
def deadlock_file(tmp_path):
    path = tmp_path / "deadlock.flow"
    path.write_text(emit_dsl(join_deadlock_graph()), encoding="utf-8")
    return path


class TestVerify:
    def test_sound_file(self, run, case_file):
        code, out, err = run("verify", case_file)
        assert (code, out, err) == (0, "sound\n", "")

    def test_unsound_file_lists_findings(self, run, deadlock_file):
        code, out, _ = run("verify", deadlock_file)
        assert code == 1
        assert "JoinDeadlock(j)" in out

    def test_json_shapes(self, run, case_file, deadlock_file):
        code, out, _ = run("verify", case_file, "--json")
        assert code == 0
        assert json.loads(out) == {
            "workflow": "helium-diffusion-study",
            "mode": "exhaustive",
            "sound": True,
            "findings": [],
        }
        code, out, _ = run("verify", deadlock_file, "--json")
        assert code == 1
        payload = json.loads(out)
        assert payload["sound"] is False
        assert "JoinDeadlock" in {f["kind"] for f in payload["findings"]}

    def test_construction_violations_reported(self, run, tmp_path):
        path = tmp_path / "dangling.flow"
        path.write_text(DANGLING_JOIN, encoding="utf-8")
        code, out, _ = run("verify", path)
        assert code == 1
        assert "BadDegree" in out
        code, out, _ = run("verify", path, "--json")
        payload = json.loads(out)
        assert payload["sound"] is False
        assert "BadDegree" in {f["kind"] for f in payload["findings"]}

    def test_syntax_error_goes_to_stderr(self, run, tmp_path):
        path = tmp_path / "broken.flow"
        path.write_text('workflow "x" {', encoding="utf-8")
        code, out, err = run("verify", path)
        assert code == 1
        assert out == ""
        assert err.startswith("error:")

    def test_missing_file(self, run):
        code, _, err = run("verify", "no-such.flow")
        assert code == 1
        assert "not found" in err


class TestExport:
    def test_dot(self, run, case_file):
        code, out, _ = run("export", case_file, "--to", "dot")
        assert code == 0
        assert out.startswith("digraph")

    def test_plan(self, run, case_file):
        code, out, _ = run("export", case_file, "--to", "plan")
        assert code == 0
        assert out.splitlines()[0] == "seq"
        assert "run lattice" in out

    def test_xml_is_byte_deterministic(self, run, case_file):
        first = run("export", case_file, "--to", "xml")
        second = run("export", case_file, "--to", "xml")
        assert first == second
        assert first[0] == 0
        assert "<" in first[1]

    def test_crossing_regions_refuse_a_plan(self, run, tmp_path):
        from test_model import crossing_graph

        path = tmp_path / "crossing.flow"
        path.write_text(emit_dsl(crossing_graph()), encoding="utf-8")
        code, _, err = run("export", path, "--to", "plan")
        assert code == 1
        assert "error:" in err


class TestSubmit:
    def test_prints_run_id(self, run, case_file):
        code, out, err = run("submit", case_file, "--user", "ada", "--seed", 3)
        assert (code, err) == (0, "")
        run_id = out.strip()
        code, out, _ = run("report", run_id)
        assert code == 0
        assert "status:    completed" in out

    def test_commercial_user_blocked(self, run, case_file):
        code, out, err = run("submit", case_file, "--user", "bob:commercial")
        assert code == 1
        assert out == ""
        assert "licensed" in err

    def test_requires_a_user(self, run, case_file):
        code, _, err = run("submit", case_file)
        assert code == 1
        assert "--user" in err

    def test_bad_param_syntax(self, run, case_file):
        code, _, err = run("submit", case_file, "--user", "ada", "--param", "oops")
        assert code == 1
        assert "key=value" in err

    def test_bad_fault_syntax(self, run, case_file):
        for bad in ("md", "md:x", "md:0"):
            code, _, err = run(
                "submit", case_file, "--user", "ada", "--fail-at", bad
            )
            assert code == 1
            assert "fault" in err

    def test_bad_affiliation(self, run, case_file):
        code, _, err = run("submit", case_file, "--user", "ada:sovereign")
        assert code == 1
        assert "affiliation" in err

    def test_fault_then_resume(self, run, case_file):
        code, out, err = run(
            "submit", case_file, "--user", "ada", "--seed", 3, "--fail-at", "md:1"
        )
        assert code == 2
        run_id = out.strip()
        assert run_id.startswith("run-")
        assert "md" in err
        code, out, _ = run("resume", run_id)
        assert code == 0
        assert out.strip() == run_id
        code, out, _ = run("report", run_id, "--json")
        report = json.loads(out)
        assert report["status"] == "completed"
        assert dict(report["counters"]) == {
            "lattice": 1, "cbmc": 1, "gcmc": 1, "md": 1, "analysis": 1,
        }

    def test_resume_completed_run_is_a_user_error(self, run, case_file):
        _, out, _ = run("submit", case_file, "--user", "ada")
        code, _, err = run("resume", out.strip())
        assert code == 1
        assert "already completed" in err

    def test_param_override_lands_in_report(self, run, case_file):
        _, out, _ = run(
            "submit", case_file, "--user", "ada", "--param", "cells=5"
        )
        code, out, _ = run("report", out.strip(), "--json")
        report = json.loads(out)
        assert ["lattice.cells", "5"] in report["provenance"]["parameters"]


class TestDeterminism:
    def test_equal_seed_reports_identical(self, run, case_file):
        ids = []
        for _ in range(2):
            _, out, _ = run("submit", case_file, "--user", "ada", "--seed", 11)
            ids.append(out.strip())
        assert ids[0] != ids[1]
        reports = []
        for run_id in ids:
            code, out, _ = run("report", run_id, "--deterministic", "--json")
            assert code == 0
            reports.append(out)
        assert reports[0] == reports[1]
        assert "<run>" in reports[0]
        assert ids[0] not in reports[0]

    def test_seed_defaults_to_zero(self, run, case_file):
        _, first, _ = run("submit", case_file, "--user", "ada")
        _, second, _ = run("submit", case_file, "--user", "ada", "--seed", 0)
        hashes = []
        for out in (first, second):
            _, listing, _ = run("store", "ls", out.strip())
            hashes.append([line.split()[4] for line in listing.splitlines()])
        assert hashes[0] == hashes[1]


class TestStoreLs:
    def test_checkpoint_lines(self, run, case_file):
        _, out, _ = run("submit", case_file, "--user", "ada")
        run_id = out.strip()
        code, out, _ = run("store", "ls", run_id)
        assert code == 0
        lines = out.splitlines()
        assert [line.split()[2] for line in lines] == [
            "lattice", "cbmc", "gcmc", "md", "analysis",
        ]
        assert all(line.split()[0] == "ckpt" for line in lines)
        assert all(line.split()[1] == run_id for line in lines)

    def test_json_listing(self, run, case_file):
        _, out, _ = run("submit", case_file, "--user", "ada")
        code, out, _ = run("store", "ls", out.strip(), "--json")
        assert code == 0
        rows = json.loads(out)
        assert len(rows) == 5
        assert {"run", "activity", "sequence", "hash"} == set(rows[0])

    def test_unknown_run(self, run):
        code, _, err = run("store", "ls", "run-9999")
        assert code == 1
        assert "unknown run" in err


class TestRegister:
    def exotic_descriptor_xml(self):
        base = standard_registry().get("noop@sandbox-01")
        descriptor = dataclasses.replace(
            base,
            id="noop@exotic-01",
            calculator=Calculator("exotic-01", "linux", 2),
            capabilities=frozenset({"exotic"}),
        )
        return render_descriptor_xml(descriptor)

    def test_register_then_bind(self, run, tmp_path):
        flow = tmp_path / "exotic.flow"
        flow.write_text(EXOTIC_FLOW, encoding="utf-8")
        code, _, err = run("submit", flow, "--user", "ada")
        assert code == 1
        assert "no resource admits" in err

        xml = tmp_path / "exotic.xml"
        xml.write_text(self.exotic_descriptor_xml(), encoding="utf-8")
        code, out, _ = run("register", xml)
        assert (code, out) == (0, "noop@exotic-01\n")

        _, out, _ = run("submit", flow, "--user", "ada")
        code, out, _ = run("report", out.strip(), "--json")
        assert json.loads(out)["bindings"] == {"a": "noop@exotic-01"}

    def test_duplicate_rejected(self, run, tmp_path):
        xml = tmp_path / "exotic.xml"
        xml.write_text(self.exotic_descriptor_xml(), encoding="utf-8")
        assert run("register", xml)[0] == 0
        code, _, err = run("register", xml)
        assert code == 1
        assert "already registered" in err

    def test_pool_ids_are_reserved(self, run, tmp_path):
        base = standard_registry().get("noop@sandbox-01")
        xml = tmp_path / "clash.xml"
        xml.write_text(render_descriptor_xml(base), encoding="utf-8")
        code, _, err = run("register", xml)
        assert code == 1
        assert "already registered" in err


class TestMock:
    def test_native_output_parses(self, run):
        code, out, err = run("mock", "lattice", "--param", "cells=5")
        assert (code, err) == (0, "")
        ds = parse_lattice_native(out)
        assert ds.get("n_sites").magnitude == 5.0

    def test_seed_changes_placement(self, run):
        outputs = {
            run("mock", "cbmc", "--seed", s, "--param", "theta=0.5")[1]
            for s in (1, 2, 3, 4)
        }
        assert len(outputs) > 1

    def test_chained_stage(self, run):
        code, out, _ = run("mock", "analysis", "--seed", 2)
        assert code == 0
        assert out.splitlines()[0] == "format = tsfit-kv"

    def test_bad_stage_params(self, run):
        code, _, err = run("mock", "lattice", "--param", "cells=1")
        assert code == 1
        assert "error:" in err

    def test_unknown_name_is_usage_error(self, run):
        code, _, err = run("mock", "quantum")
        assert code == 1
        assert "invalid choice" in err


class TestConfigAndStore:
    def test_config_supplies_store_and_user(self, run, case_file, tmp_path, monkeypatch):
        monkeypatch.delenv("GRIDFLOW_STORE")
        cfg = tmp_path / "gridflow.cfg"
        cfg.write_text(
            f"[gridflow]\nstore = {tmp_path / 'cfg-store'}\nuser = carol\n",
            encoding="utf-8",
        )
        code, out, _ = run("submit", case_file, "--config", cfg)
        assert code == 0
        run_id = out.strip()
        code, out, _ = run("report", run_id, "--config", cfg, "--json")
        assert code == 0
        assert json.loads(out)["user"] == {"user": "carol", "affiliation": "academic"}
        assert (tmp_path / "cfg-store" / "runs" / f"{run_id}.json").exists()

    def test_flag_beats_environment(self, run, case_file, tmp_path):
        _, out, _ = run("submit", case_file, "--user", "ada")
        run_id = out.strip()
        code, _, err = run("report", run_id, "--store", tmp_path / "elsewhere")
        assert code == 1
        assert "unknown run" in err

    def test_missing_config_file(self, run, case_file):
        code, _, err = run("submit", case_file, "--config", "absent.cfg")
        assert code == 1
        assert "config" in err


class TestExitContract:
    def test_no_arguments_is_usage_error(self, run):
        assert run()[0] == 1

    def test_help_exits_zero(self, run):
        code, out, _ = run("--help")
        assert code == 0
        assert "COMMAND" in out

    def test_subcommand_help(self, run):
        for name in ("register", "verify", "export", "submit",
                     "resume", "report", "store", "mock"):
            code, out, _ = run(name, "--help")
            assert code == 0, name
            assert "usage" in out

    def test_unknown_subcommand(self, run):
        assert run("bogus")[0] == 1

    def test_corrupt_manifest_is_internal(self, run, case_file, tmp_path):
        _, out, _ = run("submit", case_file, "--user", "ada")
        run_id = out.strip()
        manifest = tmp_path / "store" / "runs" / f"{run_id}.json"
        manifest.write_text("{not json", encoding="utf-8")
        code, _, err = run("report", run_id)
        assert code == 3
        assert "Traceback" in err

    def test_unknown_report_run(self, run):
        code, _, err = run("report", "run-7777")
        assert code == 1
        assert "unknown run" in err
