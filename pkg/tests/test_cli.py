"""Command-line interface: exit codes, output files, determinism, and the
override rules between config files and flags."""

import json
import subprocess
import sys

import pytest

from nsdarcy.analysis import EnergyReport
from nsdarcy.cli import (EXIT_CONFIG, EXIT_OK, EXIT_SOLVER, EXIT_VERIFICATION,
                         main)
from nsdarcy.mesh import load_mesh


def run(*argv):
    return main(list(argv))


def write_config(path, **kwargs):
    path.write_text(json.dumps(kwargs))
    return str(path)


class TestSolve:
    def test_success_writes_report_and_returns_zero(self, tmp_path):
        out = tmp_path / "run"
        assert run("solve", "--out", str(out)) == EXIT_OK
        payload = json.loads((out / "report.json").read_text())
        assert set(payload) == {"command", "mesh", "forcing", "case",
                                "solver", "transcript", "energy"}
        assert payload["command"] == "solve"
        assert payload["forcing"] == "driven"
        assert payload["case"] is None
        assert payload["solver"]["converged"] is True
        assert payload["energy"]["bound_ok"] is True
        assert payload["energy"]["balance_defect_rel"] <= 1e-9

    def test_energy_block_has_stable_keys(self, tmp_path):
        out = tmp_path / "run"
        run("solve", "--out", str(out))
        payload = json.loads((out / "report.json").read_text())
        assert set(payload["energy"]) == set(EnergyReport._fields)

    def test_case_run_reports_errors_and_nan_becomes_null(self, tmp_path):
        # the representable case carries inhomogeneous boundary data, so the
        # companion fields are skipped; their NaN must serialize as null
        out = tmp_path / "run"
        assert run("solve", "--case", "representable",
                   "--out", str(out)) == EXIT_OK
        payload = json.loads((out / "report.json").read_text())
        assert payload["case"] == "representable"
        assert payload["forcing"] is None
        errors = payload["errors"]
        assert all(errors[k] < 1e-9 for k in errors)
        assert payload["energy"]["e_aux"] is None
        assert payload["energy"]["compensation_residual"] is None

    def test_vtk_flag_writes_legacy_file(self, tmp_path):
        out = tmp_path / "run"
        run("solve", "--mesh", "builtin:2x4", "--vtk", "--out", str(out))
        lines = (out / "fields.vtk").read_text().splitlines()
        assert lines[0] == "# vtk DataFile Version 3.0"
        assert lines[2] == "ASCII"
        assert lines[4] == "POINTS 15 double"  # (2+1)*(4+1) vertices
        assert "VECTORS velocity double" in lines
        assert "SCALARS pressure double 1" in lines
        assert "SCALARS head double 1" in lines

    def test_no_convection_finishes_in_one_iteration(self, tmp_path):
        out = tmp_path / "run"
        run("solve", "--no-convection", "--out", str(out))
        payload = json.loads((out / "report.json").read_text())
        assert payload["solver"]["iterations"] == 1
        assert payload["solver"]["include_convection"] is False


class TestVerify:
    def test_bundle_passes_on_stable_pair(self, tmp_path):
        # the inf-sup spread criterion is calibrated for meshes from 4x8 up;
        # coarser bases are still in the pre-asymptotic regime
        out = tmp_path / "run"
        assert run("verify", "--mesh", "builtin:4x8", "--levels", "2",
                   "--out", str(out)) == EXIT_OK
        bundle = json.loads((out / "verification.json").read_text())
        assert bundle["passed"] is True
        names = [c["name"] for c in bundle["checks"]]
        assert names == ["energy_balance", "energy_bound", "pressure_bound",
                         "inf_sup", "compensation", "uniqueness"]
        assert all(c["passed"] for c in bundle["checks"])

    def test_unstable_pair_fails_inf_sup_and_returns_one(self, tmp_path, capsys):
        out = tmp_path / "run"
        assert run("verify", "--mesh", "builtin:2x4", "--levels", "1",
                   "--unstable-pair", "--out", str(out)) == EXIT_VERIFICATION
        bundle = json.loads((out / "verification.json").read_text())
        assert bundle["passed"] is False
        by_name = {c["name"]: c for c in bundle["checks"]}
        assert by_name["inf_sup"]["passed"] is False
        assert by_name["inf_sup"]["details"]["velocity_degree"] == 1
        assert "inf_sup" in capsys.readouterr().err

    def test_single_level_marks_compensation_insufficient(self, tmp_path):
        out = tmp_path / "run"
        assert run("verify", "--mesh", "builtin:2x4", "--levels", "1",
                   "--out", str(out)) == EXIT_OK
        bundle = json.loads((out / "verification.json").read_text())
        by_name = {c["name"]: c for c in bundle["checks"]}
        assert by_name["compensation"]["passed"] is True
        assert by_name["compensation"]["details"]["status"] == \
            "insufficient levels"


class TestMms:
    def test_representable_case_passes(self, tmp_path):
        out = tmp_path / "run"
        assert run("mms", "--case", "representable",
                   "--out", str(out)) == EXIT_OK
        payload = json.loads((out / "mms.json").read_text())
        assert payload["case"] == "representable"
        assert payload["passed"] is True
        assert payload["failures"] == []
        assert len(payload["rows"]) == 2

    def test_rates_csv_layout(self, tmp_path):
        out = tmp_path / "run"
        run("mms", "--case", "representable", "--out", str(out))
        lines = (out / "rates.csv").read_text().splitlines()
        header = lines[0].split(",")
        assert header[:2] == ["level", "h"]
        assert "err_u_h1" in header and "rate_u_h1" in header
        assert len(lines) == 3  # header plus two levels

    def test_short_smooth_study_needs_no_assert(self, tmp_path, capsys):
        out = tmp_path / "never"
        assert run("mms", "--levels", "2", "--out", str(out)) == EXIT_CONFIG
        assert "at least 3 levels" in capsys.readouterr().err
        assert not out.exists()

    def test_no_assert_allows_short_smooth_study(self, tmp_path):
        out = tmp_path / "run"
        assert run("mms", "--levels", "2", "--no-assert",
                   "--out", str(out)) == EXIT_OK
        payload = json.loads((out / "mms.json").read_text())
        assert payload["case"] == "smooth"
        assert payload["final_rates"]  # reported even without the gate

    def test_file_mesh_is_rejected_for_studies(self, tmp_path, capsys):
        assert run("mms", "--mesh", "mesh.txt",
                   "--out", str(tmp_path)) == EXIT_CONFIG
        assert "builtin" in capsys.readouterr().err


class TestMeshInfo:
    def test_summary_reports_subdomain_split(self, capsys):
        assert run("mesh-info", "--mesh", "builtin:4x8") == EXIT_OK
        summary = json.loads(capsys.readouterr().out)
        assert summary["num_vertices"] == 45
        assert summary["fluid_triangles"] == summary["porous_triangles"] == 32
        assert summary["interface_edges"] == 4
        assert summary["fluid_area"] == pytest.approx(1.0, abs=1e-14)
        assert summary["porous_area"] == pytest.approx(1.0, abs=1e-14)

    def test_dump_round_trips_through_loader(self, capsys):
        assert run("mesh-info", "--mesh", "builtin:2x4", "--dump") == EXIT_OK
        text = capsys.readouterr().out
        mesh = load_mesh(text)
        assert mesh.num_vertices == 15
        assert len(mesh.interface_edges) == 2

    def test_mesh_file_round_trip(self, tmp_path, capsys):
        run("mesh-info", "--mesh", "builtin:2x4", "--dump")
        path = tmp_path / "saved.mesh"
        path.write_text(capsys.readouterr().out)
        assert run("mesh-info", "--mesh", str(path)) == EXIT_OK
        summary = json.loads(capsys.readouterr().out)
        assert summary["num_vertices"] == 15


class TestConfigHandling:
    def test_flags_override_config_file(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", mesh="builtin:2x4")
        out = tmp_path / "run"
        run("solve", "--config", cfg, "--mesh", "builtin:4x8",
            "--out", str(out))
        payload = json.loads((out / "report.json").read_text())
        assert payload["mesh"]["num_vertices"] == 45  # flag wins

    def test_config_file_keys_are_applied(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", mesh="builtin:2x4",
                           no_convection=True)
        out = tmp_path / "run"
        run("solve", "--config", cfg, "--out", str(out))
        payload = json.loads((out / "report.json").read_text())
        assert payload["mesh"]["num_vertices"] == 15
        assert payload["solver"]["iterations"] == 1

    def test_unknown_config_key_is_rejected(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "cfg.json", viscosity=2.0)
        out = tmp_path / "never"
        assert run("solve", "--config", cfg, "--out", str(out)) == EXIT_CONFIG
        assert "unknown config keys: viscosity" in capsys.readouterr().err
        assert not out.exists()

    def test_malformed_json_is_a_config_error(self, tmp_path, capsys):
        path = tmp_path / "cfg.json"
        path.write_text("not json {")
        out = tmp_path / "never"
        assert run("solve", "--config", str(path),
                   "--out", str(out)) == EXIT_CONFIG
        assert "malformed config file" in capsys.readouterr().err
        assert not out.exists()

    def test_invalid_parameter_leaves_no_outputs(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "cfg.json", nu=-3.0)
        out = tmp_path / "never"
        assert run("solve", "--config", cfg, "--out", str(out)) == EXIT_CONFIG
        assert "config error" in capsys.readouterr().err
        assert not out.exists()

    def test_missing_config_file(self, tmp_path, capsys):
        assert run("solve", "--config", str(tmp_path / "absent.json"),
                   "--out", str(tmp_path / "never")) == EXIT_CONFIG
        assert "cannot read config file" in capsys.readouterr().err

    def test_bad_builtin_spec(self, tmp_path, capsys):
        assert run("solve", "--mesh", "builtin:4by8",
                   "--out", str(tmp_path)) == EXIT_CONFIG
        assert "builtin:WxH" in capsys.readouterr().err

    def test_unknown_case_lists_choices(self, tmp_path, capsys):
        assert run("solve", "--case", "bogus",
                   "--out", str(tmp_path)) == EXIT_CONFIG
        err = capsys.readouterr().err
        assert "representable" in err and "smooth" in err

    def test_nonpositive_levels_rejected(self, tmp_path, capsys):
        assert run("verify", "--levels", "0",
                   "--out", str(tmp_path)) == EXIT_CONFIG
        assert "levels" in capsys.readouterr().err

    def test_usage_error_exits_with_config_code(self):
        with pytest.raises(SystemExit) as exc:
            run("bogus-command")
        assert exc.value.code == EXIT_CONFIG


class TestSolverFailures:
    def test_equal_order_pair_is_a_solver_failure(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "cfg.json", velocity_degree=1)
        out = tmp_path / "never"
        assert run("solve", "--config", cfg, "--out", str(out)) == EXIT_SOLVER
        assert "solver failure" in capsys.readouterr().err
        assert not out.exists()

    def test_iteration_budget_exhaustion(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "cfg.json", max_iter=1)
        out = tmp_path / "never"
        assert run("solve", "--config", cfg, "--out", str(out)) == EXIT_SOLVER
        assert "solver failure" in capsys.readouterr().err
        assert not out.exists()


class TestDeterminism:
    def test_solve_reports_are_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        run("solve", "--out", str(a))
        run("solve", "--out", str(b))
        assert (a / "report.json").read_bytes() == \
            (b / "report.json").read_bytes()

    def test_mms_outputs_are_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        run("mms", "--case", "representable", "--out", str(a))
        run("mms", "--case", "representable", "--out", str(b))
        assert (a / "mms.json").read_bytes() == (b / "mms.json").read_bytes()
        assert (a / "rates.csv").read_bytes() == (b / "rates.csv").read_bytes()

    def test_verify_bundle_is_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        run("verify", "--mesh", "builtin:2x4", "--levels", "1",
            "--seed", "7", "--out", str(a))
        run("verify", "--mesh", "builtin:2x4", "--levels", "1",
            "--seed", "7", "--out", str(b))
        assert (a / "verification.json").read_bytes() == \
            (b / "verification.json").read_bytes()


def test_console_script_is_installed(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "nsdarcy.cli", "mesh-info",
         "--mesh", "builtin:2x4"],
        capture_output=True, text=True)
    assert proc.returncode == EXIT_OK
    assert json.loads(proc.stdout)["num_vertices"] == 15
