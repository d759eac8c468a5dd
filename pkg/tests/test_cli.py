"""End-to-end checks of the command line interface and its artifacts."""

import csv
import hashlib
import json
import math

import pytest

from thinstruct.cli import ConfigError, main, parse_config

TINY_MESH = """
[mesh]
na = 2
nza = 4
nb = 6
nhb = 2
n_interval = 8
"""

FAST_SOLVER = """
[solver]
max_outer = 3
restarts = 0
lbfgs_maxiter = 200
psi_maxiter = 20
envelope_points = 4
envelope_multistart = 2
cell_multistart = 1
bbar_budget = 3
"""


def _write(tmp_path, text, name="config.toml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def _read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


class TestParseConfig:
    def test_minimal_valid(self, tmp_path):
        cfg = parse_config(_write(tmp_path, """
[regime]
regime = "lplus"
p = 2.0
ell = 1.0
eps = [[0.5, 0.25]]

[density]
kind = "p_well_dist"
"""))
        assert cfg.regime_cfg.regime == "lplus"
        assert cfg.density.p == 2.0  # inherited from the regime block
        assert cfg.out_dir == "out"

    def test_r_values_rule(self, tmp_path):
        cfg = parse_config(_write(tmp_path, """
[regime]
regime = "lplus"
p = 2.0
ell = 2.0
r_values = [0.5, 0.25]

[density]
kind = "quadratic_convex"
"""))
        assert cfg.regime_cfg.eps_sequence == ((0.5, 0.5), (0.25, 0.125))

    def test_collects_every_violation(self, tmp_path):
        with pytest.raises(ConfigError) as err:
            parse_config(_write(tmp_path, """
[regime]
regime = "lhalf"
p = 0.5
eps = [[0.5, 0.25]]
bogus = 1

[density]
kind = "mystery"

[typo_section]
x = 1
"""))
        text = "\n".join(err.value.violations)
        assert len(err.value.violations) >= 4
        assert "lhalf" in text
        assert "p must be" in text
        assert "unknown key 'bogus'" in text
        assert "typo_section" in text

    def test_regime_exponent_mismatch_is_reported(self, tmp_path):
        with pytest.raises(ConfigError, match="p > 2"):
            parse_config(_write(tmp_path, """
[regime]
regime = "linf"
p = 2.0
eps = [[0.5, 0.87]]

[density]
kind = "p_well_dist"
"""))

    def test_eps_and_rule_are_exclusive(self, tmp_path):
        with pytest.raises(ConfigError, match="not both"):
            parse_config(_write(tmp_path, """
[regime]
regime = "lplus"
p = 2.0
ell = 1.0
eps = [[0.5, 0.25]]
r_values = [0.5]

[density]
kind = "quadratic_convex"
"""))

    def test_force_field_shapes_checked(self, tmp_path):
        with pytest.raises(ConfigError, match="forces.fa"):
            parse_config(_write(tmp_path, """
[regime]
regime = "lplus"
p = 2.0
ell = 1.0
eps = [[0.5, 0.25]]

[density]
kind = "quadratic_convex"

[forces.fa]
kind = "constant"
value = [1.0, 2.0]
"""))


class TestMainExitCodes:
    def test_missing_config_file(self, capsys):
        assert main(["capacity", "--config", "/nonexistent.toml"]) == 2
        assert "not found" in capsys.readouterr().err

    def test_invalid_config_lists_violations(self, tmp_path, capsys):
        path = _write(tmp_path, """
[regime]
regime = "lplus"
p = 2.0

[density]
kind = "quadratic_convex"
""")
        assert main(["capacity", "--config", path]) == 2
        err = capsys.readouterr().err
        assert "invalid configuration" in err
        assert "eps pairs or an r_values rule" in err

    def test_eps_index_out_of_range(self, tmp_path, capsys):
        path = _write(tmp_path, """
[regime]
regime = "lplus"
p = 2.0
ell = 1.0
eps = [[0.5, 0.25]]

[density]
kind = "quadratic_convex"
""" + TINY_MESH)
        assert main(["solve-eps", "--config", path, "--eps-index", "3",
                     "--out", str(tmp_path / "o")]) == 2
        assert "eps-index" in capsys.readouterr().err

    def test_gamma_study_needs_three_entries(self, tmp_path, capsys):
        path = _write(tmp_path, """
[regime]
regime = "lplus"
p = 2.0
ell = 1.0
r_values = [0.5, 0.25]

[density]
kind = "quadratic_convex"
""" + TINY_MESH)
        assert main(["gamma-study", "--config", path,
                     "--out", str(tmp_path / "o")]) == 2
        assert "at least 3" in capsys.readouterr().err


BASE = """
[regime]
regime = "lplus"
p = 2.0
ell = 1.0
eps = [[0.5, 0.25]]

[density]
kind = "quadratic_convex"
"""


class TestCapacityCommand:
    def test_runs_and_reports(self, tmp_path):
        path = _write(tmp_path, BASE + """
[capacity]
cases = [[2.0, 0.1353352832366127], [1.5, 0.01]]
fem_resolution = 200
""")
        out = tmp_path / "out"
        assert main(["capacity", "--config", path, "--out", str(out)]) == 0
        header, rows = _read_csv(out / "capacity.csv")
        assert header == ["p", "r", "closed_form", "fem", "rel_error"]
        assert len(rows) == 2
        assert float(rows[0][2]) == pytest.approx(2.0 * math.pi, rel=1e-10)
        assert all(float(r[4]) < 0.02 for r in rows)


class TestEnvelopeCommand:
    def test_radial_density_gets_oracle_column(self, tmp_path):
        path = _write(tmp_path, """
[regime]
regime = "lplus"
p = 4.0
ell = 1.0
eps = [[0.5, 0.25]]

[density]
kind = "radial_quartic"

[envelope]
radii = [0.5, 1.5]

[solver]
envelope_points = 6
envelope_multistart = 6
cell_multistart = 1
""")
        out = tmp_path / "out"
        assert main(["envelope", "--config", path, "--out", str(out)]) == 0
        header, rows = _read_csv(out / "envelope_values.csv")
        assert header[-1] == "radial_oracle"
        for row in rows:
            assert float(row[2]) == pytest.approx(float(row[4]), abs=1e-3)
            # estimated envelopes stay within the density
            assert float(row[2]) <= float(row[1]) + 1e-8

    def test_convex_density_has_no_oracle_column(self, tmp_path):
        path = _write(tmp_path, BASE + """
[envelope]
targets = [[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]]
""")
        out = tmp_path / "out"
        assert main(["envelope", "--config", path, "--out", str(out)]) == 0
        header, rows = _read_csv(out / "envelope_values.csv")
        assert header == ["index", "W", "convex_envelope", "cell_qcw"]
        assert float(rows[0][1]) == pytest.approx(0.0, abs=1e-12)

    def test_byte_identical_reruns(self, tmp_path):
        path = _write(tmp_path, """
[regime]
regime = "lplus"
p = 4.0
ell = 1.0
eps = [[0.5, 0.25]]

[density]
kind = "radial_quartic"

[envelope]
radii = [0.8, 1.3]

[solver]
envelope_points = 4
envelope_multistart = 2
""")
        outs = []
        for name in ("o1", "o2"):
            out = tmp_path / name
            assert main(["envelope", "--config", path, "--out", str(out)]) == 0
            outs.append((out / "envelope_values.csv").read_bytes())
        assert outs[0] == outs[1]


class TestSolveEpsCommand:
    def test_artifacts_and_manifest(self, tmp_path):
        path = _write(tmp_path, BASE + """
[forces.fa]
kind = "constant"
value = [0.0, 0.0, 0.3]
""" + TINY_MESH + FAST_SOLVER)
        out = tmp_path / "out"
        assert main(["solve-eps", "--config", path, "--out", str(out)]) == 0
        for name in ("psi_a.csv", "psi_b.csv", "solve_eps.json", "manifest.json"):
            assert (out / name).exists()
        summary = json.loads((out / "solve_eps.json").read_text())
        assert summary["converged"] is True
        assert summary["r"] == 0.5 and summary["h"] == 0.25
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["artifacts"] == sorted(manifest["artifacts"])
        sha = hashlib.sha256(open(path, "rb").read()).hexdigest()
        assert manifest["config_sha256"] == sha
        assert manifest["subcommand"] == "solve-eps"


class TestGammaStudyCommand:
    def test_zero_forces_close_all_gaps(self, tmp_path):
        path = _write(tmp_path, """
[regime]
regime = "lzero"
p = 2.0
r_values = [0.5, 0.4, 0.3]

[density]
kind = "p_well_dist"
""" + TINY_MESH + FAST_SOLVER)
        out = tmp_path / "out"
        assert main(["gamma-study", "--config", path, "--out", str(out)]) == 0
        header, rows = _read_csv(out / "gamma_report.csv")
        assert header[:5] == ["row", "r", "h", "energy", "gap"]
        eps_rows = [r for r in rows if r[0] == "eps"]
        limit_rows = [r for r in rows if r[0] == "limit"]
        assert len(eps_rows) == 3 and len(limit_rows) == 1
        for row in eps_rows:
            assert abs(float(row[3])) <= 1e-9
            assert abs(float(row[4])) <= 1e-9
            assert row[5] == "1"
        assert limit_rows[0][5] == "1"


class TestCheckInvariantsCommand:
    def test_passes_on_small_config(self, tmp_path):
        path = _write(tmp_path, """
[regime]
regime = "lplus"
p = 2.0
ell = 1.0
eps = [[0.5, 0.25]]

[density]
kind = "p_well_dist"
""" + TINY_MESH + FAST_SOLVER)
        out = tmp_path / "out"
        assert main(["check-invariants", "--config", path, "--out", str(out)]) == 0
        report = json.loads((out / "invariants_report.json").read_text())
        assert report["ok"] is True
        names = {c["name"] for c in report["checks"]}
        assert "natural-state-eps-energy-zero" in names
        assert "envelope-chain" in names
        assert "capacity-closed-form" in names
