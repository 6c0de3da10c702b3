import json
import textwrap

import numpy as np
import pytest

from pbcell.asymptotics import read_profile
from pbcell.cli import main
from pbcell.config import load_config
from pbcell.errors import ConfigError
from pbcell.fem import read_field
from pbcell.geometry import load_mesh

SLAB = """
[geometry]
kind = slab
width = 1.0
n_cells = {n}
grading = {g}
"""
SALT = """
[electrolyte]
valences = -1, 1
concentrations = 0.5, 0.5
"""


def write_cfg(tmp_path, *blocks, n=200, g=1.0, name="run.ini"):
    path = tmp_path / name
    path.write_text(textwrap.dedent(SLAB.format(n=n, g=g)) + "".join(textwrap.dedent(b) for b in blocks))
    return path


def run(tmp_path, command, cfg, *extra):
    out = tmp_path / f"out-{command}"
    code = main([command, "--config", str(cfg), "--out", str(out), *extra])
    return code, out


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


def test_zero_charge_solve(tmp_path):
    cfg = write_cfg(tmp_path, SALT, "[bc]\ntype = neumann\nvalue = 0\n", "[beta]\nvalue = 1.0\n")
    code, out = run(tmp_path, "solve", cfg)
    assert code == 0
    psi = read_field(out / "field.pbf")
    assert len(psi) == 201 and not np.any(psi)
    m = manifest(out)
    assert m["exit_code"] == 0 and sorted(m["files"]) == ["field.pbf", "report.txt"]
    assert m["config"]["bc"]["value"] == "0"


def test_missing_electrolyte_names_the_block(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "[bc]\ntype = neumann\nvalue = -1\n", "[beta]\nvalue = 1.0\n")
    code, _ = run(tmp_path, "solve", cfg)
    assert code == 1
    assert "[electrolyte]" in capsys.readouterr().err


def test_dirichlet_report_has_monotone_energy(tmp_path):
    cfg = write_cfg(tmp_path, SALT, "[bc]\ntype = dirichlet\nvalue = 1.0\n", "[beta]\nvalue = 1e4\n", n=2000)
    code, out = run(tmp_path, "solve", cfg)
    assert code == 0
    text = (out / "report.txt").read_text()
    assert "converged = true" in text
    rows = text.split("iteration energy residual\n")[1].split("\n")
    energies = [float(r.split()[1]) for r in rows if r]
    assert len(energies) >= 2
    assert all(b <= a + 1e-12 * abs(a) for a, b in zip(energies, energies[1:]))


def test_unknown_approximant_is_a_config_error(tmp_path, capsys):
    cfg = write_cfg(tmp_path, SALT, "[bc]\ntype = neumann\nvalue = -1\n", "[beta]\ngrid = 1, 10, 100\n",
                    "[sweep]\napproximants = layer, bogus\n")
    code, _ = run(tmp_path, "sweep", cfg)
    assert code == 1
    assert "bogus" in capsys.readouterr().err


def test_single_beta_sweep_has_no_rates(tmp_path, caplog):
    cfg = write_cfg(tmp_path, SALT, "[bc]\ntype = neumann\nvalue = -1\n", "[beta]\nvalue = 100\n",
                    "[sweep]\napproximants = layer\n")
    code, out = run(tmp_path, "sweep", cfg)
    assert code == 0
    assert "fewer than 3" in caplog.text
    assert len((out / "sweep.csv").read_text().splitlines()) == 5
    assert (out / "rates.csv").read_text().splitlines()[1:] == []


def test_sweep_checks_and_exit_code(tmp_path, capsys):
    body = (SALT, "[bc]\ntype = neumann\nvalue = -1\n", "[beta]\nlog10_start = 2\nlog10_stop = 4\n",
            "[sweep]\napproximants = layer\n")
    code, out = run(tmp_path, "sweep", write_cfg(tmp_path, *body, "[checks]\nlayer.L2 = <= -0.5\n", n=2000, g=1.008))
    assert code == 0
    assert "PASS layer.L2 <= -0.5" in capsys.readouterr().out
    assert manifest(out)["verdicts"][0]["passed"]
    code, out = run(tmp_path, "sweep", write_cfg(tmp_path, *body, "[checks]\nlayer.L2 = >= 5\n", name="b.ini"))
    assert code == 3
    assert sorted(manifest(out)["files"]) == ["diagnostics.json", "rates.csv", "sweep.csv"]


def test_solver_failure_exit_code(tmp_path):
    cfg = write_cfg(tmp_path, SALT, "[bc]\ntype = neumann\nvalue = -1\n", "[beta]\nvalue = 1e5\n",
                    "[solver]\nmax_newton = 1\ncontinuation = \n", n=2000)
    code, out = run(tmp_path, "solve", cfg)
    assert code == 2
    assert manifest(out)["exit_code"] == 2


def test_mesh_counts_and_round_trip(tmp_path, capsys):
    cfg = write_cfg(tmp_path, n=4)
    code, out = run(tmp_path, "mesh", cfg)
    assert code == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[:3] == ["nodes 5", "elements 4", "surface facets 2"]
    mesh = load_mesh(out / "mesh.txt")
    assert mesh.n_nodes == 5
    assert np.allclose(mesh.nodes[:, 0], np.linspace(0, 1, 5))


def test_layer_profile(tmp_path):
    cfg = write_cfg(tmp_path, SALT, "[layer]\nzeta = 2\n")
    code, out = run(tmp_path, "layer", cfg)
    assert code == 0
    lines = (out / "profile.pbl").read_text().splitlines()
    assert lines[0].startswith("pblayer 1 ")
    assert lines[1] == "0 2"
    xi, v = read_profile(out / "profile.pbl")
    assert np.all(np.diff(xi) > 0) and np.all(np.diff(v) <= 0)


def test_bounds_command(tmp_path):
    cfg = write_cfg(tmp_path, SALT, "[bc]\ntype = neumann\nvalue = -1\n", "[beta]\nvalue = 100\n")
    code, out = run(tmp_path, "bounds", cfg)
    assert code == 0
    info = json.loads((out / "bounds.json").read_text())
    assert info["violations"] == [] and abs(info["balance_residual"]) < 1e-9
    assert sorted(manifest(out)["files"]) == ["bounds.json", "field.pbf", "lower.pbf", "report.txt", "upper.pbf"]
    lo, psi, hi = (read_field(out / f) for f in ("lower.pbf", "field.pbf", "upper.pbf"))
    assert np.all(lo <= psi + 1e-8) and np.all(psi <= hi + 1e-8)


def test_bounds_rejects_dirichlet(tmp_path):
    cfg = write_cfg(tmp_path, SALT, "[bc]\ntype = dirichlet\nvalue = 1\n", "[beta]\nvalue = 100\n")
    assert run(tmp_path, "bounds", cfg)[0] == 1


def test_argument_errors(tmp_path):
    assert main(["nosuch", "--config", "x.ini"]) == 1
    assert main(["solve"]) == 1
    assert main(["solve", "--config", str(tmp_path / "missing.ini")]) == 1
    cfg = write_cfg(tmp_path)
    assert main(["mesh", "--config", str(cfg), "--threads", "0"]) == 1


@pytest.mark.parametrize("extra, message", [
    ("[nonsense]\na = 1\n", "unknown section"),
    ("[bc]\ntype = robin\nvalue = 1\n", "neumann or dirichlet"),
    ("[bc]\ntype = neumann\nvalue = 1\nwalls = 1, 2\n", "exactly one"),
    ("[beta]\nvalue = 1e12\n", "outside"),
    ("[beta]\nlog10_start = 2\nlog10_stop = 0\n", "log10_step"),
    ("[checks]\nlayer.L3 = theory\n", "<approximant>.<norm>"),
    ("[checks]\nlayer.L2 = < 1\n", "expected"),
    ("[solver]\nmax_newton = many\n", "cannot read"),
])
def test_config_errors(tmp_path, extra, message):
    with pytest.raises(ConfigError, match=message):
        load_config(write_cfg(tmp_path, extra))


def test_config_table_and_beta_grid(tmp_path):
    (tmp_path / "sigma.txt").write_text("# left, right\n-1\n-2\n")
    cfg = load_config(write_cfg(tmp_path, SALT, "[bc]\ntype = neumann\ntable = sigma.txt\n",
                                "[beta]\nlog10_start = 0\nlog10_stop = 2\nlog10_step = 1\n",
                                "[output]\ndir = results\n"))
    assert cfg.betas == [1.0, 10.0, 100.0]
    assert cfg.out_dir == tmp_path / "results"
    data = cfg.surface_data()
    assert list(data.sigma) == [-1.0, -2.0]
    (tmp_path / "sigma.txt").write_text("-1\n")
    with pytest.raises(ConfigError, match="surface facets"):
        load_config(cfg.source).surface_data()
