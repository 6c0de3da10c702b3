"""Acceptance criteria 1-12, each reported as one PASS/FAIL line."""
import math
from pathlib import Path

import numpy as np
import pytest

from pbcell import analysis as an
from pbcell.asymptotics import gouy_chapman, profile_for
from pbcell.cli import main
from pbcell.config import load_config
from pbcell.electrolyte import symmetric
from pbcell.fem import Field
from pbcell.geometry import SurfaceData, build_slab
from pbcell.solver import solve

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
_cache: dict = {}


def preset(name):
    """Sweep result of configs/<name>.ini, computed once per session."""
    if name not in _cache:
        cfg = load_config(CONFIGS / f"{name}.ini")
        mesh = cfg.mesh()
        spec = an.SweepSpec(mesh, cfg.electrolyte, cfg.surface_data(mesh), cfg.betas, cfg.approximants, cfg.opts)
        _cache[name] = an.sweep(spec)
    return _cache[name]


def fit(result, approximant, norm):
    return result.fits[(approximant, norm)]


def test_c01_exactness(verdict):
    e = symmetric()
    worst = 0.0
    for mesh in (build_slab(1.0, 200, 1.0), build_slab(1.0, 2000, 1.008)):
        for data in (SurfaceData.neumann(mesh, 0.0), SurfaceData.dirichlet(mesh, 0.0)):
            for beta in (1e-3, 1.0, 1e4):
                psi, _ = solve(mesh, e, data, beta)
                worst = max(worst, float(np.max(np.abs(psi.values))))
    assert verdict(1, worst <= 1e-10, f"max |Psi| over zero-data solves = {worst:.2e} (<= 1e-10)")


def test_c02_gouy_chapman(verdict):
    e = symmetric()
    worst = 0.0
    for zeta in (0.5, 1.0, 2.0, 4.0):
        prof = profile_for(e, zeta)
        worst = max(worst, float(np.max(np.abs(prof.values - gouy_chapman(zeta, prof.xi_grid)))))
    assert verdict(2, worst <= 1e-8, f"sup |profile - closed form| = {worst:.2e} (<= 1e-8)")


def test_c03_large_beta_neumann_rates(verdict):
    r = preset("neumann_large_beta")
    limits = {"L1": -1.35, "L2": -1.10, "H1": -0.60}
    parts, ok = [], True
    for norm, lim in limits.items():
        f = fit(r, "layer", norm)
        good = f.slope <= lim and f.r2 >= 0.98
        ok &= good
        parts.append(f"{norm} slope {f.slope:.3f} (<= {lim}) R2 {f.r2:.3f}{'' if f.r2 >= 0.98 else ' < 0.98'}")
    assert verdict(3, ok, "; ".join(parts))


def test_c04_large_beta_norm_decay(verdict):
    r = preset("neumann_large_beta")
    l1, h1 = fit(r, "zero", "L1").slope, fit(r, "zero", "H1").slope
    ok = l1 <= -0.9 and h1 <= -0.2
    assert verdict(4, ok, f"|Psi| L1 slope {l1:.3f} (<= -0.9); H1 slope {h1:.3f} (<= -0.2)")


def test_c05_small_beta_neumann(verdict):
    r = preset("neumann_small_beta")
    s0, s1 = fit(r, "small0", "Linf"), fit(r, "small1", "Linf")
    ok = s0.slope >= 1.85 and s1.slope >= 3.7
    note = f" (excluded beta {', '.join(f'{b:g}' for b in s1.excluded)})" if s1.excluded else ""
    assert verdict(5, ok, f"Linf slope {s0.slope:.3f} (>= 1.85); with corrector {s1.slope:.3f} (>= 3.7){note}")


def test_c06_zero_mean(verdict):
    r = preset("zero_mean_small_beta")
    s0, s1 = fit(r, "zero-mean0", "Linf").slope, fit(r, "zero-mean1", "Linf").slope
    ok = s0 >= 0.9 and s1 >= 1.85
    assert verdict(6, ok, f"Linf slope {s0:.3f} (>= 0.9); with corrector {s1:.3f} (>= 1.85)")


def test_c07_dirichlet_small_beta(verdict):
    s = fit(preset("dirichlet_small_beta"), "dirichlet-small", "H1").slope
    assert verdict(7, s >= 1.85, f"H1 slope {s:.3f} (>= 1.85)")


def test_c08_dirichlet_large_beta(verdict):
    r = preset("dirichlet_large_beta")
    l1, l2, h1 = (fit(r, "layer", n).slope for n in ("L1", "L2", "H1"))
    ok = l1 <= -0.85 and l2 <= -0.4 and h1 <= 0.05
    assert verdict(8, ok, f"L1 slope {l1:.3f} (<= -0.85); L2 {l2:.3f} (<= -0.4); H1 {h1:.3f} (<= 0.05)")


def test_c09_pointwise_decay(verdict):
    e = symmetric()
    mesh = build_slab(1.0, 2000, 1.008)
    data = SurfaceData.neumann(mesh, -1e-3)
    ratios = {}
    for beta in (1e4, 1e6):
        psi, _ = solve(mesh, e, data, beta)
        ratios[beta] = an.decay_fit(psi, mesh, beta) / math.sqrt(beta * e.phi_prime_zero())
    ok = all(abs(q - 1) <= 0.1 for q in ratios.values())
    detail = "; ".join(f"beta {b:g}: rate / sqrt(beta Phi'(0)) = {q:.5f}" for b, q in ratios.items())
    assert verdict(9, ok, detail + " (within 10%)")


def test_c10_envelopes_and_balance(verdict):
    checked, bad = 0, []
    for name in ("neumann_large_beta", "neumann_small_beta", "zero_mean_small_beta"):
        for d in preset(name).diagnostics:
            if "failure" in d:
                continue
            checked += 1
            if d["bound_violations"] or abs(d["balance_residual"]) > 1e-8 * max(1.0, d["beta"]):
                bad.append(f"{name} beta {d['beta']:g}")
    ok = checked > 0 and not bad
    assert verdict(10, ok, f"{checked} Neumann solves, {len(bad)} with envelope or balance violations"
                           + (f" ({', '.join(bad)})" if bad else ""))


def test_c11_disk(verdict):
    f = fit(preset("disk_large_beta"), "layer", "L2")
    nodes = load_config(CONFIGS / "disk_large_beta.ini").mesh().n_nodes
    assert verdict(11, f.slope <= -1.0, f"disk cell ({nodes} nodes) L2 slope {f.slope:.3f} (<= -1.0)")


def test_c12_determinism(verdict, tmp_path, capsys):
    cfg = str(CONFIGS / "neumann_large_beta.ini")
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        main(["sweep", "--config", cfg, "--out", str(out), "--threads", "1"])
    capsys.readouterr()
    same = all((outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in ("sweep.csv", "rates.csv"))
    assert verdict(12, same, "sweep.csv and rates.csv " + ("byte-identical" if same else "differ") + " across two runs")
