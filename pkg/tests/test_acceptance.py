"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The sweeps run at desk scale (100x100 fine / 10x10 coarse for the
pressure-drop experiments, 64x64 / 2x2 for the well experiments).
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from forchup.config import preset
from forchup.diagnostics import Discretization, pi_pss, pi_transient, run_transient, solve_basic_profile
from forchup.experiments import (
    GridSpec,
    TransientConfig,
    build_fine_model,
    run_compressible,
    run_incompressible,
    run_transient_comparison,
)
from forchup.forchheimer import GPolynomial, eval_G, eval_G_twoterm, eval_h, invert_h
from forchup.grid import StructuredGrid
from forchup.forchheimer import GField
from forchup.upscaling import BlockData, build_gstar_table

pytestmark = pytest.mark.slow

AV_PERP_REFERENCE = {1.0: 5.36e-4, 10.0: 2.36e-3, 100.0: 1.7e-2}
EXACT = 1e-6


def _errors(rows):
    return {(r["method"], r["ratio"]): r["vel_err"] for r in rows}


@pytest.fixture(scope="module")
def horizontal_rows():
    return run_incompressible(preset("pressure-drop-desk").incompressible())


@pytest.fixture(scope="module")
def vertical_rows():
    cfg = preset("pressure-drop-desk")
    cfg = replace(cfg, field=replace(cfg.field, pattern="vertical-stratified"))
    return run_incompressible(cfg.incompressible())


def _random_poly(rng):
    kind = rng.integers(4)
    a = 10.0 ** rng.uniform(-3, 2, 3)
    if kind == 0:
        return GPolynomial.two_term(a[0])
    if kind == 1:
        return GPolynomial.three_term(a[0], a[1])
    if kind == 2:
        return GPolynomial.power_law(a[0], rng.uniform(1.1, 3.0))
    return GPolynomial(((a[0], 0.5), (a[1], 1.0), (a[2], 2.5)))


def test_criterion_1_inversion(verdict):
    rng = np.random.default_rng(0)
    t0 = time.time()
    worst_rt = worst_g = 0.0
    for _ in range(10_000):
        poly = _random_poly(rng)
        s = 10.0 ** rng.uniform(-8, 4)
        worst_rt = max(worst_rt, abs(invert_h(eval_h(s, poly), poly) - s) / s)
        beta, xi = 10.0 ** rng.uniform(-3, 2), 10.0 ** rng.uniform(-8, 6)
        G = eval_G(xi, GPolynomial.two_term(beta))
        worst_g = max(worst_g, abs(G - eval_G_twoterm(xi, beta)) / G)
    dt = time.time() - t0
    ok = worst_rt <= 1e-10 and worst_g <= 1e-12 and dt < 10
    verdict(1, ok, f"round trip {worst_rt:.1e}, two-term {worst_g:.1e}, {dt:.1f} s for 10^4 samples")
    assert ok


def test_criterion_2_parallel_exactness(horizontal_rows, verdict):
    err = _errors(horizontal_rows)
    worst = max(v for (m, _), v in err.items() if m in ("num", "par"))
    ok = worst <= EXACT
    verdict(2, ok, f"horizontal layers, Num and Av-parallel worst velocity error {worst:.1e}")
    assert ok


def test_criterion_3_perpendicular_cross_error(horizontal_rows, verdict):
    err = _errors(horizontal_rows)
    vals = [err["perp", r] for r in sorted(AV_PERP_REFERENCE)]
    ratios = [v / AV_PERP_REFERENCE[r] for v, r in zip(vals, sorted(AV_PERP_REFERENCE))]
    ok = (all(v > EXACT for v in vals) and all(np.diff(vals) > 0)
          and all(0.2 <= q <= 5.0 for q in ratios))
    verdict(3, ok, "Av-perpendicular errors " + ", ".join(f"{v:.2e}" for v in vals)
            + " (ratio to reference " + ", ".join(f"{q:.2f}" for q in ratios) + ")")
    assert ok


def test_criterion_4_vertical_mirror(vertical_rows, verdict):
    err = _errors(vertical_rows)
    exact = max(v for (m, _), v in err.items() if m in ("num", "perp"))
    cross = [v for (m, r), v in err.items() if m == "par" and r > 0]
    ok = exact <= EXACT and all(EXACT < v < 1e-2 for v in cross)
    verdict(4, ok, f"vertical layers, Num and Av-perpendicular worst {exact:.1e}, "
            f"Av-parallel {min(cross):.2e} to {max(cross):.2e}")
    assert ok


def _table_blocks():
    g = StructuredGrid(20, 20)
    rng = np.random.default_rng(5)
    k_rand = rng.uniform(1, 11, g.shape)
    k_lay = np.where(np.arange(20)[:, None] < 10, 1.0, 11.0) * np.ones(g.shape)
    out = {"homogeneous": (np.full(g.shape, 3.0), np.full(g.shape, 0.5)),
           "random": (k_rand, 0.1 * k_rand ** (1 / 3) / np.sqrt(k_rand)),
           "horizontal": (k_lay, np.where(k_lay > 1, 8e-6 * 101, 8e-6)),
           "vertical": (k_lay.T.copy(), np.where(k_lay.T > 1, 0.05, 0.5))}
    return {name: BlockData(g, k, GField.two_term(b)) for name, (k, b) in out.items()}


def test_criterion_5_table_properties(verdict):
    rng = np.random.default_rng(6)
    xi = rng.normal(size=(500, 2)) * 10.0 ** rng.uniform(-4, 4, (500, 1))
    problems, times = [], []
    for name, block in _table_blocks().items():
        t0 = time.time()
        t = build_gstar_table(block)
        times.append(time.time() - t0)
        if t.evaluate(np.zeros((1, 2)))[0] != 1.0:
            problems.append(f"{name}: G*(0) != 1")
        if not np.all((t.values > 0) & (t.values <= 1)):
            problems.append(f"{name}: values outside (0, 1]")
        if np.any(np.diff(t.diagonal) > 0):
            problems.append(f"{name}: diagonal increases")
        if not np.array_equal(t.evaluate(xi), t.evaluate(-xi)):
            problems.append(f"{name}: not symmetric")
        if name == "homogeneous":
            X1, X2, V = t.sample_points()
            ref = np.vectorize(eval_G_twoterm)(3.0 * np.hypot(X1, X2), 0.5)
            dev = float(np.abs(V - ref).max())
            if dev > 1e-6:
                problems.append(f"homogeneous deviates by {dev:.1e}")
    ok = not problems
    verdict(5, ok, f"4 tables on 20x20 blocks, {max(times):.1f} s per block at most"
            + ("" if ok else "; " + "; ".join(problems)))
    assert ok


def test_criterion_6_random_field(verdict):
    base = preset("pressure-drop-desk")
    field = replace(base.field, pattern="random", seed=1)
    details, ok = [], True
    for aspect in (0.1, 1.0, 10.0):
        grid = replace(base.grid, Ly=base.grid.Lx / aspect)
        rows = run_incompressible(replace(base, grid=grid, field=field).incompressible())
        err = _errors(rows)
        num = max(v for (m, _), v in err.items() if m == "num")
        darcy = [err[m, 0.0] for m in ("num", "par", "perp")]
        spread = max(darcy) - min(darcy)
        ok &= num < 5e-2 and spread <= 1e-12 * max(darcy)
        details.append(f"aspect {aspect:g}: Num worst {num:.2e}, Darcy {darcy[0]:.2e} (spread {spread:.0e})")
    verdict(6, ok, "; ".join(details))
    assert ok


def test_criterion_7_compressible_suite(verdict):
    rows = run_compressible(preset("well-desk").compressible())
    bad = [r for r in rows if not (r["pi_err"] < 5e-2 and r["vel_err"] < 5e-2)]
    worst_pi = max(r["pi_err"] for r in rows)
    worst_vel = max(r["vel_err"] for r in rows)
    detail = f"{len(rows)} cases, worst PI {worst_pi:.2e}, worst velocity {worst_vel:.2e}"
    if bad:
        detail += "; over 5e-2: " + ", ".join(
            f"{r['pattern']}/{r['law']}/a={r['alpha']:.3g} PI {r['pi_err']:.2e}" for r in bad)
    verdict(7, not bad, detail)
    assert not bad


def test_criterion_8_pss_invariance(verdict):
    cfg = preset("well-desk")
    grid = cfg.grid.fine()
    fm = build_fine_model(grid, replace(cfg.field, pattern="random"), 1 / 3, "two-term", cfg.phi_scale)
    d = Discretization.from_fine(fm)
    W = solve_basic_profile(d, cfg.Q, cfg.gamma, cfg.well_face)
    Jpss = pi_pss(W, cfg.Q, cfg.well_face).J
    dt = cfg.dt
    ts = run_transient(d, cfg.Q, W.p, dt, 10 * dt, gamma=cfg.gamma, well_face=cfg.well_face)
    rate = -cfg.gamma * cfg.Q / grid.area
    rate_dev = max(float(np.abs((b.p - a.p) / dt - rate).max() / abs(rate))
                   for a, b in zip(ts.states[:-1], ts.states[1:]))
    j_dev = max(abs(r.J - Jpss) / Jpss for r in pi_transient(ts, cfg.Q, cfg.well_face))
    ok = rate_dev <= 1e-6 and j_dev <= 1e-6
    verdict(8, ok, f"gamma = {cfg.gamma:g}: decline rate deviation {rate_dev:.1e}, J deviation {j_dev:.1e}")
    assert ok


def test_criterion_9_transient_attraction(verdict):
    res = run_transient_comparison(TransientConfig(grid=GridSpec(64, 64, 2, 2)))
    s = res["series"]
    last = s[-1]
    dev = last["dev_fine"]
    j_gap = abs(last["J_fine"] - res["J_pss_fine"]) / res["J_pss_fine"]
    late = s[len(s) // 2:]
    fc_gap = max(abs(r["J_fine"] - r["J_coarse"]) / r["J_fine"] for r in late)
    ok = dev < 1e-2 and j_gap < 1e-2 and fc_gap < 5e-2
    verdict(9, ok, f"t = {last['t']:.3g}: velocity deviation {dev:.1e} of initial, "
            f"|J - J_PSS|/J_PSS {j_gap:.1e}, fine/coarse J gap {fc_gap:.1e} over the second half")
    assert ok


def test_criterion_10_variants(verdict):
    cfg = replace(preset("well-desk").compressible(), variants=("i", "ii", "iii", "iv"), alphas=(1 / 3,))
    rows = run_compressible(cfg)
    patterns = {r["pattern"] for r in rows}
    complete = len(rows) == 4 * 2 * 4 and len(patterns) == 4
    resid = max(r["phi_flux_residual"] for r in rows if r["variant"] in ("iii", "iv"))
    vert = {r["variant"]: r["pi_err"] for r in rows
            if r["pattern"] == "vertical-stratified" and r["law"] == "darcy"}
    ok = complete and resid < 1e-8 and vert["iv"] <= vert["i"]
    verdict(10, ok, f"{len(rows)} runs over {len(patterns)} patterns, face-flux residual {resid:.1e}, "
            f"vertical Darcy PI (iv) {vert['iv']:.2e} vs (i) {vert['i']:.2e}")
    assert ok
