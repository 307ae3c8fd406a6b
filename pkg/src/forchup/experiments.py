"""Experiment drivers: incompressible sweeps, PI comparisons and transients.

Each driver takes a plain dataclass config, runs fine and coarse solves and
returns long-format rows (lists of dicts).  :func:`pivot` turns those rows
into the method-by-parameter layout of a results table.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .diagnostics import (
    Discretization,
    pi_pss,
    pi_transient,
    relative_error,
    run_transient,
    solve_basic_profile,
    velocity_deviation,
    velocity_error,
)
from .errors import DomainError, StageError
from .fem import PICARD_MAX_ITER, PICARD_TOL, BoundarySpec, Dirichlet, NoFlux, solve_steady_nonlinear
from .forchheimer import GField
from .grid import (
    BlockPartition,
    StructuredGrid,
    beta_from_k_contrast,
    beta_from_phi_k,
    generate_permeability,
    porosity_from_k,
)
from .upscaling import FineModel, GStarControls, UpscaleOptions, upscale_all_blocks

log = logging.getLogger(__name__)

METHODS = {"num": "table", "par": "parallel", "perp": "perpendicular"}
METHOD_LABELS = {"num": "Num", "par": "Av =>", "perp": "Av ^"}


@dataclass(frozen=True)
class FieldSpec:
    pattern: str = "random"
    k_min: float = 1.0
    contrast: float = 10.0
    layer_count: int = 2
    seed: int = 0
    profile: str = "alternating"

    def generate(self, grid: StructuredGrid):
        return generate_permeability(grid, self.pattern, self.k_min, self.contrast,
                                     self.layer_count, self.seed, self.profile)


@dataclass(frozen=True)
class GridSpec:
    nx: int = 100
    ny: int = 100
    mx: int = 10
    my: int = 10
    Lx: float = 1.0
    Ly: float = 1.0

    def fine(self) -> StructuredGrid:
        return StructuredGrid(self.nx, self.ny, self.Lx, self.Ly)

    def partition(self) -> BlockPartition:
        return BlockPartition(self.fine(), self.mx, self.my)


@dataclass(frozen=True)
class IncompressibleConfig:
    """Pressure drop ``p(0)=p0``, ``p(Lx)=p1`` across ``x1``, no-flux in ``x2``."""

    grid: GridSpec = GridSpec()
    field: FieldSpec = FieldSpec()
    beta_min: float = 8e-6
    ratios: tuple = (0.0, 1.0, 10.0, 100.0)
    methods: tuple = ("par", "perp", "num")
    p0: float = 0.0
    p1: float = 1.0
    refine: int = 4
    controls: GStarControls = GStarControls()
    range_factor: Optional[float] = 4.0
    workers: int = 1
    tol: float = PICARD_TOL
    max_iter: int = PICARD_MAX_ITER


@dataclass(frozen=True)
class CompressibleConfig:
    """Basic-profile comparison with the well on one face."""

    grid: GridSpec = GridSpec(64, 64, 2, 2)
    field: FieldSpec = FieldSpec(layer_count=64)
    patterns: tuple = ("vertical-stratified", "horizontal-stratified", "random", "linear")
    alphas: tuple = (1 / 3, 1 / 4, 1 / 5)
    laws: tuple = ("darcy", "two-term")
    variants: tuple = ("i",)
    phi_scale: float = 0.1
    Q: float = 50.0
    gamma: float = 1.0
    well_face: str = "right"
    refine: int = 8
    controls: GStarControls = GStarControls()
    range_factor: Optional[float] = 4.0
    workers: int = 1
    tol: float = PICARD_TOL
    max_iter: int = PICARD_MAX_ITER


@dataclass(frozen=True)
class TransientConfig:
    grid: GridSpec = GridSpec(64, 64, 2, 2)
    field: FieldSpec = FieldSpec(pattern="random", seed=0)
    alpha: float = 1 / 3
    law: str = "two-term"
    variant: str = "i"
    phi_scale: float = 0.1
    Q: float = 50.0
    gamma: float = 1.0
    well_face: str = "right"
    well_model: str = "equipotential"
    dt: float = 0.001
    T: float = 0.1
    store_every: int = 1
    perturbation: float = 0.5
    refine: int = 8
    controls: GStarControls = GStarControls()
    range_factor: Optional[float] = 4.0
    workers: int = 1
    tol: float = PICARD_TOL
    max_iter: int = PICARD_MAX_ITER


# -- helpers -----------------------------------------------------------------

def _gfield_for_ratio(k, beta_min, ratio):
    if ratio == 0:
        return GField.darcy(k.grid.shape)
    return GField.two_term(beta_from_k_contrast(k, beta_min, ratio).values)


def _controls_for(controls: GStarControls, max_grad: float, range_factor, anchors=()):
    kw = {}
    if range_factor is not None and controls.r_max is None:
        kw["r_max"] = range_factor * max_grad
    if anchors:
        kw["anchors"] = tuple(controls.anchors) + tuple(anchors)
    return replace(controls, **kw) if kw else controls


def _max_grad(sol) -> float:
    g = sol.grad.reshape(-1, 2)
    return float(np.hypot(g[:, 0], g[:, 1]).max())


def _check_range(coarse, sol):
    """Warn if coarse gradients left the tabulated range."""
    rmax = _max_grad(sol)
    for b in coarse.blocks:
        radii = getattr(b.gstar, "radii", None)
        if radii is not None and radii.size > 1 and rmax > radii[-1] * (1 + 1e-9):
            log.warning("coarse gradient %.3g exceeds G* table range %.3g (clamped)", rmax, radii[-1])
            return False
    return True


def pressure_drop_bc(p0: float, p1: float) -> BoundarySpec:
    return BoundarySpec(Dirichlet(p0), Dirichlet(p1), NoFlux(), NoFlux())


def _stage(name, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


# -- incompressible ----------------------------------------------------------

def run_incompressible(cfg: IncompressibleConfig) -> list:
    """Velocity errors per method and ``dbeta/beta_min``.

    Returns rows ``{method, ratio, vel_err, u_fine, u_coarse, ...}``.
    """
    part = cfg.grid.partition()
    fine_grid = part.fine
    k = cfg.field.generate(fine_grid)
    bc = pressure_drop_bc(cfg.p0, cfg.p1)
    drive = abs(cfg.p1 - cfg.p0) / fine_grid.Lx
    rows = []
    for ratio in cfg.ratios:
        gf = _gfield_for_ratio(k, cfg.beta_min, ratio)
        fm = FineModel(fine_grid, k.values, gf)
        fine = _stage(f"fine solve ratio={ratio}", solve_steady_nonlinear,
                      fine_grid, k.values, fm.mobility(), bc, tol=cfg.tol, max_iter=cfg.max_iter)
        controls = _controls_for(cfg.controls, _max_grad(fine), cfg.range_factor, (drive,))
        for m in cfg.methods:
            if m not in METHODS:
                raise DomainError(f"unknown method {m!r}")
            opts = UpscaleOptions("i", controls, METHODS[m], cfg.workers)
            coarse = _stage(f"upscale {m} ratio={ratio}", upscale_all_blocks, fm, part, opts)
            disc = Discretization.from_coarse(coarse, cfg.refine)
            csol = _stage(f"coarse solve {m} ratio={ratio}", solve_steady_nonlinear,
                          disc.grid, disc.tensor, disc.mobility, bc, tol=cfg.tol, max_iter=cfg.max_iter)
            _check_range(coarse, csol)
            rows.append({
                "method": m, "label": METHOD_LABELS[m], "ratio": ratio,
                "vel_err": velocity_error(fine, csol),
                "u_fine": fine.average_velocity().tolist(), "u_coarse": csol.average_velocity().tolist(),
                "fine_iterations": fine.iterations, "coarse_iterations": csol.iterations,
                "unique_blocks": coarse.meta["unique_blocks"],
            })
            log.info("ratio=%g method=%s vel_err=%.3e", ratio, m, rows[-1]["vel_err"])
    return rows


# -- slightly compressible ---------------------------------------------------

def build_fine_model(grid: StructuredGrid, field: FieldSpec, alpha: float, law: str, phi_scale: float = 0.1):
    k = field.generate(grid)
    phi = porosity_from_k(k, alpha, phi_scale)
    if law == "darcy":
        gf = GField.darcy(grid.shape)
    elif law == "two-term":
        gf = GField.two_term(beta_from_phi_k(phi, k).values)
    else:
        raise DomainError(f"unknown law {law!r}")
    return FineModel(grid, k.values, gf, phi.values)


def compare_basic_profiles(fm: FineModel, part: BlockPartition, variant: str, Q: float, gamma: float,
                           well_face: str, refine: int, controls: GStarControls, range_factor, workers=1,
                           fine_solution=None, solver_kw=None) -> dict:
    """Fine vs coarse basic profile: PI and average-velocity errors."""
    solver_kw = solver_kw or {}
    fine_d = Discretization.from_fine(fm)
    W = fine_solution or _stage("fine basic profile", solve_basic_profile, fine_d, Q, gamma, well_face, **solver_kw)
    J = pi_pss(W, Q, well_face).J
    ctrl = _controls_for(controls, _max_grad(W), range_factor)
    coarse = _stage("upscale", upscale_all_blocks, fm, part, UpscaleOptions(variant, ctrl, "table", workers))
    cd = Discretization.from_coarse(coarse, refine)
    Wc = _stage("coarse basic profile", solve_basic_profile, cd, Q, gamma, well_face, **solver_kw)
    _check_range(coarse, Wc)
    Jc = pi_pss(Wc, Q, well_face).J
    return {"pi_err": relative_error(J, Jc), "vel_err": velocity_error(W, Wc), "J_fine": J, "J_coarse": Jc,
            "coarse": coarse, "W": W, "Wc": Wc}


def _max_flux_residual(coarse) -> float:
    """Largest face-flux residual of the porosity fits (0 without them)."""
    vals = [b.diagnostics.get("phi_flux_residual", 0.0) for b in coarse.blocks]
    return float(max(vals, default=0.0))


def run_compressible(cfg: CompressibleConfig) -> list:
    """PI and velocity errors per pattern, law, porosity exponent and variant."""
    part = cfg.grid.partition()
    skw = {"tol": cfg.tol, "max_iter": cfg.max_iter}
    rows = []
    for pattern in cfg.patterns:
        fs = replace(cfg.field, pattern=pattern)
        for law in cfg.laws:
            for alpha in cfg.alphas:
                fm = build_fine_model(part.fine, fs, alpha, law, cfg.phi_scale)
                W = _stage("fine basic profile", solve_basic_profile, Discretization.from_fine(fm),
                           cfg.Q, cfg.gamma, cfg.well_face, **skw)
                for variant in cfg.variants:
                    res = compare_basic_profiles(fm, part, variant, cfg.Q, cfg.gamma, cfg.well_face, cfg.refine,
                                                 cfg.controls, cfg.range_factor, cfg.workers, fine_solution=W,
                                                 solver_kw=skw)
                    rows.append({"pattern": pattern, "law": law, "alpha": alpha, "variant": variant,
                                 "pi_err": res["pi_err"], "vel_err": res["vel_err"],
                                 "J_fine": res["J_fine"], "J_coarse": res["J_coarse"],
                                 "phi_flux_residual": _max_flux_residual(res["coarse"])})
                    log.info("%s %s alpha=%.3f (%s): PI %.2e vel %.2e", pattern, law, alpha, variant,
                             res["pi_err"], res["vel_err"])
    return rows


# -- transient ---------------------------------------------------------------

def _perturbation(grid: StructuredGrid, amplitude: float) -> np.ndarray:
    X1, X2 = grid.node_coords()
    return amplitude * np.cos(np.pi * (X1 - grid.x0) / grid.Lx) * np.cos(np.pi * (X2 - grid.y0) / grid.Ly)


def run_transient_comparison(cfg: TransientConfig) -> dict:
    """Fine and coarse ``J(t)`` from perturbed basic profiles.

    Returns the time series plus ``J_PSS`` on both scales and the decay of
    ``int |u(t) - u_s|^2`` on the fine scale.
    """
    part = cfg.grid.partition()
    fm = build_fine_model(part.fine, cfg.field, cfg.alpha, cfg.law, cfg.phi_scale)
    skw = {"tol": cfg.tol, "max_iter": cfg.max_iter}
    res = compare_basic_profiles(fm, part, cfg.variant, cfg.Q, cfg.gamma, cfg.well_face, cfg.refine,
                                 cfg.controls, cfg.range_factor, cfg.workers, solver_kw=skw)
    W, Wc = res["W"], res["Wc"]
    fine_d = Discretization.from_fine(fm)
    coarse_d = Discretization.from_coarse(res["coarse"], cfg.refine)
    amp = cfg.perturbation * float(np.max(np.abs(W.p)))
    p0f = W.p + _perturbation(fine_d.grid, amp)
    p0c = Wc.p + _perturbation(coarse_d.grid, amp)
    kw = dict(gamma=cfg.gamma, well_face=cfg.well_face, well_model=cfg.well_model, store_every=cfg.store_every,
              **skw)
    tf = _stage("fine transient", run_transient, fine_d, cfg.Q, p0f, cfg.dt, cfg.T, **kw)
    tc = _stage("coarse transient", run_transient, coarse_d, cfg.Q, p0c, cfg.dt, cfg.T, **kw)
    Jf = pi_transient(tf, cfg.Q, cfg.well_face)
    Jc = pi_transient(tc, cfg.Q, cfg.well_face)
    dev = np.array([velocity_deviation(s, W.velocity) for s in tf.states])
    series = [{"t": a.time, "J_fine": a.J, "J_coarse": b.J, "dev_fine": float(d / dev[0]) if dev[0] > 0 else 0.0}
              for a, b, d in zip(Jf, Jc, dev[1:])]
    return {"series": series, "J_pss_fine": res["J_fine"], "J_pss_coarse": res["J_coarse"],
            "dev0": float(dev[0]), "pi_err": res["pi_err"], "vel_err": res["vel_err"]}


# -- output ------------------------------------------------------------------

def write_rows_csv(path, rows, columns=None) -> None:
    rows = list(rows)
    if not rows:
        Path(path).write_text("")
        return
    columns = columns or [c for c in rows[0] if not isinstance(rows[0][c], (list, dict))]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def pivot(rows, index, columns, value) -> tuple[list, list, np.ndarray]:
    """``(row_keys, col_keys, table)`` with keys in first-seen order."""
    rk, ck = [], []
    for r in rows:
        if r[index] not in rk:
            rk.append(r[index])
        if r[columns] not in ck:
            ck.append(r[columns])
    tab = np.full((len(rk), len(ck)), math.nan)
    for r in rows:
        tab[rk.index(r[index]), ck.index(r[columns])] = r[value]
    return rk, ck, tab


def write_pivot_csv(path, rows, index, columns, value, index_label=None) -> None:
    rk, ck, tab = pivot(rows, index, columns, value)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([index_label or index] + [str(c) for c in ck])
        for key, line in zip(rk, tab):
            w.writerow([key] + [f"{v:.3e}" for v in line])
