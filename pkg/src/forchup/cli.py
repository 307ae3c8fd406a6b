"""Command-line front end.

Subcommands::

    forchup generate  # fine k, phi, beta fields (CSV + VTK)
    forchup upscale   # coarse model JSON + one G* table CSV per distinct block
    forchup solve     # fine or coarse steady, basic-profile or transient solve
    forchup compare   # experiment sweeps as long and pivoted CSV tables
    forchup layered   # closed-form results for a layer stack CSV
    forchup pi        # fine and coarse productivity index of the basic profile

Every command writes ``manifest.json`` into ``--out``.  The exit status is
0 only if every stage converged; a failed stage prints its name and
returns 2.  Argument errors return 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import PRESETS, RunConfig, load_config
from .diagnostics import (
    Discretization,
    pi_pss,
    pi_transient,
    relative_error,
    run_transient,
    solve_basic_profile,
    velocity_error,
)
from .errors import ConvergenceError, ForchupError, StageError
from .experiments import (
    pressure_drop_bc,
    run_compressible,
    run_incompressible,
    run_transient_comparison,
    write_pivot_csv,
    write_rows_csv,
)
from .fem import solve_steady_nonlinear
from .forchheimer import GField
from .grid import (
    ScalarCellField,
    beta_from_k_contrast,
    porosity_from_k,
    read_field_csv,
    write_field_csv,
    write_vtk,
)
from .layered import (
    LayerStack,
    astar_perpendicular,
    betastar_parallel,
    betastar_parallel_limits,
    gstar_parallel,
    gstar_perpendicular,
    kstar_parallel,
    kstar_perpendicular,
)
from .upscaling import CoarseModel, FineModel, UpscaleOptions, upscale_all_blocks

log = logging.getLogger("forchup")

MODEL_FILE = "coarse_model.json"
FIELD_FILES = {"k": "k.csv", "phi": "phi.csv", "beta": "beta.csv"}


# -- fields ----------------------------------------------------------------------

def fine_fields(cfg: RunConfig) -> dict:
    """``k``, ``phi`` and ``beta`` on the fine grid.

    ``phi = phi_scale k^alpha`` with the first configured exponent.  Under the
    pressure-drop preset ``beta`` follows ``k`` affinely with the largest
    configured ``dbeta/beta_min``; under the well preset ``beta = phi/sqrt(k)``.
    A Darcy law gives ``beta = 0``.
    """
    grid = cfg.grid.fine()
    k = cfg.field.generate(grid)
    phi = porosity_from_k(k, cfg.alphas[0], cfg.phi_scale)
    if cfg.law == "darcy":
        beta = ScalarCellField(grid, np.zeros(grid.shape))
    elif cfg.bc == "pressure-drop":
        beta = beta_from_k_contrast(k, cfg.beta_min, max(cfg.ratios))
    else:
        beta = ScalarCellField(grid, phi.values / np.sqrt(k.values))
    return {"k": k, "phi": phi, "beta": beta}


def load_fine_model(cfg: RunConfig, fields_dir: Path) -> FineModel:
    grid = cfg.grid.fine()
    vals = {}
    for name, fname in FIELD_FILES.items():
        path = fields_dir / fname
        if not path.exists():
            raise ForchupError(f"missing {path}; run 'forchup generate' first")
        vals[name] = read_field_csv(path, grid).values
    gf = GField.darcy(grid.shape) if not np.any(vals["beta"]) else GField.two_term(vals["beta"])
    return FineModel(grid, vals["k"], gf, vals["phi"])


# -- manifest ----------------------------------------------------------------------

class Run:
    """Output directory, manifest and stage bookkeeping for one command."""

    def __init__(self, command: str, cfg: RunConfig, out: Path, argv):
        self.command, self.cfg, self.out = command, cfg, out
        self.out.mkdir(parents=True, exist_ok=True)
        self.outputs, self.stages = [], []
        self.argv = list(argv)
        self.t0 = time.time()

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out / name

    def stage(self, name: str, fn, *a, **kw):
        t = time.time()
        try:
            res = fn(*a, **kw)
        except (ForchupError, ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
            self.stages.append({"stage": name, "converged": False, "error": str(exc)})
            raise StageError(name, exc) from exc
        self.stages.append({"stage": name, "converged": True, "seconds": round(time.time() - t, 3)})
        return res

    def write_manifest(self, status: str) -> None:
        cfg = self.cfg
        (self.out / "config.ini").write_text(cfg.to_ini())
        manifest = {
            "command": self.command,
            "argv": self.argv,
            "status": status,
            "version": __version__,
            "config_sha256": cfg.digest(),
            "seed": cfg.field.seed,
            "tolerances": {
                "picard_tol": cfg.picard_tol, "picard_max_iter": cfg.picard_max_iter,
                "gstar": cfg.gstar.to_dict(), "range_factor": cfg.range_factor,
            },
            "stages": self.stages,
            "outputs": sorted(set(self.outputs)) + ["config.ini"],
            "python": platform.python_version(),
            "numpy": np.__version__,
            "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(self.t0)),
            "wall_seconds": round(time.time() - self.t0, 3),
        }
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


# -- commands ------------------------------------------------------------------------

def cmd_generate(run: Run, args) -> None:
    cfg = run.cfg
    fields = run.stage("generate", fine_fields, cfg)
    for name, f in fields.items():
        write_field_csv(run.path(FIELD_FILES[name]), f)
    write_vtk(run.path("fields.vtk"), cfg.grid.fine(), cell_data={n: f.values for n, f in fields.items()})
    k = fields["k"].values
    print(f"fine grid {cfg.grid.nx}x{cfg.grid.ny}, pattern {cfg.field.pattern}, "
          f"k in [{k.min():.6g}, {k.max():.6g}]")


def _upscale(run: Run, cfg: RunConfig, fm: FineModel, method="table", max_grad=None) -> CoarseModel:
    controls = cfg.gstar
    if max_grad is not None and cfg.range_factor is not None and controls.r_max is None:
        controls = replace(controls, r_max=cfg.range_factor * max_grad)
    if cfg.bc == "pressure-drop":
        drive = abs(cfg.p1 - cfg.p0) / cfg.grid.Lx
        controls = replace(controls, anchors=tuple(controls.anchors) + (drive,))
    opts = UpscaleOptions(cfg.variant, controls, method, cfg.workers)
    return run.stage("upscale", upscale_all_blocks, fm, cfg.grid.partition(), opts)


def _reference_solution(run: Run, cfg: RunConfig, fm: FineModel):
    """Fine solution whose gradients set the G* table range."""
    d = Discretization.from_fine(fm)
    kw = {"tol": cfg.picard_tol, "max_iter": cfg.picard_max_iter}
    if cfg.bc == "well":
        return run.stage("fine basic profile", solve_basic_profile, d, cfg.Q, cfg.gamma, cfg.well_face, **kw)
    return run.stage("fine solve", solve_steady_nonlinear, d.grid, d.tensor, d.mobility,
                     pressure_drop_bc(cfg.p0, cfg.p1), **kw)


def _max_grad(sol) -> float:
    g = sol.grad.reshape(-1, 2)
    return float(np.hypot(g[:, 0], g[:, 1]).max())


def cmd_upscale(run: Run, args) -> None:
    cfg = run.cfg
    fm = load_fine_model(cfg, Path(args.fields or run.out))
    max_grad = None
    if cfg.range_factor is not None and not fm.gfield.is_darcy:
        max_grad = _max_grad(_reference_solution(run, cfg, fm))
    coarse = _upscale(run, cfg, fm, args.gstar, max_grad)
    coarse.save(run.path(MODEL_FILE))
    seen = {}
    for b in coarse.blocks:
        if hasattr(b.gstar, "write_csv") and id(b.gstar) not in seen:
            seen[id(b.gstar)] = f"gstar_{b.index[0]}_{b.index[1]}.csv"
            b.gstar.write_csv(run.path(seen[id(b.gstar)]))
    ks = np.array([np.asarray(b.kstar) for b in coarse.blocks])
    print(f"{len(coarse.blocks)} blocks ({coarse.meta['unique_blocks']} distinct), variant {cfg.variant}, "
          f"k*_11 in [{ks[:, 0, 0].min():.6g}, {ks[:, 0, 0].max():.6g}], "
          f"k*_22 in [{ks[:, 1, 1].min():.6g}, {ks[:, 1, 1].max():.6g}], {len(seen)} G* tables")


def _discretization(cfg: RunConfig, scale: str, out: Path, fields_dir: Path) -> Discretization:
    fm = load_fine_model(cfg, fields_dir)
    if scale == "fine":
        return Discretization.from_fine(fm)
    path = out / MODEL_FILE
    if not path.exists():
        raise ForchupError(f"missing {path}; run 'forchup upscale' first")
    return Discretization.from_coarse(CoarseModel.load(path), cfg.refine)


def _write_solution(run: Run, stem: str, sol) -> None:
    with run.path(f"{stem}.csv").open("w") as fh:
        fh.write("node,x1,x2,p\n")
        for n, a, b, v in sol.nodes_csv_rows():
            fh.write(f"{n},{a!r},{b!r},{v!r}\n")
    write_vtk(run.path(f"{stem}.vtk"), sol.grid,
              cell_data={"u1": sol.velocity[..., 0], "u2": sol.velocity[..., 1], "G": sol.mobility},
              point_data={"p": sol.p})


def cmd_solve(run: Run, args) -> None:
    cfg = run.cfg
    d = _discretization(cfg, args.scale, run.out, Path(args.fields or run.out))
    kw = {"tol": cfg.picard_tol, "max_iter": cfg.picard_max_iter}
    stem = f"{args.scale}_{args.regime}"
    if args.regime == "steady":
        sol = run.stage(f"{args.scale} steady", solve_steady_nonlinear, d.grid, d.tensor, d.mobility,
                        pressure_drop_bc(cfg.p0, cfg.p1), **kw)
        _write_solution(run, stem, sol)
        u = sol.average_velocity()
        print(f"<u> = ({u[0]!r}, {u[1]!r}), Picard iterations {sol.iterations}")
        return
    W = run.stage(f"{args.scale} basic profile", solve_basic_profile, d, cfg.Q, cfg.gamma, cfg.well_face, **kw)
    rep = pi_pss(W, cfg.Q, cfg.well_face)
    if args.regime == "basic-profile":
        _write_solution(run, stem, W)
        print(f"J_PSS = {rep.J!r} (drawdown {rep.drawdown!r})")
        return
    amp = cfg.perturbation * float(np.max(np.abs(W.p)))
    X1, X2 = d.grid.node_coords()
    p0 = W.p + amp * np.cos(np.pi * X1 / d.grid.Lx) * np.cos(np.pi * X2 / d.grid.Ly)
    ts = run.stage(f"{args.scale} transient", run_transient, d, cfg.Q, p0, cfg.dt, cfg.T, gamma=cfg.gamma,
                   well_face=cfg.well_face, well_model=cfg.well_model, store_every=cfg.store_every, **kw)
    series = pi_transient(ts, cfg.Q, cfg.well_face)
    write_rows_csv(run.path(f"{stem}_J.csv"), [{"t": r.time, "J": r.J, "drawdown": r.drawdown} for r in series])
    _write_solution(run, stem, ts.states[-1])
    print(f"J(T) = {series[-1].J!r}, J_PSS = {rep.J!r}, relative gap {relative_error(rep.J, series[-1].J):.3e}")


def cmd_compare(run: Run, args) -> None:
    cfg = run.cfg
    kind = args.experiment or ("incompressible" if cfg.bc == "pressure-drop" else "compressible")
    if kind == "incompressible":
        rows = run.stage("incompressible sweep", run_incompressible, cfg.incompressible())
        write_rows_csv(run.path("incompressible_long.csv"), rows)
        write_pivot_csv(run.path("incompressible_table.csv"), rows, "label", "ratio", "vel_err", "method")
    elif kind in ("compressible", "variants"):
        c = cfg.compressible()
        if kind == "variants":
            c = replace(c, variants=("i", "ii", "iii", "iv"))
        rows = run.stage(f"{kind} sweep", run_compressible, c)
        write_rows_csv(run.path(f"{kind}_long.csv"), rows)
        for r in rows:
            r["case"] = f"{r['pattern']}/{r['law']}/{r['variant']}"
            r["alpha_label"] = f"{r['alpha']:.4g}"
        write_pivot_csv(run.path(f"{kind}_pi.csv"), rows, "case", "alpha_label", "pi_err", "case")
        write_pivot_csv(run.path(f"{kind}_vel.csv"), rows, "case", "alpha_label", "vel_err", "case")
    elif kind == "transient":
        res = run.stage("transient comparison", run_transient_comparison, cfg.transient())
        write_rows_csv(run.path("transient_series.csv"), res["series"])
        print(f"J_PSS fine {res['J_pss_fine']!r}, coarse {res['J_pss_coarse']!r}")
        rows = []
    else:
        raise ForchupError(f"unknown experiment {kind!r}")
    worst = max((r.get("vel_err", 0.0) for r in rows), default=0.0)
    print(f"{kind}: {len(rows)} rows, largest velocity error {worst:.3e}")


def cmd_layered(run: Run, args) -> None:
    stack = LayerStack.read_csv(args.stack)
    lines = [f"layers {stack.n}, H = {stack.H!r}",
             f"k*_parallel = {kstar_parallel(stack)!r}",
             f"k*_perpendicular = {kstar_perpendicular(stack)!r}"]
    if stack.exponents:
        lines.append("a*_perpendicular = " + ", ".join(
            f"{a!r} (s^{al:g})" for a, al in zip(astar_perpendicular(stack), stack.exponents)))
    if args.xi is not None:
        lines.append(f"G*_parallel(xi={args.xi!r}) = {gstar_parallel(stack, args.xi)!r}")
        if stack.exponents in ((), (1.0,)):
            lo, hi = betastar_parallel_limits(stack)
            lines.append(f"beta*_parallel(xi={args.xi!r}) = {betastar_parallel(stack, args.xi)!r}")
            lines.append(f"beta*_parallel limits: xi->0 {lo!r}, xi->inf {hi!r}")
    if args.Q is not None:
        G, xi_i = gstar_perpendicular(stack, args.Q, args.L)
        lines.append(f"G*_perpendicular(Q={args.Q!r}, L={args.L!r}) = {G!r}")
        lines.append("layer gradients = " + ", ".join(repr(float(x)) for x in xi_i))
    text = "\n".join(lines)
    run.path("layered.txt").write_text(text + "\n")
    print(text)


def cmd_pi(run: Run, args) -> None:
    cfg = run.cfg
    fields_dir = Path(args.fields or run.out)
    fine = _discretization(cfg, "fine", run.out, fields_dir)
    kw = {"tol": cfg.picard_tol, "max_iter": cfg.picard_max_iter}
    W = run.stage("fine basic profile", solve_basic_profile, fine, cfg.Q, cfg.gamma, cfg.well_face, **kw)
    J = pi_pss(W, cfg.Q, cfg.well_face).J
    rows = [{"scale": "fine", "J": J, "pi_err": 0.0, "vel_err": 0.0}]
    if (run.out / MODEL_FILE).exists():
        coarse = _discretization(cfg, "coarse", run.out, fields_dir)
        Wc = run.stage("coarse basic profile", solve_basic_profile, coarse, cfg.Q, cfg.gamma, cfg.well_face, **kw)
        Jc = pi_pss(Wc, cfg.Q, cfg.well_face).J
        rows.append({"scale": "coarse", "J": Jc, "pi_err": relative_error(J, Jc), "vel_err": velocity_error(W, Wc)})
    write_rows_csv(run.path("pi.csv"), rows)
    for r in rows:
        print(f"{r['scale']}: J_PSS = {r['J']!r}, PI error {r['pi_err']:.3e}, velocity error {r['vel_err']:.3e}")


COMMANDS = {"generate": cmd_generate, "upscale": cmd_upscale, "solve": cmd_solve,
            "compare": cmd_compare, "layered": cmd_layered, "pi": cmd_pi}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"INI file or preset name ({', '.join(sorted(PRESETS))})")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--seed", type=int, help="override the field seed")
    common.add_argument("--workers", type=int, help="worker processes (default: available cores)")
    common.add_argument("--variant", choices=("i", "ii", "iii", "iv"), help="upscaling variant")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="forchup", description="Upscaling of Forchheimer flow in porous media.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="generate fine k, phi, beta fields")
    s = sub.add_parser("upscale", parents=[common], help="upscale fine fields to a coarse model")
    s.add_argument("--fields", help="directory with the field CSVs (default: --out)")
    s.add_argument("--gstar", choices=("table", "parallel", "perpendicular", "none"), default="table",
                   help="how G* is obtained (default: adaptive table)")
    s = sub.add_parser("solve", parents=[common], help="fine or coarse solve")
    s.add_argument("--scale", choices=("fine", "coarse"), default="fine")
    s.add_argument("--regime", choices=("steady", "basic-profile", "transient"), default="steady")
    s.add_argument("--fields", help="directory with the field CSVs (default: --out)")
    s = sub.add_parser("compare", parents=[common], help="run an experiment sweep")
    s.add_argument("--experiment", choices=("incompressible", "compressible", "variants", "transient"))
    s = sub.add_parser("layered", parents=[common], help="closed-form layered results")
    s.add_argument("stack", help="CSV with columns thickness,k[,a_<alpha>...]")
    s.add_argument("--xi", type=float, help="gradient along the layers")
    s.add_argument("--Q", type=float, help="total flux across the layers")
    s.add_argument("--L", type=float, default=1.0, help="width carrying the flux Q")
    s = sub.add_parser("pi", parents=[common], help="fine and coarse productivity index")
    s.add_argument("--fields", help="directory with the field CSVs (default: --out)")
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        workers = args.workers if args.workers is not None else (cfg.workers or os.cpu_count() or 1)
        cfg = cfg.with_overrides(seed=args.seed, workers=workers, variant=args.variant)
        if args.variant:
            cfg = replace(cfg, variants=(args.variant,))
    except (ForchupError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    run = Run(args.command, cfg, Path(args.out), argv)
    try:
        COMMANDS[args.command](run, args)
    except (StageError, ConvergenceError) as exc:
        run.write_manifest("failed")
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ForchupError, OSError, ValueError) as exc:
        run.write_manifest("failed")
        print(f"error: {exc}", file=sys.stderr)
        return 1
    run.write_manifest("ok")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
