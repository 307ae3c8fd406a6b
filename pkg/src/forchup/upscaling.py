"""Coarse-block upscaling of permeability, porosity and nonlinear mobility.

Each coarse block is handled independently:

1. ``k*`` from two linear cell problems (Dirichlet 0/1 across one pair of
   faces, periodic across the other), ``<u_i> = -k* <grad p_i>``.
2. ``G*`` tabulated over coarse gradients ``xi`` from nonlinear cell problems
   with affine data ``p = xi . x``.

Polynomial variants of ``k*`` and ``Phi*`` refine the constant ones using a
least-squares linear fit of ``k`` and face-flux matching for ``Phi``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConvergenceError, DomainError, MaxIterationsExceeded, SolverError, StageError
from .fem import (
    Assembler,
    BoundarySpec,
    Dirichlet,
    DofMap,
    FineMobility,
    Periodic,
    as_tensor,
    boundary_fluxes,
    solve_linear_elliptic,
    solve_steady_nonlinear,
)
from .forchheimer import GField
from .grid import BlockPartition, StructuredGrid

log = logging.getLogger(__name__)

VARIANTS = ("i", "ii", "iii", "iv")
LOCAL_BCS = ("periodic", "dirichlet")
NORMALIZATIONS = ("linear", "kstar")


# -- fine data ---------------------------------------------------------------

@dataclass(frozen=True)
class BlockData:
    """Fine-scale data restricted to one coarse block."""

    grid: StructuredGrid
    k: np.ndarray          # (ny, nx)
    gfield: GField         # cell shape (ny, nx)
    phi: Optional[np.ndarray] = None

    @property
    def center(self) -> tuple[float, float]:
        return self.grid.center

    def content_key(self) -> str:
        """Hash of everything that determines the upscaled parameters."""
        h = hashlib.sha256()
        g = self.grid
        h.update(np.array([g.nx, g.ny, g.Lx, g.Ly], dtype=float).tobytes())
        h.update(np.ascontiguousarray(self.k, dtype=float).tobytes())
        h.update(np.array(self.gfield.exponents, dtype=float).tobytes())
        h.update(np.ascontiguousarray(self.gfield.coefficients, dtype=float).tobytes())
        if self.phi is not None:
            h.update(np.ascontiguousarray(self.phi, dtype=float).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class FineModel:
    """Fine grid with permeability, porosity and per-cell g-polynomials."""

    grid: StructuredGrid
    k: np.ndarray
    gfield: GField
    phi: Optional[np.ndarray] = None

    def __post_init__(self):
        if np.shape(self.k) != self.grid.shape or self.gfield.shape != self.grid.shape:
            raise DomainError("fine model arrays do not match the grid")
        if self.phi is not None and np.shape(self.phi) != self.grid.shape:
            raise DomainError("porosity does not match the grid")

    def block(self, part: BlockPartition, bi: int, bj: int) -> BlockData:
        rows, cols = part.block_slices(bi, bj)
        phi = None if self.phi is None else np.asarray(self.phi)[rows, cols]
        return BlockData(part.block_grid(bi, bj), np.asarray(self.k)[rows, cols],
                         self.gfield.take((rows, cols)), phi)

    def mobility(self) -> FineMobility:
        return FineMobility(self.k, self.gfield)


def _relative_coords(grid: StructuredGrid):
    X1, X2 = grid.node_coords()
    return (X1 - grid.x0).ravel(), (X2 - grid.y0).ravel()


# -- step 1: k* --------------------------------------------------------------

def _mixed_bc(direction: int) -> BoundarySpec:
    per = Periodic()
    if direction == 0:
        return BoundarySpec(Dirichlet(0.0), Dirichlet(1.0), per, per)
    return BoundarySpec(per, per, Dirichlet(0.0), Dirichlet(1.0))


def cell_problem_averages(grid: StructuredGrid, coef):
    """Average velocities and gradients of the two mixed cell problems.

    Returns ``(U, Gr)`` with one column per problem.
    """
    U = np.zeros((2, 2))
    Gr = np.zeros((2, 2))
    for d in range(2):
        sol = solve_linear_elliptic(grid, coef, _mixed_bc(d))
        U[:, d] = sol.average_velocity()
        Gr[:, d] = sol.grad.reshape(-1, 2).mean(axis=0)
    return U, Gr


def upscale_k_linear(block: BlockData, return_diagnostics: bool = False):
    """Constant upscaled tensor ``k* = -U Gr^{-1}``."""
    U, Gr = cell_problem_averages(block.grid, block.k)
    if abs(np.linalg.det(Gr)) <= 1e-14 * max(np.abs(Gr).max(), 1e-300) ** 2:
        raise SolverError("average gradients of the cell problems are linearly dependent")
    kstar = -U @ np.linalg.inv(Gr)
    sym = 0.5 * (kstar + kstar.T)
    if np.any(np.linalg.eigvalsh(sym) <= 0):
        raise SolverError(f"upscaled tensor is not positive definite: {kstar.tolist()}")
    if return_diagnostics:
        asym = float(np.abs(kstar - kstar.T).max() / np.abs(kstar).max())
        return kstar, {"asymmetry": asym, "U": U, "grad": Gr}
    return kstar


def upscale_phi_const(block: BlockData) -> float:
    if block.phi is None:
        raise DomainError("block has no porosity")
    return float(np.mean(block.phi))


def periodic_response(grid: StructuredGrid, coef) -> np.ndarray:
    """Linear tensor ``K`` with ``<u> = -K xi`` under affine-periodic data."""
    K = np.zeros((2, 2))
    for d in range(2):
        xi = np.eye(2)[d]
        sol = solve_linear_elliptic(grid, coef, BoundarySpec.affine_periodic(xi))
        K[:, d] = -sol.average_velocity()
    return K


# -- step 2: G* table --------------------------------------------------------

@dataclass(frozen=True)
class GStarControls:
    """Controls of the adaptive ``G*`` sampling.

    ``eta1``/``eta2`` and the slope test are expressed in units of
    ``xi_ref = 1/(max a_1 * max k)`` unless given explicitly.  ``r_max``
    adds a second stopping branch: sampling ends once the table covers
    ``|xi| <= r_max``.  ``anchors`` are gradient magnitudes that become levels.
    """

    eps_n: float = 0.1
    eps: float = 1e-3
    eps_d: float = 1e-4
    eta1: Optional[float] = None
    eta2: Optional[float] = None
    xi_ref: Optional[float] = None
    n_angles: int = 9
    max_levels: int = 400
    max_bisect: int = 20
    local_bc: str = "periodic"
    normalization: str = "linear"
    anchors: tuple = ()
    r_max: Optional[float] = None
    picard_tol: float = 1e-8
    picard_max_iter: int = 200

    def __post_init__(self):
        for name in ("eps_n", "eps", "eps_d"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")
        if self.n_angles < 5 or (self.n_angles - 1) % 4:
            raise DomainError("n_angles must be 4m+1 (>= 5) so the diagonal is sampled")
        if self.local_bc not in LOCAL_BCS:
            raise DomainError(f"local_bc must be one of {LOCAL_BCS}")
        if self.normalization not in NORMALIZATIONS:
            raise DomainError(f"normalization must be one of {NORMALIZATIONS}")
        if self.eta1 is not None and self.eta2 is not None and not 0 < self.eta1 < self.eta2:
            raise DomainError("need 0 < eta1 < eta2")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["anchors"] = list(self.anchors)
        return d

    @classmethod
    def from_dict(cls, d) -> "GStarControls":
        d = dict(d)
        d["anchors"] = tuple(d.get("anchors", ()))
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


class GStarTable:
    """``G*`` sampled on rays from the origin.

    Samples sit at radii ``r_0 = 0 < r_1 < ...`` (``r = |xi|``) and angles
    ``theta_j = j pi/(n-1)`` in ``[0, pi]``; the lower half plane follows from
    ``G*(xi) = G*(-xi)``.  Radius ``r_n = sqrt(2) eta_n`` puts the diagonal
    point ``(eta_n, eta_n)`` on the grid.  Interpolation is bilinear in
    ``(r, theta)`` and clamps beyond the last level.
    """

    def __init__(self, radii, angles, values, meta=None):
        self.radii = np.asarray(radii, dtype=float)
        self.angles = np.asarray(angles, dtype=float)
        self.values = np.asarray(values, dtype=float)
        self.meta = dict(meta or {})
        if self.radii.size == 0 or self.values.size == 0:
            raise DomainError("empty G* table")
        if self.radii[0] != 0.0 or np.any(np.diff(self.radii) <= 0):
            raise DomainError("radii must start at 0 and increase strictly")
        if self.values.shape != (self.radii.size, self.angles.size):
            raise DomainError("values shape does not match radii x angles")
        for a in (self.radii, self.angles, self.values):
            a.setflags(write=False)

    @classmethod
    def trivial(cls, n_angles=9, **meta) -> "GStarTable":
        angles = np.linspace(0.0, np.pi, n_angles)
        meta.setdefault("degenerate", True)
        return cls([0.0], angles, np.ones((1, n_angles)), meta)

    @property
    def is_trivial(self) -> bool:
        return bool(np.all(self.values == 1.0))

    @property
    def etas(self) -> np.ndarray:
        return self.radii / math.sqrt(2.0)

    @property
    def diagonal_index(self) -> int:
        return (self.angles.size - 1) // 4

    @property
    def diagonal(self) -> np.ndarray:
        """Stored values at ``(eta_n, eta_n)``."""
        return self.values[:, self.diagonal_index]

    def sample_points(self):
        """All stored ``(xi1, xi2, value)`` triples, level-major."""
        R, T = np.meshgrid(self.radii, self.angles, indexing="ij")
        return R * np.cos(T), R * np.sin(T), self.values

    def evaluate(self, xi) -> np.ndarray:
        """Vectorized ``G*`` for points ``xi`` of shape ``(..., 2)``."""
        xi = np.asarray(xi, dtype=float)
        shape = xi.shape[:-1]
        x = xi.reshape(-1, 2)
        if self.radii.size == 1 or self.is_trivial:
            return np.ones(shape)
        # fold onto the upper half plane first so G*(xi) = G*(-xi) holds bitwise
        flip = (x[:, 1] < 0) | ((x[:, 1] == 0) & (x[:, 0] < 0))
        x = np.where(flip[:, None], -x, x)
        r = np.hypot(x[:, 0], x[:, 1])
        th = np.clip(np.arctan2(x[:, 1], x[:, 0]), 0.0, np.pi)
        rr, aa, V = self.radii, self.angles, self.values

        r = np.minimum(r, rr[-1])
        i = np.clip(np.searchsorted(rr, r, side="right") - 1, 0, rr.size - 2)
        tr = (r - rr[i]) / (rr[i + 1] - rr[i])
        # snap to stored nodes so exact samples are returned bitwise
        tr = np.where(np.abs(tr) < 1e-12, 0.0, np.where(np.abs(tr - 1) < 1e-12, 1.0, tr))
        j = np.clip(np.searchsorted(aa, th, side="right") - 1, 0, aa.size - 2)
        ta = (th - aa[j]) / (aa[j + 1] - aa[j])
        ta = np.where(np.abs(ta) < 1e-12, 0.0, np.where(np.abs(ta - 1) < 1e-12, 1.0, ta))

        v00, v01 = V[i, j], V[i, j + 1]
        v10, v11 = V[i + 1, j], V[i + 1, j + 1]
        lo = np.where(ta == 0, v00, np.where(ta == 1, v01, v00 + ta * (v01 - v00)))
        hi = np.where(ta == 0, v10, np.where(ta == 1, v11, v10 + ta * (v11 - v10)))
        out = np.where(tr == 0, lo, np.where(tr == 1, hi, lo + tr * (hi - lo)))
        return out.reshape(shape)

    def __call__(self, grad) -> np.ndarray:
        return self.evaluate(grad)

    # serialization

    def to_dict(self) -> dict:
        return {"kind": "table", "radii": self.radii.tolist(), "angles": self.angles.tolist(),
                "values": self.values.tolist(), "meta": _jsonable(self.meta)}

    @classmethod
    def from_dict(cls, d) -> "GStarTable":
        return cls(d["radii"], d["angles"], d["values"], d.get("meta"))

    def write_csv(self, path) -> None:
        """``xi1,xi2,gstar`` rows with a ``#``-prefixed JSON metadata header."""
        meta = dict(_jsonable(self.meta))
        meta["radii"] = self.radii.tolist()
        meta["angles"] = self.angles.tolist()
        X1, X2, V = self.sample_points()
        lines = ["# " + json.dumps(meta, sort_keys=True), "level,angle,xi1,xi2,gstar"]
        for n in range(self.radii.size):
            for j in range(self.angles.size):
                lines.append(f"{n},{j},{float(X1[n, j])!r},{float(X2[n, j])!r},{float(V[n, j])!r}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read_csv(cls, path) -> "GStarTable":
        text = Path(path).read_text().splitlines()
        meta = json.loads(text[0][1:].strip())
        radii, angles = meta.pop("radii"), meta.pop("angles")
        vals = np.zeros((len(radii), len(angles)))
        for line in text[2:]:
            if line.strip():
                n, j, _, _, v = line.split(",")
                vals[int(n), int(j)] = float(v)
        return cls(radii, angles, vals, meta)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def eval_gstar(table, xi) -> float:
    """``G*`` at a single gradient vector."""
    xi = np.asarray(xi, dtype=float)
    if not np.all(np.isfinite(xi)):
        raise DomainError("xi must be finite")
    return float(np.asarray(table.evaluate(xi.reshape(1, 2)))[0])


class _LocalSolver:
    """Nonlinear cell problem on one block for varying affine data ``xi``."""

    def __init__(self, block: BlockData, controls: GStarControls):
        self.block = block
        self.controls = controls
        grid = block.grid
        self.x1, self.x2 = _relative_coords(grid)
        if controls.local_bc == "periodic":
            bc = BoundarySpec.affine_periodic((1.0, 0.0))
        else:
            d = Dirichlet(0.0)
            bc = BoundarySpec(d, d, d, d)
        self.bc = bc
        self.dm0 = DofMap(grid, bc)
        self.asm0 = Assembler(grid, self.dm0)
        self.tensor = as_tensor(block.k, grid.n_cells)
        self.mobility = FineMobility(block.k, block.gfield)
        self.solutions = 0
        self.picard_iterations = 0

    def linear_response(self) -> np.ndarray:
        K = np.zeros((2, 2))
        for d in range(2):
            u, _ = self._solve(np.eye(2)[d], linear=True)
            K[:, d] = -u
        return K

    def _solve(self, xi, linear=False, p_init=None):
        grid = self.block.grid
        dm = self.dm0.shifted(xi[0] * self.x1 + xi[1] * self.x2)
        asm = self.asm0.rebind(dm)
        c = self.controls
        if linear:
            sol = solve_steady_nonlinear(grid, self.tensor, None, self.bc, assembler=asm)
        else:
            sol = solve_steady_nonlinear(grid, self.tensor, self.mobility, self.bc, assembler=asm,
                                         tol=c.picard_tol, max_iter=c.picard_max_iter, p_init=p_init)
        self.solutions += 1
        self.picard_iterations += sol.iterations
        return sol.average_velocity(), sol.p.ravel()

    def sample(self, xi, warm=None):
        """Average velocity at ``xi``; ``warm`` is ``(xi_prev, p_prev)``."""
        p_init = None
        if warm is not None:
            xi_prev, p_prev = warm
            s = math.hypot(*xi) / max(math.hypot(*xi_prev), 1e-300)
            p_init = p_prev * s
        return self._solve(np.asarray(xi, dtype=float), p_init=p_init)


def default_xi_ref(block: BlockData) -> float:
    amax = block.gfield.max_coefficient()
    kmax = float(np.max(block.k))
    if amax <= 0:
        return 1.0 / kmax
    return 1.0 / (amax * kmax)


def build_gstar_table(block: BlockData, kstar=None, controls: GStarControls = GStarControls()) -> GStarTable:
    """Adaptive ``G*`` table for one block.

    Levels grow geometrically along the diagonal; a candidate whose relative
    drop exceeds ``eps_n`` is bisected toward the previous level.  Sampling
    stops once the diagonal value is below ``eps`` and the finite-difference
    slope (in ``eta/xi_ref``) is below ``eps_d``.
    """
    c = controls
    n_ang = c.n_angles
    angles = np.linspace(0.0, np.pi, n_ang)
    jd = (n_ang - 1) // 4
    if block.gfield.is_darcy:
        return GStarTable.trivial(n_ang, controls=c.to_dict(), stop="degenerate")

    xi_ref = c.xi_ref if c.xi_ref is not None else default_xi_ref(block)
    eta1 = c.eta1 if c.eta1 is not None else 1e-3 * xi_ref
    eta2 = c.eta2 if c.eta2 is not None else 2.0 * eta1
    anchors = sorted(float(a) / math.sqrt(2.0) for a in c.anchors if a > 0)

    solver = _LocalSolver(block, c)
    if c.normalization == "linear":
        K = solver.linear_response()
    else:
        if kstar is None:
            raise DomainError("normalization='kstar' requires kstar")
        K = np.asarray(kstar, dtype=float)
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)

    def gval(u, xi):
        den = np.linalg.norm(K @ xi)
        return float(np.linalg.norm(u) / den)

    etas = [0.0]
    rows = [np.ones(n_ang)]
    warm = [None] * n_ang   # (xi, p) per angle

    def diag_sample(eta):
        xi = math.sqrt(2.0) * eta * dirs[jd]
        u, p = solver.sample(xi, warm[jd])
        return gval(u, xi), (xi, p)

    def partial():
        return GStarTable(np.sqrt(2.0) * np.array(etas), angles, np.array(rows),
                          {"controls": c.to_dict(), "stop": "incomplete"})

    stop = None
    for n in range(c.max_levels):
        eta_n = etas[-1]
        cand = eta1 if n == 0 else (eta2 if n == 1 else 2.0 * eta_n)
        for a in anchors:
            if eta_n < a * (1 - 1e-12) and a < cand:
                cand = a
                break
        g_prev = rows[-1][jd]
        tries = 0
        while True:
            try:
                g_new, w_new = diag_sample(cand)
                drop = (g_prev - g_new) / g_prev
                ok = drop <= c.eps_n
            except MaxIterationsExceeded:
                ok = False
            if ok or tries >= c.max_bisect:
                break
            cand = 0.5 * (eta_n + cand)
            tries += 1
        if not ok:
            raise ConvergenceError(f"G* level {n + 1} failed after {tries} bisections",
                                   table=partial(), eta=cand)
        row = np.empty(n_ang)
        row[jd] = g_new
        warm[jd] = w_new
        r = math.sqrt(2.0) * cand
        for j in range(n_ang - 1):
            if j == jd:
                continue
            xi = r * dirs[j]
            u, p = solver.sample(xi, warm[j])
            warm[j] = (xi, p)
            row[j] = gval(u, xi)
        row[-1] = row[0]
        etas.append(cand)
        rows.append(row)
        slope = abs(g_new - g_prev) / ((cand - eta_n) / xi_ref)
        pending = any(a > cand * (1 + 1e-12) for a in anchors)
        if g_new <= c.eps and slope <= c.eps_d and not pending:
            stop = "criteria"
            break
        if c.r_max is not None and r >= c.r_max and not pending:
            stop = "range"
            break
    if stop is None:
        raise ConvergenceError(f"G* table did not meet the stopping criteria in {c.max_levels} levels",
                               table=partial())

    V = np.array(rows)
    raw_max = float(V.max())
    V = np.minimum(V, 1.0)
    V = np.minimum.accumulate(V, axis=0)
    fix = float(np.abs(V - np.minimum(np.array(rows), 1.0)).max())
    if fix > 1e-9 or raw_max > 1 + 1e-9:
        log.warning("G* table adjusted by %.2e for monotonicity (raw max %.6g)", fix, raw_max)
    V[0, :] = 1.0
    meta = {"controls": c.to_dict(), "stop": stop, "xi_ref": xi_ref, "local_bc": c.local_bc,
            "normalization": c.normalization, "K_norm": K.tolist(), "solves": solver.solutions,
            "picard_iterations": solver.picard_iterations, "monotone_fix": fix}
    return GStarTable(np.sqrt(2.0) * np.array(etas), angles, V, meta)


def block_gstar_at(block: BlockData, xi, controls: GStarControls = GStarControls(), kstar=None) -> float:
    """``G*`` at one gradient by a direct cell solve (no table)."""
    solver = _LocalSolver(block, controls)
    xi = np.asarray(xi, dtype=float)
    if not np.any(xi):
        return 1.0
    K = solver.linear_response() if controls.normalization == "linear" else np.asarray(kstar, dtype=float)
    u, _ = solver.sample(xi)
    return float(np.linalg.norm(u) / np.linalg.norm(K @ xi))


# -- polynomial variants -----------------------------------------------------

def fit_kbar_least_squares(block: BlockData) -> tuple[float, float, float]:
    """Least-squares linear fit ``K0 + K1 (x1-c1) + K2 (x2-c2)`` of ``k``."""
    X1, X2 = block.grid.cell_centers()
    c1, c2 = block.center
    d1, d2 = X1 - c1, X2 - c2
    k = np.asarray(block.k, dtype=float)
    K0 = float(k.mean())
    s1, s2 = float((d1 * d1).sum()), float((d2 * d2).sum())
    K1 = float((k * d1).sum() / s1) if s1 > 0 else 0.0
    K2 = float((k * d2).sum() / s2) if s2 > 0 else 0.0
    return K0, K1, K2


def kbar_values(grid: StructuredGrid, center, kbar) -> np.ndarray:
    X1, X2 = grid.cell_centers()
    K0, K1, K2 = kbar
    return K0 + K1 * (X1 - center[0]) + K2 * (X2 - center[1])


def correct_kstar_poly(block: BlockData, kbar) -> tuple[float, float, float, float]:
    """Constants ``(K11, K12, K21, K22)`` matching exact and averaged cell averages."""
    kb = kbar_values(block.grid, block.center, kbar)
    if np.any(kb <= 0):
        raise DomainError("linear permeability fit is not positive on the block")
    U, _ = cell_problem_averages(block.grid, block.k)
    M = np.zeros((4, 4))
    rhs = np.zeros(4)
    for i in range(2):
        sol = solve_linear_elliptic(block.grid, kb, _mixed_bc(i))
        g = sol.grad.reshape(-1, 2)
        kg1 = float((kb.reshape(-1) * g[:, 0]).mean())
        kg2 = float((kb.reshape(-1) * g[:, 1]).mean())
        m1, m2 = g.mean(axis=0)
        # -<u_i> = [K11 <Kbar d1P> + K12 <d2P>, K21 <d1P> + K22 <Kbar d2P>]
        M[2 * i, 0:2] = (kg1, m2)
        M[2 * i + 1, 2:4] = (m1, kg2)
        rhs[2 * i] = -U[0, i]
        rhs[2 * i + 1] = -U[1, i]
    if abs(np.linalg.det(M)) < 1e-14 * np.abs(M).max() ** 4:
        raise SolverError("singular system for the permeability corrections")
    K11, K12, K21, K22 = np.linalg.solve(M, rhs)
    return float(K11), float(K12), float(K21), float(K22)


def kstar_poly_tensor(grid: StructuredGrid, center, kpoly) -> np.ndarray:
    """Cell tensors ``[[K11 Kbar, K12], [K21, K22 Kbar]]``, shape ``(n_cells, 2, 2)``."""
    K11, K12, K21, K22, K0, K1, K2 = kpoly
    kb = kbar_values(grid, center, (K0, K1, K2)).reshape(-1)
    out = np.empty((kb.size, 2, 2))
    out[:, 0, 0] = K11 * kb
    out[:, 0, 1] = K12
    out[:, 1, 0] = K21
    out[:, 1, 1] = K22 * kb
    return out


def phi_basis_rhs(grid: StructuredGrid, center):
    X1, X2 = grid.cell_centers()
    d1, d2 = X1 - center[0], X2 - center[1]
    return [np.ones_like(d1), d1, d2, d1**2 - d2**2]


def phi_poly_values(grid: StructuredGrid, center, coeffs) -> np.ndarray:
    return sum(c * f for c, f in zip(coeffs, phi_basis_rhs(grid, center)))


def _face_reactions(grid, coef, rhs):
    """Solve with zero Dirichlet data and return outward fluxes per face."""
    d = Dirichlet(0.0)
    sol = solve_linear_elliptic(grid, coef, BoundarySpec(d, d, d, d), rhs=rhs)
    fl = boundary_fluxes(sol)
    return np.array([fl["left"], fl["right"], fl["bottom"], fl["top"]])


def upscale_phi_poly(block: BlockData, kstar_cells, return_diagnostics: bool = False):
    """Coefficients ``(Phi_A, Phi_B, Phi_C, Phi_D)`` from face-flux matching.

    ``kstar_cells`` is the coarse tensor on the block's fine cells (constant
    or polynomial).  Falls back to the constant mean when the flux matrix is
    singular.
    """
    if block.phi is None:
        raise DomainError("block has no porosity")
    grid = block.grid
    target = _face_reactions(grid, block.k, block.phi)
    F = np.stack([_face_reactions(grid, kstar_cells, f) for f in phi_basis_rhs(grid, block.center)], axis=1)
    cond = np.linalg.cond(F)
    if not np.isfinite(cond) or cond > 1e12:
        warnings.warn("face-flux matrix is singular; using constant porosity", RuntimeWarning, stacklevel=2)
        coeffs = (float(np.mean(block.phi)), 0.0, 0.0, 0.0)
        resid = float("nan")
    else:
        coeffs = tuple(float(v) for v in np.linalg.solve(F, target))
        resid = float(np.abs(F @ np.array(coeffs) - target).max() / max(np.abs(target).max(), 1e-300))
    vals = phi_poly_values(grid, block.center, coeffs)
    if np.any(vals <= 0):
        warnings.warn("polynomial porosity is not positive on the whole block", RuntimeWarning, stacklevel=2)
    if return_diagnostics:
        return coeffs, {"flux_matrix": F, "target": target, "residual": resid, "cond": cond}
    return coeffs


# -- coarse model ------------------------------------------------------------

@dataclass
class CoarseBlockParams:
    """Upscaled parameters of one coarse block."""

    index: tuple[int, int]
    center: tuple[float, float]
    kstar: np.ndarray
    gstar: object
    phistar: Optional[float] = None
    phistar_poly: Optional[tuple] = None
    kstar_poly: Optional[tuple] = None
    diagnostics: dict = field(default_factory=dict)

    def tensor_at(self, grid: StructuredGrid) -> np.ndarray:
        """Coarse tensor on the cells of ``grid`` (a sub-grid of the block)."""
        if self.kstar_poly is not None:
            return kstar_poly_tensor(grid, self.center, self.kstar_poly)
        return np.broadcast_to(np.asarray(self.kstar, dtype=float), (grid.n_cells, 2, 2)).copy()

    def phi_at(self, grid: StructuredGrid) -> np.ndarray:
        if self.phistar_poly is not None:
            return phi_poly_values(grid, self.center, self.phistar_poly)
        if self.phistar is None:
            raise DomainError("block has no upscaled porosity")
        return np.full(grid.shape, float(self.phistar))

    def to_dict(self) -> dict:
        g = self.gstar
        return {
            "index": list(self.index), "center": list(self.center),
            "kstar": np.asarray(self.kstar).tolist(),
            "phistar": self.phistar,
            "phistar_poly": None if self.phistar_poly is None else list(self.phistar_poly),
            "kstar_poly": None if self.kstar_poly is None else list(self.kstar_poly),
            "gstar": g.to_dict(),
            "diagnostics": _jsonable(self.diagnostics),
        }

    @classmethod
    def from_dict(cls, d) -> "CoarseBlockParams":
        return cls(tuple(d["index"]), tuple(d["center"]), np.array(d["kstar"]), gstar_from_dict(d["gstar"]),
                   d.get("phistar"), None if d.get("phistar_poly") is None else tuple(d["phistar_poly"]),
                   None if d.get("kstar_poly") is None else tuple(d["kstar_poly"]), d.get("diagnostics", {}))


def gstar_from_dict(d):
    kind = d.get("kind", "table")
    if kind == "table":
        return GStarTable.from_dict(d)
    if kind == "layered":
        from .layered import LayeredGStar
        return LayeredGStar.from_dict(d)
    raise DomainError(f"unknown G* kind {kind!r}")


class CoarseMobility:
    """``G*(grad p)`` per coarse element, dispatching to each block's evaluator."""

    def __init__(self, evaluators, owner):
        self.evaluators = list(evaluators)
        self.owner = np.asarray(owner).reshape(-1)
        self._groups = {}
        for b, ev in enumerate(self.evaluators):
            self._groups.setdefault(id(ev), (ev, []))[1].append(b)
        self._masks = [(ev, np.isin(self.owner, blocks)) for ev, blocks in self._groups.values()]

    @property
    def is_trivial(self) -> bool:
        return all(getattr(ev, "is_trivial", False) for ev in self.evaluators)

    def __call__(self, grad) -> np.ndarray:
        g = np.asarray(grad, dtype=float).reshape(-1, 2)
        out = np.ones(g.shape[0])
        for ev, mask in self._masks:
            if getattr(ev, "is_trivial", False):
                continue
            out[mask] = ev.evaluate(g[mask])
        return out


@dataclass
class CoarseModel:
    """Coarse grid plus per-block upscaled parameters (row-major block order)."""

    grid: StructuredGrid
    blocks: list
    variant: str = "i"
    meta: dict = field(default_factory=dict)

    def block(self, bi, bj) -> CoarseBlockParams:
        return self.blocks[bj * self.grid.nx + bi]

    def discretize(self, refine: int = 1):
        """Sub-element grid, tensors, porosity and owner block per element.

        Each block is split into ``refine x refine`` elements that carry the
        block's parameters; polynomial forms are evaluated at element centers.
        """
        if refine < 1:
            raise DomainError("refine must be >= 1")
        cg = self.grid
        fg = cg.refined(refine)
        part = BlockPartition(fg, cg.nx, cg.ny)
        tensor = np.empty(fg.shape + (2, 2))
        phi = np.full(fg.shape, np.nan)
        owner = np.empty(fg.shape, dtype=int)
        for bi, bj in part.blocks():
            rows, cols = part.block_slices(bi, bj)
            sub = part.block_grid(bi, bj)
            bp = self.block(bi, bj)
            tensor[rows, cols] = bp.tensor_at(sub).reshape(sub.shape + (2, 2))
            if bp.phistar is not None or bp.phistar_poly is not None:
                phi[rows, cols] = bp.phi_at(sub)
            owner[rows, cols] = bj * cg.nx + bi
        return fg, tensor, phi, owner

    def mobility(self, owner) -> CoarseMobility:
        return CoarseMobility([b.gstar for b in self.blocks], owner)

    def to_dict(self) -> dict:
        g = self.grid
        return {"format": "forchup-coarse-model", "version": 1,
                "grid": {"nx": g.nx, "ny": g.ny, "Lx": g.Lx, "Ly": g.Ly, "x0": g.x0, "y0": g.y0},
                "variant": self.variant, "meta": _jsonable(self.meta),
                "blocks": [b.to_dict() for b in self.blocks]}

    @classmethod
    def from_dict(cls, d) -> "CoarseModel":
        if d.get("format") != "forchup-coarse-model":
            raise DomainError("not a coarse-model file")
        g = StructuredGrid(**d["grid"])
        blocks = [CoarseBlockParams.from_dict(b) for b in d["blocks"]]
        # blocks with identical tables share one evaluator again
        seen = {}
        for b in blocks:
            key = json.dumps(b.gstar.to_dict(), sort_keys=True)
            b.gstar = seen.setdefault(key, b.gstar)
        return cls(g, blocks, d.get("variant", "i"), d.get("meta", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "CoarseModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class UpscaleOptions:
    variant: str = "i"
    controls: GStarControls = GStarControls()
    gstar_method: str = "table"      # table | parallel | perpendicular | none
    workers: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise DomainError(f"variant must be one of {VARIANTS}")
        if self.gstar_method not in ("table", "parallel", "perpendicular", "none"):
            raise DomainError(f"unknown gstar_method {self.gstar_method!r}")


def upscale_block(block: BlockData, opts: UpscaleOptions) -> dict:
    """All upscaled quantities of one block (without index/center)."""
    kstar, diag = upscale_k_linear(block, return_diagnostics=True)
    out = {"kstar": kstar, "diagnostics": {"kstar_asymmetry": diag["asymmetry"]}}
    if block.phi is not None:
        out["phistar"] = upscale_phi_const(block)
    kpoly = None
    if opts.variant in ("ii", "iv"):
        kbar = fit_kbar_least_squares(block)
        try:
            kpoly = correct_kstar_poly(block, kbar) + tuple(kbar)
        except DomainError as exc:
            # the linear fit crosses zero inside the block: keep the constant k*
            warnings.warn(f"{exc}; using the constant k*", RuntimeWarning, stacklevel=2)
            out["diagnostics"]["kstar_poly_fallback"] = True
    if kpoly is not None:
        out["kstar_poly"] = kpoly
        kcells = kstar_poly_tensor(block.grid, block.center, kpoly)
        if np.any(np.linalg.eigvalsh(0.5 * (kcells + kcells.transpose(0, 2, 1))) <= 0):
            warnings.warn("polynomial k* is not positive definite everywhere on the block",
                          RuntimeWarning, stacklevel=2)
    if opts.variant in ("iii", "iv"):
        if block.phi is None:
            raise DomainError("polynomial porosity needs a porosity field")
        kcells = kstar_poly_tensor(block.grid, block.center, kpoly) if kpoly is not None else kstar
        coeffs, pd = upscale_phi_poly(block, kcells, return_diagnostics=True)
        out["phistar_poly"] = coeffs
        out["diagnostics"]["phi_flux_residual"] = pd["residual"]
    if opts.gstar_method == "table":
        out["gstar"] = build_gstar_table(block, kstar, opts.controls)
    elif opts.gstar_method == "none" or block.gfield.is_darcy:
        out["gstar"] = GStarTable.trivial(opts.controls.n_angles)
    else:
        from .layered import LayeredGStar
        out["gstar"] = LayeredGStar.from_block(block, opts.gstar_method)
    return out


def _upscale_worker(args):
    block, opts = args
    return upscale_block(block, opts)


def upscale_all_blocks(fine: FineModel, part: BlockPartition, opts: UpscaleOptions = UpscaleOptions()) -> CoarseModel:
    """Upscale every block; identical blocks are computed once."""
    if part.fine != fine.grid:
        raise DomainError("partition does not belong to the fine grid")
    order = list(part.blocks())
    blocks = {idx: fine.block(part, *idx) for idx in order}
    keys = {idx: blocks[idx].content_key() for idx in order}
    unique = {}
    for idx in order:
        unique.setdefault(keys[idx], idx)
    todo = list(unique.items())
    workers = opts.workers if opts.workers and opts.workers > 0 else (os.cpu_count() or 1)
    results = {}
    try:
        if workers > 1 and len(todo) > 1:
            with ProcessPoolExecutor(max_workers=min(workers, len(todo))) as ex:
                outs = ex.map(_upscale_worker, [(blocks[idx], opts) for _, idx in todo])
                for (key, idx), res in zip(todo, outs):
                    results[key] = res
        else:
            for key, idx in todo:
                try:
                    results[key] = upscale_block(blocks[idx], opts)
                except Exception as exc:  # attach the block index
                    raise StageError(f"upscale block {idx}", exc) from exc
    except StageError:
        raise
    except Exception as exc:
        raise StageError("upscale", exc) from exc

    params = []
    shared = {}
    for idx in order:
        res = results[keys[idx]]
        g = shared.setdefault(keys[idx], res["gstar"])
        params.append(CoarseBlockParams(
            idx, blocks[idx].center, res["kstar"], g, res.get("phistar"),
            res.get("phistar_poly"), res.get("kstar_poly"), dict(res["diagnostics"])))
    meta = {"unique_blocks": len(unique), "gstar_method": opts.gstar_method,
            "controls": opts.controls.to_dict()}
    return CoarseModel(part.coarse, params, opts.variant, meta)


def homogeneous_gstar(k: float, poly_field_cell, xi) -> np.ndarray:
    """``G(k |xi|)`` of a homogeneous block (closed-form reference)."""
    xi = np.asarray(xi, dtype=float).reshape(-1, 2)
    return poly_field_cell.mobility(k * np.hypot(xi[:, 0], xi[:, 1]))
