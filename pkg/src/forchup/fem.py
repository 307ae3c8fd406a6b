"""Bilinear finite elements on structured rectangular grids.

Coefficients are constant per cell (scalar or full 2x2 tensor).  Nonlinear
mobilities are evaluated once per cell at the element midpoint gradient, which
for Q1 elements equals the cell-averaged gradient.

Boundary conditions are expressed as a :class:`BoundarySpec` mapping each of
the four faces (``left``, ``right``, ``bottom``, ``top``) to a condition.
Constraints are realized by a node-to-dof map: Dirichlet nodes are eliminated,
periodic faces and equipotential wells identify nodes, and an affine offset
carries Dirichlet values and imposed mean gradients.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DomainError, MaxIterationsExceeded, SolverError
from .grid import StructuredGrid

log = logging.getLogger(__name__)

FACES = ("left", "right", "bottom", "top")
LINEAR_RTOL = 1e-10
PICARD_TOL = 1e-8
PICARD_MAX_ITER = 200


# -- boundary conditions ------------------------------------------------------

@dataclass(frozen=True)
class Dirichlet:
    """Prescribed pressure; ``value`` is a constant or ``f(x1, x2) -> array``."""

    value: Union[float, Callable] = 0.0

    def evaluate(self, x1, x2):
        if callable(self.value):
            return np.broadcast_to(np.asarray(self.value(x1, x2), dtype=float), np.shape(x1))
        return np.full(np.shape(x1), float(self.value))


@dataclass(frozen=True)
class NoFlux:
    pass


@dataclass(frozen=True)
class Flux:
    """Total outward flux ``Q`` through the face, spread with uniform density."""

    Q: Union[float, Callable] = 0.0


@dataclass(frozen=True)
class Well:
    """Equipotential face carrying total outward flux ``Q``.

    All nodes of the face share one unknown pressure.  ``Q`` may be a function
    of time for transient runs.
    """

    Q: Union[float, Callable] = 0.0


@dataclass(frozen=True)
class Periodic:
    """Identify this face with the opposite one."""


@dataclass(frozen=True)
class BoundarySpec:
    """Conditions on the four faces plus an optional imposed mean gradient.

    ``mean_gradient`` is only allowed for fully periodic problems and makes the
    solution ``p = xi . x + w`` with ``w`` periodic.
    """

    left: object = NoFlux()
    right: object = NoFlux()
    bottom: object = NoFlux()
    top: object = NoFlux()
    mean_gradient: Optional[tuple[float, float]] = None

    def __post_init__(self):
        for a, b in (("left", "right"), ("bottom", "top")):
            pa, pb = isinstance(getattr(self, a), Periodic), isinstance(getattr(self, b), Periodic)
            if pa != pb:
                raise DomainError(f"periodic condition on {a} must be paired with {b}")
        wells = [f for f in FACES if isinstance(getattr(self, f), Well)]
        if len(wells) > 1:
            raise DomainError("at most one well face is supported")
        if self.mean_gradient is not None and not all(isinstance(getattr(self, f), Periodic) for f in FACES):
            raise DomainError("mean_gradient requires periodic conditions on all faces")

    def face(self, name):
        return getattr(self, name)

    @property
    def has_dirichlet(self) -> bool:
        return any(isinstance(self.face(f), Dirichlet) for f in FACES)

    @property
    def well_face(self) -> Optional[str]:
        for f in FACES:
            if isinstance(self.face(f), Well):
                return f
        return None

    @classmethod
    def affine_dirichlet(cls, xi) -> "BoundarySpec":
        """``p = xi . x`` on the whole boundary."""
        x1, x2 = float(xi[0]), float(xi[1])
        d = Dirichlet(lambda a, b: x1 * a + x2 * b)
        return cls(d, d, d, d)

    @classmethod
    def affine_periodic(cls, xi) -> "BoundarySpec":
        per = Periodic()
        return cls(per, per, per, per, mean_gradient=(float(xi[0]), float(xi[1])))


def face_nodes(grid: StructuredGrid, face: str) -> np.ndarray:
    """Node ids on a face, ordered along it."""
    nx, ny = grid.nx, grid.ny
    ids = np.arange(grid.n_nodes).reshape(ny + 1, nx + 1)
    return {"left": ids[:, 0], "right": ids[:, nx], "bottom": ids[0, :], "top": ids[ny, :]}[face].copy()


def face_length(grid: StructuredGrid, face: str) -> float:
    return grid.Ly if face in ("left", "right") else grid.Lx


def _face_load(grid, face, density):
    """Nodal load of a uniform density on one face (trapezoidal, exact for Q1)."""
    nodes = face_nodes(grid, face)
    h = grid.h2 if face in ("left", "right") else grid.h1
    w = np.full(nodes.size, h)
    w[0] = w[-1] = 0.5 * h
    out = np.zeros(grid.n_nodes)
    out[nodes] = density * w
    return out


# -- dof map --------------------------------------------------------------------

class DofMap:
    """Node-to-unknown map for a grid and boundary spec."""

    def __init__(self, grid: StructuredGrid, bc: BoundarySpec):
        self.grid = grid
        self.bc = bc
        nx, ny = grid.nx, grid.ny
        X1, X2 = grid.node_coords()
        x1, x2 = X1.ravel(), X2.ravel()
        n = grid.n_nodes

        ii = np.tile(np.arange(nx + 1), ny + 1)
        jj = np.repeat(np.arange(ny + 1), nx + 1)
        if isinstance(bc.left, Periodic):
            ii = np.where(ii == nx, 0, ii)
        if isinstance(bc.bottom, Periodic):
            jj = np.where(jj == ny, 0, jj)
        rep = jj * (nx + 1) + ii

        well = bc.well_face
        if well is not None:
            wn = face_nodes(grid, well)
            rep[wn] = wn[0]

        fixed = np.zeros(n, dtype=bool)
        offset = np.zeros(n)
        if bc.mean_gradient is not None:
            g1, g2 = bc.mean_gradient
            offset = g1 * (x1 - grid.x0) + g2 * (x2 - grid.y0)
        for f in FACES:
            cond = bc.face(f)
            if isinstance(cond, Dirichlet):
                nodes = face_nodes(grid, f)
                fixed[nodes] = True
                offset[nodes] = cond.evaluate(x1[nodes], x2[nodes])
        # Dirichlet beats periodic/well identification
        if fixed.any():
            rep = np.where(fixed[rep] & ~fixed, np.arange(n), rep)

        free_reps = np.unique(rep[~fixed])
        dof_of_rep = np.full(n, -1)
        dof_of_rep[free_reps] = np.arange(free_reps.size)
        dof = np.where(fixed, -1, dof_of_rep[rep])

        self.dof = dof
        self.fixed = fixed
        self.offset = offset
        self.n_dofs = int(free_reps.size)
        self.well_dof = int(dof[face_nodes(grid, well)[0]]) if well is not None else None
        self.singular = not fixed.any()

    def shifted(self, offset) -> "DofMap":
        """Copy sharing the dof numbering but with a new offset vector."""
        out = copy.copy(self)
        out.offset = np.asarray(offset, dtype=float)
        return out

    def expand(self, w: np.ndarray) -> np.ndarray:
        """Nodal values from dof values."""
        p = self.offset.copy()
        free = ~self.fixed
        p[free] += w[self.dof[free]]
        return p

    def restrict_sum(self, nodal: np.ndarray) -> np.ndarray:
        """Transpose of :meth:`expand` on a nodal vector (sum over identified nodes)."""
        free = ~self.fixed
        return np.bincount(self.dof[free], weights=nodal[free], minlength=self.n_dofs)


# -- assembly -------------------------------------------------------------------

def _reference_matrices(h1, h2):
    """Q1 element matrices on an ``h1`` x ``h2`` rectangle.

    Local nodes: 0=(0,0), 1=(1,0), 2=(0,1), 3=(1,1).  Returns the four
    ``S[m][n][i, j] = int d_m phi_i d_n phi_j`` and the mass matrix.
    """
    gp = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])
    S = np.zeros((2, 2, 4, 4))
    M = np.zeros((4, 4))
    w = 0.25 * h1 * h2
    for s in gp:
        for t in gp:
            phi = np.array([(1 - s) * (1 - t), s * (1 - t), (1 - s) * t, s * t])
            d1 = np.array([-(1 - t), (1 - t), -t, t]) / h1
            d2 = np.array([-(1 - s), -s, (1 - s), s]) / h2
            D = (d1, d2)
            for m in range(2):
                for n_ in range(2):
                    S[m, n_] += w * np.outer(D[m], D[n_])
            M += w * np.outer(phi, phi)
    return S, M


def cell_node_ids(grid: StructuredGrid) -> np.ndarray:
    nx, ny = grid.nx, grid.ny
    i = np.tile(np.arange(nx), ny)
    j = np.repeat(np.arange(ny), nx)
    n0 = j * (nx + 1) + i
    return np.stack([n0, n0 + 1, n0 + nx + 1, n0 + nx + 2], axis=1)


def as_tensor(coef, n_cells) -> np.ndarray:
    """Normalize a cell coefficient to shape ``(n_cells, 2, 2)``."""
    c = np.asarray(coef, dtype=float)
    if c.ndim >= 2 and c.shape[-2:] == (2, 2) and c.size == 4 * n_cells:
        return c.reshape(n_cells, 2, 2)
    if c.shape == (2, 2):
        return np.broadcast_to(c, (n_cells, 2, 2)).copy()
    c = np.broadcast_to(c, (n_cells,)) if c.size == 1 else c.reshape(n_cells)
    out = np.zeros((n_cells, 2, 2))
    out[:, 0, 0] = c
    out[:, 1, 1] = c
    return out


class Assembler:
    """Reduced stiffness/mass assembly for one grid and dof map.

    Summation order is fixed by the precomputed structure, so repeated solves
    are bitwise reproducible.
    """

    def __init__(self, grid: StructuredGrid, dofmap: DofMap):
        self.grid = grid
        self.dofmap = dofmap
        self.S, self.M = _reference_matrices(grid.h1, grid.h2)
        self.cells = cell_node_ids(grid)
        ldof = dofmap.dof[self.cells]  # (n_cells, 4)
        rows = np.repeat(ldof, 4, axis=1).ravel()
        cols = np.tile(ldof, (1, 4)).ravel()
        keep = (rows >= 0) & (cols >= 0)
        self._keep = keep
        nd = dofmap.n_dofs
        keys = rows[keep].astype(np.int64) * nd + cols[keep]
        ukeys, self._inv = np.unique(keys, return_inverse=True)
        self._indices = (ukeys % nd).astype(np.int32)
        r = (ukeys // nd).astype(np.int64)
        self._indptr = np.concatenate([[0], np.cumsum(np.bincount(r, minlength=nd))]).astype(np.int32)
        self._nnz = ukeys.size

    def rebind(self, dofmap: DofMap) -> "Assembler":
        """Reuse this structure with a dof map that differs only in its offset."""
        if dofmap.n_dofs != self.dofmap.n_dofs or not np.array_equal(dofmap.dof, self.dofmap.dof):
            raise DomainError("dof map structure differs")
        out = copy.copy(self)
        out.dofmap = dofmap
        return out

    def local_matrices(self, tensor, mass_weight=None):
        """Element matrices ``(n_cells, 4, 4)`` for a per-cell tensor."""
        S = self.S
        A = (tensor[:, 0, 0, None, None] * S[0, 0] + tensor[:, 0, 1, None, None] * S[0, 1]
             + tensor[:, 1, 0, None, None] * S[1, 0] + tensor[:, 1, 1, None, None] * S[1, 1])
        if mass_weight is not None:
            A = A + np.asarray(mass_weight).reshape(-1)[:, None, None] * self.M
        return A

    def matrix(self, local) -> sp.csr_matrix:
        data = np.bincount(self._inv, weights=local.reshape(-1)[self._keep], minlength=self._nnz)
        nd = self.dofmap.n_dofs
        return sp.csr_matrix((data, self._indices, self._indptr), shape=(nd, nd))

    def apply_full(self, local, p_nodes) -> np.ndarray:
        """Unreduced product ``A p`` on nodes."""
        r = np.einsum("cij,cj->ci", local, p_nodes[self.cells])
        return np.bincount(self.cells.ravel(), weights=r.ravel(), minlength=self.grid.n_nodes)

    def cell_load(self, f_cells) -> np.ndarray:
        """Nodal load of a piecewise constant source."""
        f = np.asarray(f_cells, dtype=float).reshape(-1)
        w = np.repeat(f * (0.25 * self.grid.cell_area), 4)
        return np.bincount(self.cells.ravel(), weights=w, minlength=self.grid.n_nodes)

    def mass_apply(self, weight_cells, p_nodes) -> np.ndarray:
        local = np.asarray(weight_cells).reshape(-1)[:, None, None] * self.M
        return self.apply_full(local, p_nodes)


def cell_gradients(grid: StructuredGrid, p_nodes) -> np.ndarray:
    """Midpoint gradient per cell, shape ``(ny, nx, 2)``."""
    p = np.asarray(p_nodes, dtype=float).reshape(grid.ny + 1, grid.nx + 1)
    p00, p10 = p[:-1, :-1], p[:-1, 1:]
    p01, p11 = p[1:, :-1], p[1:, 1:]
    g1 = (p10 + p11 - p00 - p01) / (2.0 * grid.h1)
    g2 = (p01 + p11 - p00 - p10) / (2.0 * grid.h2)
    return np.stack([g1, g2], axis=-1)


# -- mobility evaluators ----------------------------------------------------------

class FineMobility:
    """``G(|k grad p|; x)`` from a per-cell :class:`~forchup.forchheimer.GField`."""

    def __init__(self, k, gfield):
        self.k = np.asarray(k, dtype=float)
        self.gfield = gfield.reshape((-1,))
        self._tensor = self.k.ndim >= 2 and self.k.shape[-2:] == (2, 2) and self.k.size == 4 * self.gfield.shape[0]

    @property
    def is_trivial(self) -> bool:
        return self.gfield.is_darcy

    def __call__(self, grad) -> np.ndarray:
        g = np.asarray(grad).reshape(-1, 2)
        if self._tensor:
            kg = np.einsum("cij,cj->ci", self.k.reshape(-1, 2, 2), g)
            xi = np.hypot(kg[:, 0], kg[:, 1])
        else:
            xi = self.k.reshape(-1) * np.hypot(g[:, 0], g[:, 1])
        return self.gfield.mobility(xi)


class UnitMobility:
    is_trivial = True

    def __call__(self, grad):
        return np.ones(np.asarray(grad).reshape(-1, 2).shape[0])


# -- solutions --------------------------------------------------------------------

@dataclass
class PressureSolution:
    """Nodal pressure with per-cell gradient, velocity and diagnostics."""

    grid: StructuredGrid
    p: np.ndarray                # (ny+1, nx+1)
    grad: np.ndarray             # (ny, nx, 2)
    velocity: np.ndarray         # (ny, nx, 2)
    mobility: np.ndarray         # (ny, nx)
    iterations: int = 1
    residual: float = 0.0
    updates: list = field(default_factory=list)
    tensor: Optional[np.ndarray] = None   # (n_cells, 2, 2) coefficient before mobility
    rhs: Optional[np.ndarray] = None      # (ny, nx) source
    bc: Optional[BoundarySpec] = None
    linear_residual: float = 0.0

    def average_velocity(self, region=None) -> np.ndarray:
        return average_velocity(self.grid, self.velocity, region)

    def mean_pressure(self) -> float:
        """Exact area average of the bilinear pressure."""
        p = self.p
        cellmean = 0.25 * (p[:-1, :-1] + p[:-1, 1:] + p[1:, :-1] + p[1:, 1:])
        return float(cellmean.mean())

    def face_mean(self, face: str) -> float:
        """Length average of the pressure trace on one face."""
        vals = self.p.ravel()[face_nodes(self.grid, face)]
        return float(0.5 * (vals[1:] + vals[:-1]).mean())

    def nodes_csv_rows(self):
        X1, X2 = self.grid.node_coords()
        for n, (a, b, v) in enumerate(zip(X1.ravel(), X2.ravel(), self.p.ravel())):
            yield n, a, b, v


def cell_velocity(grad, tensor, mobility) -> np.ndarray:
    """``u = -G k grad p`` per cell; ``tensor`` is scalar or ``(…,2,2)``."""
    grad = np.asarray(grad, dtype=float)
    shape = grad.shape
    g = grad.reshape(-1, 2)
    K = as_tensor(tensor, g.shape[0])
    m = np.broadcast_to(np.asarray(mobility, dtype=float).reshape(-1) if np.size(mobility) > 1
                        else np.asarray(mobility, dtype=float), (g.shape[0],))
    u = -m[:, None] * np.einsum("cij,cj->ci", K, g)
    return u.reshape(shape)


def average_velocity(grid: StructuredGrid, velocity, region=None) -> np.ndarray:
    """Area average of a per-cell vector field over ``region`` (boolean cell mask)."""
    u = np.asarray(velocity).reshape(grid.ny, grid.nx, 2)
    if region is None:
        return u.reshape(-1, 2).mean(axis=0)
    mask = np.asarray(region, dtype=bool).reshape(grid.ny, grid.nx)
    if not mask.any():
        raise DomainError("empty averaging region")
    return u[mask].mean(axis=0)


# -- linear algebra ---------------------------------------------------------------

def _factor(A):
    """Sparse LU with a symmetric fill-reducing ordering (A is SPD)."""
    return spla.splu(A.tocsc(), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                     options={"SymmetricMode": True})


def _solve(A: sp.csr_matrix, b: np.ndarray, pin: bool, scale: float = 0.0):
    """Direct sparse solve with a residual check; pins dof 0 if singular.

    ``scale`` is the magnitude of the data before cancellation, used for the
    compatibility test of pure-Neumann problems.
    """
    if pin:
        if b.size == 1:
            return np.zeros(1), 0.0
        if abs(b.sum()) > 1e-9 * max(np.abs(b).sum(), scale, 1e-300):
            raise SolverError(f"incompatible pure-Neumann data (net source {b.sum():.3e})")
        b = b - b.mean()
        lu = _factor(A[1:, 1:])

        def direct(rhs):
            x = np.zeros_like(rhs)
            x[1:] = lu.solve(rhs[1:])
            return x - x.mean()
    else:
        lu = _factor(A)
        direct = lu.solve
    x = direct(b)
    if not np.all(np.isfinite(x)):
        raise SolverError("linear solver produced non-finite values")
    bnorm = max(np.linalg.norm(b), 1e-10 * scale, 1e-300)
    r = A @ x - b
    rel = np.linalg.norm(r) / bnorm
    if rel > LINEAR_RTOL:
        # one step of iterative refinement
        x = x - direct(r)
        r = A @ x - b
        rel = np.linalg.norm(r) / bnorm
        if rel > LINEAR_RTOL:
            raise SolverError(f"linear solve residual {rel:.2e} exceeds {LINEAR_RTOL:.0e}")
    return x, rel


def _rhs(asm: Assembler, local, f_nodes, return_scale=False):
    dm = asm.dofmap
    ag = asm.apply_full(local, dm.offset)
    b = dm.restrict_sum(f_nodes - ag)
    if return_scale:
        return b, float(np.abs(f_nodes).sum() + np.abs(ag).sum())
    return b


def _neumann_load(grid, bc, t=None):
    out = np.zeros(grid.n_nodes)
    for f in FACES:
        cond = bc.face(f)
        if isinstance(cond, Flux):
            Q = cond.Q(t) if callable(cond.Q) else cond.Q
            out -= _face_load(grid, f, Q / face_length(grid, f))
    return out


def _well_load(dm: DofMap, bc: BoundarySpec, t=None):
    out = np.zeros(dm.n_dofs)
    wf = bc.well_face
    if wf is not None:
        cond = bc.face(wf)
        Q = cond.Q(t) if callable(cond.Q) else cond.Q
        out[dm.well_dof] -= Q
    return out


class _Problem:
    """Grid + boundary spec + source, reused across Picard iterations."""

    def __init__(self, grid, bc, rhs=None, assembler=None):
        self.grid = grid
        self.bc = bc
        if assembler is None:
            assembler = Assembler(grid, DofMap(grid, bc))
        self.asm = assembler
        self.dm = assembler.dofmap
        self.rhs = None if rhs is None else np.asarray(rhs, dtype=float).reshape(grid.shape)
        f = _neumann_load(grid, bc)
        if self.rhs is not None:
            f = f + assembler.cell_load(self.rhs)
        self.f_nodes = f

    def solve(self, tensor):
        local = self.asm.local_matrices(tensor)
        A = self.asm.matrix(local)
        b, scale = _rhs(self.asm, local, self.f_nodes, return_scale=True)
        b = b + _well_load(self.dm, self.bc)
        w, rel = _solve(A, b, self.dm.singular, scale)
        return self.dm.expand(w), rel


def _package(grid, p, tensor, mob, iterations=1, residual=0.0, updates=None, rhs=None, bc=None, lin=0.0):
    grad = cell_gradients(grid, p)
    u = cell_velocity(grad, tensor, mob)
    return PressureSolution(grid, p.reshape(grid.ny + 1, grid.nx + 1), grad, u,
                            np.broadcast_to(np.asarray(mob, dtype=float).reshape(-1), (grid.n_cells,)).reshape(grid.shape).copy(),
                            iterations, residual, list(updates or []), tensor, rhs, bc, lin)


def solve_linear_elliptic(grid: StructuredGrid, coef, bc: BoundarySpec, rhs=None, assembler=None) -> PressureSolution:
    """Solve ``-div(K grad p) = rhs`` with per-cell scalar or tensor ``K``."""
    tensor = as_tensor(coef, grid.n_cells)
    prob = _Problem(grid, bc, rhs, assembler)
    p, rel = prob.solve(tensor)
    return _package(grid, p, tensor, 1.0, rhs=prob.rhs, bc=bc, lin=rel)


def solve_steady_nonlinear(grid: StructuredGrid, coef, mobility, bc: BoundarySpec, rhs=None,
                           tol: float = PICARD_TOL, max_iter: int = PICARD_MAX_ITER,
                           p_init=None, assembler=None) -> PressureSolution:
    """Picard iteration for ``-div(G(grad p) K grad p) = rhs``.

    ``mobility`` maps per-cell gradients ``(n_cells, 2)`` to ``G`` values.  The
    iteration stops once ``|p_new - p_old| / |p_old| <= tol``.
    """
    tensor = as_tensor(coef, grid.n_cells)
    prob = _Problem(grid, bc, rhs, assembler)
    if mobility is None or getattr(mobility, "is_trivial", False):
        p, rel = prob.solve(tensor)
        return _package(grid, p, tensor, 1.0, rhs=prob.rhs, bc=bc, lin=rel)

    if p_init is None:
        p, rel = prob.solve(tensor)
    else:
        p = np.asarray(p_init, dtype=float).ravel().copy()
    updates = []
    upd = np.inf
    for it in range(1, max_iter + 1):
        m = mobility(cell_gradients(grid, p))
        p_new, rel = prob.solve(tensor * m[:, None, None])
        denom = np.linalg.norm(p)
        diff = np.linalg.norm(p_new - p)
        upd = diff / denom if denom > 0 else diff
        updates.append(upd)
        p = p_new
        if upd <= tol:
            m = mobility(cell_gradients(grid, p))
            return _package(grid, p, tensor, m, it, upd, updates, prob.rhs, bc, rel)
    raise MaxIterationsExceeded(f"Picard iteration did not reach {tol:g} in {max_iter} steps",
                                iterations=max_iter, residual=upd, updates=updates)


def boundary_fluxes(sol: PressureSolution, faces=FACES) -> dict:
    """Outward flux of ``u`` through each face.

    Dirichlet faces use the consistent nodal reaction; corner reactions are
    split evenly between the Dirichlet faces that meet there.  Natural faces
    return their prescribed flux.
    """
    grid, bc = sol.grid, sol.bc
    asm = Assembler(grid, DofMap(grid, bc))
    local = asm.local_matrices(sol.tensor * sol.mobility.reshape(-1)[:, None, None])
    f = np.zeros(grid.n_nodes) if sol.rhs is None else asm.cell_load(sol.rhs)
    react = f - asm.apply_full(local, sol.p.ravel())
    dir_faces = [fc for fc in FACES if isinstance(bc.face(fc), Dirichlet)]
    share = np.zeros(grid.n_nodes)
    for fc in dir_faces:
        share[face_nodes(grid, fc)] += 1
    out = {}
    for fc in faces:
        cond = bc.face(fc)
        if isinstance(cond, Dirichlet):
            nodes = face_nodes(grid, fc)
            out[fc] = float(np.sum(react[nodes] / share[nodes]))
        elif isinstance(cond, (Flux, Well)):
            out[fc] = float(cond.Q) if not callable(cond.Q) else float("nan")
        else:
            out[fc] = 0.0
    return out


# -- transient ----------------------------------------------------------------------

@dataclass
class TransientSolution:
    """Time series of pressure solutions from implicit Euler."""

    times: np.ndarray
    states: list
    dt: float
    gamma: float
    picard_iterations: list = field(default_factory=list)

    def __len__(self):
        return len(self.states)


def solve_transient(grid: StructuredGrid, coef, mobility, phi, gamma: float, bc: BoundarySpec,
                    p_init, dt: float, T: float, tol: float = PICARD_TOL,
                    max_iter: int = PICARD_MAX_ITER, store_every: int = 1) -> TransientSolution:
    """Implicit Euler for ``gamma phi dp/dt = div(G K grad p)``.

    Each step solves ``gamma M_phi (p1 - p0)/dt + A(p1) p1 = F(t1)`` with an
    inner Picard loop.  ``Well``/``Flux`` conditions may carry ``Q(t)``.
    """
    if not dt > 0 or not T > 0:
        raise DomainError("dt and T must be positive")
    if not gamma > 0:
        raise DomainError("gamma must be positive")
    phi = np.asarray(phi, dtype=float).reshape(-1)
    if np.any(phi <= 0):
        raise DomainError("porosity must be positive")
    n_steps = int(round(T / dt))
    if n_steps < 1 or abs(n_steps * dt - T) > 1e-9 * T:
        raise DomainError(f"T={T} is not a whole number of steps dt={dt}")

    tensor = as_tensor(coef, grid.n_cells)
    dm = DofMap(grid, bc)
    asm = Assembler(grid, dm)
    mw = gamma * phi / dt
    trivial = mobility is None or getattr(mobility, "is_trivial", False)

    p = np.asarray(p_init, dtype=float).ravel().copy()
    if dm.fixed.any():
        p[dm.fixed] = dm.offset[dm.fixed]
    m = np.ones(grid.n_cells) if trivial else mobility(cell_gradients(grid, p))
    states = [_package(grid, p, tensor, m, 0, 0.0, bc=bc)]
    times = [0.0]
    iters = []
    lu = None
    for n in range(1, n_steps + 1):
        t1 = n * dt
        f_nodes = _neumann_load(grid, bc, t1) + asm.mass_apply(mw, p)
        q = p.copy()
        for it in range(1, max_iter + 1):
            if not trivial:
                m = mobility(cell_gradients(grid, q))
            local = asm.local_matrices(tensor * m[:, None, None], mass_weight=mw)
            b = _rhs(asm, local, f_nodes) + _well_load(dm, bc, t1)
            if trivial:
                if lu is None:
                    lu = _factor(asm.matrix(local))
                w = lu.solve(b)
            else:
                w, _ = _solve(asm.matrix(local), b, False)
            q_new = dm.expand(w)
            denom = np.linalg.norm(q)
            upd = np.linalg.norm(q_new - q) / denom if denom > 0 else np.linalg.norm(q_new - q)
            q = q_new
            if trivial or upd <= tol:
                break
        else:
            raise MaxIterationsExceeded(f"inner Picard failed at t={t1:g}", iterations=max_iter, residual=upd)
        iters.append(it)
        p = q
        if n % store_every == 0 or n == n_steps:
            if not trivial:
                m = mobility(cell_gradients(grid, p))
            states.append(_package(grid, p, tensor, m, it, 0.0, bc=bc))
            times.append(t1)
    return TransientSolution(np.array(times), states, dt, gamma, iters)
