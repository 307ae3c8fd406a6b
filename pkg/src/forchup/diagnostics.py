"""Basic profile, productivity index and upscaling error metrics.

The well boundary ``Gamma_i`` is one full face of the domain; the remaining
faces are no-flux.  Fine and coarse models are both reduced to a
:class:`Discretization` (grid, cell tensors, porosity, mobility) so every
diagnostic runs the same solver path on either scale.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .errors import DomainError
from .fem import (
    FACES,
    BoundarySpec,
    Dirichlet,
    NoFlux,
    PressureSolution,
    TransientSolution,
    Well,
    Flux,
    as_tensor,
    solve_steady_nonlinear,
    solve_transient,
)
from .grid import StructuredGrid

log = logging.getLogger(__name__)

WELL_MODELS = ("equipotential", "uniform-flux")


@dataclass
class Discretization:
    """Everything a solver needs on one scale."""

    grid: StructuredGrid
    tensor: np.ndarray            # (n_cells, 2, 2)
    phi: Optional[np.ndarray]     # (ny, nx)
    mobility: Optional[Callable]
    label: str = ""
    owner: Optional[np.ndarray] = None

    @classmethod
    def from_fine(cls, fine) -> "Discretization":
        return cls(fine.grid, as_tensor(fine.k, fine.grid.n_cells),
                   None if fine.phi is None else np.asarray(fine.phi, dtype=float),
                   fine.mobility(), "fine")

    @classmethod
    def from_coarse(cls, coarse, refine: int = 1) -> "Discretization":
        grid, tensor, phi, owner = coarse.discretize(refine)
        phi = None if np.isnan(phi).any() else phi
        return cls(grid, tensor.reshape(-1, 2, 2), phi, coarse.mobility(owner), "coarse", owner)

    @property
    def mean_phi(self) -> float:
        if self.phi is None:
            raise DomainError("porosity is required")
        return float(np.mean(self.phi))

    def gradient_range(self, sol: PressureSolution) -> float:
        g = sol.grad.reshape(-1, 2)
        return float(np.hypot(g[:, 0], g[:, 1]).max())


@dataclass(frozen=True)
class PIReport:
    """Rate, drawdown and productivity index at one time."""

    Q: float
    drawdown: float
    J: float
    time: Optional[float] = None


def well_bc(face: str, value: Union[float, Callable] = 0.0, kind: str = "dirichlet", Q=0.0) -> BoundarySpec:
    """Boundary spec with ``Gamma_i`` on ``face`` and no-flux elsewhere."""
    if face not in FACES:
        raise DomainError(f"unknown face {face!r}")
    if kind == "dirichlet":
        cond = Dirichlet(value)
    elif kind == "equipotential":
        cond = Well(Q)
    elif kind == "uniform-flux":
        cond = Flux(Q)
    else:
        raise DomainError(f"unknown well condition {kind!r}")
    faces = {f: NoFlux() for f in FACES}
    faces[face] = cond
    return BoundarySpec(**faces)


def solve_basic_profile(model: Discretization, Q: float, gamma: float = 1.0, well_face: str = "right",
                        phi0: Union[float, Callable] = 0.0, **solver_kw) -> PressureSolution:
    """Steady ``-div(G k grad W) = gamma (Q/|U|) phi`` with ``W = phi0`` on the well face."""
    if model.phi is None:
        raise DomainError("basic profile needs porosity")
    grid = model.grid
    rhs = gamma * Q / grid.area * np.asarray(model.phi)
    if Q == 0 and not callable(phi0) and phi0 == 0:
        bc = well_bc(well_face, 0.0)
        return solve_steady_nonlinear(grid, model.tensor, None, bc, rhs=rhs, **solver_kw)
    bc = well_bc(well_face, phi0)
    return solve_steady_nonlinear(grid, model.tensor, model.mobility, bc, rhs=rhs, **solver_kw)


def drawdown(sol: PressureSolution, well_face: str) -> float:
    """Domain mean pressure minus the mean over the well face."""
    return sol.mean_pressure() - sol.face_mean(well_face)


def pi_pss(W: PressureSolution, Q: float, well_face: str = "right") -> PIReport:
    dd = drawdown(W, well_face)
    if dd == 0:
        if Q == 0:
            raise DomainError("productivity index undefined for Q = 0")
        raise DomainError("zero drawdown with nonzero rate")
    return PIReport(Q, dd, Q / dd)


def pi_transient(ts: TransientSolution, Q, well_face: str = "right") -> list:
    """``J(t)`` for every stored state after the initial one."""
    out = []
    for t, s in zip(ts.times[1:], ts.states[1:]):
        q = Q(t) if callable(Q) else Q
        dd = drawdown(s, well_face)
        if dd == 0:
            raise DomainError(f"zero drawdown at t={t}")
        out.append(PIReport(q, dd, q / dd, float(t)))
    return out


def run_transient(model: Discretization, Q, p_init, dt: float, T: float, gamma: float = 1.0,
                  well_face: str = "right", well_model: str = "equipotential", **kw) -> TransientSolution:
    """Transient run with a total-rate condition on the well face.

    ``equipotential`` shares one pressure over the face and imposes the
    outward flux ``gamma <phi> Q``, the flux of the basic profile, so the
    pseudo-steady state is an exact discrete solution.  ``uniform-flux``
    imposes density ``Q/|Gamma_i|`` instead.
    """
    if well_model not in WELL_MODELS:
        raise DomainError(f"well_model must be one of {WELL_MODELS}")
    if model.phi is None:
        raise DomainError("transient runs need porosity")
    scale = gamma * model.mean_phi if well_model == "equipotential" else 1.0
    if callable(Q):
        rate = lambda t: scale * Q(t)  # noqa: E731
    else:
        rate = scale * float(Q)
    kind = "equipotential" if well_model == "equipotential" else "uniform-flux"
    bc = well_bc(well_face, kind=kind, Q=rate)
    return solve_transient(model.grid, model.tensor, model.mobility, model.phi, gamma, bc,
                           np.asarray(p_init).ravel(), dt, T, **kw)


def velocity_error(u_fine, u_coarse) -> float:
    """``|<u> - <u*>| / |<u>|`` from averaged velocities or solutions."""
    a = u_fine.average_velocity() if isinstance(u_fine, PressureSolution) else np.asarray(u_fine, dtype=float)
    b = u_coarse.average_velocity() if isinstance(u_coarse, PressureSolution) else np.asarray(u_coarse, dtype=float)
    na = np.linalg.norm(a)
    if na == 0:
        raise DomainError("fine average velocity is zero")
    return float(np.linalg.norm(a - b) / na)


def relative_error(ref: float, val: float) -> float:
    if ref == 0:
        raise DomainError("reference value is zero")
    return abs(val - ref) / abs(ref)


def velocity_deviation(sol: PressureSolution, u_s: np.ndarray) -> float:
    """``int |u - u_s|^2 dx`` for per-cell velocities."""
    d = sol.velocity.reshape(-1, 2) - np.asarray(u_s).reshape(-1, 2)
    return float((d**2).sum() * sol.grid.cell_area)


def well_flux_realized(W: PressureSolution, well_face: str) -> float:
    """Outward boundary flux of the basic profile through the well face."""
    from .fem import boundary_fluxes
    return boundary_fluxes(W, (well_face,))[well_face]


def pss_rate(Q: float, area: float) -> float:
    """Uniform decline rate of the pseudo-steady state driven by ``Q``."""
    return Q / area


__all__ = [
    "Discretization", "PIReport", "well_bc", "solve_basic_profile", "drawdown", "pi_pss",
    "pi_transient", "run_transient", "velocity_error", "relative_error", "velocity_deviation",
    "well_flux_realized", "pss_rate",
]
