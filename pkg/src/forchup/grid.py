"""Structured rectangular grids, cell fields and permeability generators.

Cell arrays are stored with shape ``(ny, nx)``: row ``j`` runs along x2 and
column ``i`` along x1.  Nodes are numbered row-major, ``n = j*(nx+1) + i``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError

PATTERNS = ("vertical-stratified", "horizontal-stratified", "random", "linear")


@dataclass(frozen=True)
class StructuredGrid:
    """``nx`` x ``ny`` rectangular cells covering ``[x0, x0+Lx] x [y0, y0+Ly]``."""

    nx: int
    ny: int
    Lx: float = 1.0
    Ly: float = 1.0
    x0: float = 0.0
    y0: float = 0.0

    def __post_init__(self):
        if int(self.nx) != self.nx or int(self.ny) != self.ny or self.nx < 1 or self.ny < 1:
            raise DomainError(f"cell counts must be positive integers, got {self.nx}x{self.ny}")
        if not (self.Lx > 0 and self.Ly > 0):
            raise DomainError("domain lengths must be positive")
        object.__setattr__(self, "nx", int(self.nx))
        object.__setattr__(self, "ny", int(self.ny))

    @property
    def h1(self) -> float:
        return self.Lx / self.nx

    @property
    def h2(self) -> float:
        return self.Ly / self.ny

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def n_nodes(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    @property
    def cell_area(self) -> float:
        return self.h1 * self.h2

    @property
    def area(self) -> float:
        return self.Lx * self.Ly

    def node_coords(self):
        """Arrays ``(X1, X2)`` of shape ``(ny+1, nx+1)``."""
        x = self.x0 + np.linspace(0.0, self.Lx, self.nx + 1)
        y = self.y0 + np.linspace(0.0, self.Ly, self.ny + 1)
        return np.meshgrid(x, y)

    def cell_centers(self):
        """Arrays ``(X1, X2)`` of shape ``(ny, nx)``."""
        x = self.x0 + (np.arange(self.nx) + 0.5) * self.h1
        y = self.y0 + (np.arange(self.ny) + 0.5) * self.h2
        return np.meshgrid(x, y)

    @property
    def center(self) -> tuple[float, float]:
        return (self.x0 + 0.5 * self.Lx, self.y0 + 0.5 * self.Ly)

    def refined(self, r: int) -> "StructuredGrid":
        return StructuredGrid(self.nx * r, self.ny * r, self.Lx, self.Ly, self.x0, self.y0)


@dataclass(frozen=True)
class ScalarCellField:
    """One value per cell of ``grid``."""

    grid: StructuredGrid
    values: np.ndarray
    positive: bool = False

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != self.grid.shape:
            raise DomainError(f"field shape {v.shape} does not match grid {self.grid.shape}")
        if self.positive and not np.all(v > 0):
            raise DomainError("field must be strictly positive")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def mean(self) -> float:
        return float(self.values.mean())


@dataclass(frozen=True)
class BlockPartition:
    """Split a fine grid into ``mx`` x ``my`` equal blocks of whole cells."""

    fine: StructuredGrid
    mx: int
    my: int

    def __post_init__(self):
        if self.mx < 1 or self.my < 1:
            raise DomainError("block counts must be positive")
        if self.fine.nx % self.mx or self.fine.ny % self.my:
            raise DomainError(
                f"fine grid {self.fine.nx}x{self.fine.ny} is not divisible into {self.mx}x{self.my} blocks"
            )

    @property
    def bx(self) -> int:
        return self.fine.nx // self.mx

    @property
    def by(self) -> int:
        return self.fine.ny // self.my

    @property
    def coarse(self) -> StructuredGrid:
        f = self.fine
        return StructuredGrid(self.mx, self.my, f.Lx, f.Ly, f.x0, f.y0)

    @property
    def n_blocks(self) -> int:
        return self.mx * self.my

    def block_slices(self, bi: int, bj: int):
        """``(rows, cols)`` slices of block ``(bi, bj)`` into a ``(ny, nx)`` array."""
        return (slice(bj * self.by, (bj + 1) * self.by), slice(bi * self.bx, (bi + 1) * self.bx))

    def block_grid(self, bi: int, bj: int) -> StructuredGrid:
        f = self.fine
        lx = self.bx * f.h1
        ly = self.by * f.h2
        return StructuredGrid(self.bx, self.by, lx, ly, f.x0 + bi * lx, f.y0 + bj * ly)

    def blocks(self):
        """Iterate ``(bi, bj)`` in row-major block order."""
        for bj in range(self.my):
            for bi in range(self.mx):
                yield bi, bj


def _layer_values(n_layers, k_min, contrast, profile):
    if profile == "alternating":
        t = (np.arange(n_layers) % 2).astype(float)
    elif profile == "ramp":
        t = np.linspace(0.0, 1.0, n_layers) if n_layers > 1 else np.zeros(1)
    else:
        raise DomainError(f"unknown layer profile {profile!r}")
    return k_min * (1.0 + contrast * t)


def _layer_index(n_cells, n_layers, interfaces):
    """Layer id of each cell along the stratified axis."""
    if interfaces is None:
        if n_layers > n_cells:
            raise DomainError(f"layer_count {n_layers} exceeds {n_cells} cells")
        return (np.arange(n_cells) * n_layers) // n_cells
    edges = np.asarray(interfaces, dtype=float)
    centers = (np.arange(n_cells) + 0.5) / n_cells
    return np.searchsorted(edges, centers, side="right")


def generate_permeability(
    grid: StructuredGrid,
    pattern: str,
    k_min: float = 1.0,
    contrast: float = 10.0,
    layer_count: int = 2,
    seed: int = 0,
    profile: str = "alternating",
    interfaces=None,
) -> ScalarCellField:
    """Generate one of the four fine-scale permeability patterns.

    The field spans ``[k_min, k_min*(1+contrast)]`` exactly.  Stratified
    patterns cycle through layer values (``profile="alternating"`` gives the
    two-value stack ``k_min, k_max, k_min, ...``; ``"ramp"`` spaces them
    evenly).  ``interfaces`` optionally gives interior layer boundaries as
    fractions of the stratified extent.  ``random`` draws i.i.d. uniform
    values from a seeded PCG64 stream and rescales them to hit both bounds.
    """
    if pattern not in PATTERNS:
        raise DomainError(f"unknown pattern {pattern!r}; expected one of {PATTERNS}")
    if not k_min > 0:
        raise DomainError("k_min must be positive")
    if contrast < 0:
        raise DomainError("contrast must be >= 0")
    ny, nx = grid.shape
    k_max = k_min * (1.0 + contrast)
    if contrast == 0:
        return ScalarCellField(grid, np.full(grid.shape, float(k_min)), positive=True)

    if pattern in ("vertical-stratified", "horizontal-stratified"):
        if layer_count < 1:
            raise DomainError("layer_count must be >= 1")
        n_along = nx if pattern == "vertical-stratified" else ny
        n_layers = layer_count if interfaces is None else len(interfaces) + 1
        layer = _layer_index(n_along, n_layers, interfaces)
        vals = _layer_values(n_layers, k_min, contrast, profile)[layer]
        if n_layers == 1:
            vals = np.full(n_along, float(k_min))
        if pattern == "vertical-stratified":
            k = np.broadcast_to(vals[None, :], grid.shape)
        else:
            k = np.broadcast_to(vals[:, None], grid.shape)
        return ScalarCellField(grid, np.array(k), positive=True)

    if pattern == "linear":
        X, Y = grid.cell_centers()
        t = (X - grid.x0) / grid.Lx + (Y - grid.y0) / grid.Ly
        t = (t - t.min()) / (t.max() - t.min()) if t.max() > t.min() else np.zeros_like(t)
        return ScalarCellField(grid, k_min + (k_max - k_min) * t, positive=True)

    rng = np.random.Generator(np.random.PCG64(seed))
    raw = rng.uniform(k_min, k_max, size=grid.shape)
    lo, hi = raw.min(), raw.max()
    if hi > lo:
        k = k_min + (raw - lo) * (k_max - k_min) / (hi - lo)
    else:
        k = np.full(grid.shape, float(k_min))
    return ScalarCellField(grid, k, positive=True)


def porosity_from_k(k: ScalarCellField, alpha: float = 1.0 / 3.0, scale: float = 0.1) -> ScalarCellField:
    """Empirical porosity ``phi = scale * k**alpha``."""
    if not np.all(k.values > 0):
        raise DomainError("permeability must be positive")
    return ScalarCellField(k.grid, scale * k.values**alpha, positive=True)


def beta_from_phi_k(phi: ScalarCellField, k: ScalarCellField) -> ScalarCellField:
    """Forchheimer coefficient ``beta = phi / sqrt(k)``."""
    if phi.grid != k.grid:
        raise DomainError("porosity and permeability live on different grids")
    if not np.all(k.values > 0):
        raise DomainError("permeability must be positive")
    return ScalarCellField(k.grid, phi.values / np.sqrt(k.values))


def beta_from_k_contrast(k: ScalarCellField, beta_min: float, beta_ratio: float) -> ScalarCellField:
    """Affine map of ``k`` onto ``[beta_min, beta_min*(1+beta_ratio)]``.

    Used for the incompressible sweeps where only the relative magnitude
    ``dbeta/beta_min`` is prescribed; larger ``k`` gets larger ``beta``.
    """
    v = k.values
    lo, hi = v.min(), v.max()
    t = (v - lo) / (hi - lo) if hi > lo else np.zeros_like(v)
    return ScalarCellField(k.grid, beta_min * (1.0 + beta_ratio * t))


# -- file formats -----------------------------------------------------------

def write_field_csv(path, field: ScalarCellField) -> None:
    """Write ``i,j,value`` rows, row-major (``j`` outer)."""
    path = Path(path)
    ny, nx = field.grid.shape
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "value"])
        for j in range(ny):
            for i in range(nx):
                w.writerow([i, j, repr(float(field.values[j, i]))])


def read_field_csv(path, grid: StructuredGrid) -> ScalarCellField:
    vals = np.full(grid.shape, np.nan)
    with Path(path).open() as fh:
        for row in csv.DictReader(fh):
            vals[int(row["j"]), int(row["i"])] = float(row["value"])
    if np.isnan(vals).any():
        raise DomainError(f"{path}: missing cells for a {grid.nx}x{grid.ny} grid")
    return ScalarCellField(grid, vals)


def write_vtk(path, grid: StructuredGrid, cell_data=None, point_data=None, title="forchup") -> None:
    """Legacy VTK structured-points file with optional cell and point scalars."""
    lines = [
        "# vtk DataFile Version 3.0",
        title,
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        f"DIMENSIONS {grid.nx + 1} {grid.ny + 1} 1",
        f"ORIGIN {grid.x0!r} {grid.y0!r} 0",
        f"SPACING {grid.h1!r} {grid.h2!r} 1",
    ]
    if point_data:
        lines.append(f"POINT_DATA {grid.n_nodes}")
        for name, arr in point_data.items():
            lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            lines += [repr(float(v)) for v in np.asarray(arr).ravel()]
    if cell_data:
        lines.append(f"CELL_DATA {grid.n_cells}")
        for name, arr in cell_data.items():
            lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            lines += [repr(float(v)) for v in np.asarray(arr).ravel()]
    Path(path).write_text("\n".join(lines) + "\n")
