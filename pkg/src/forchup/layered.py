"""Closed-form upscaling of stratified media.

Parallel flow (gradient along the layers) averages arithmetically; flow
across the layers averages harmonically.  Layers are indexed bottom to top
along ``x2``; every layer shares one exponent set.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import quad

from .errors import ConvergenceError, DomainError
from .forchheimer import GField, GPolynomial, eval_G

QUAD_RTOL = 1e-10


@dataclass(frozen=True)
class LayerStack:
    """Layers of thickness ``h``, permeability ``k`` and g-polynomial ``poly``."""

    h: tuple
    k: tuple
    polys: tuple

    def __init__(self, h, k, polys=None):
        h = tuple(float(v) for v in h)
        k = tuple(float(v) for v in k)
        if polys is None:
            polys = (GPolynomial.darcy(),) * len(h)
        polys = tuple(polys)
        if not h or len(h) != len(k) or len(h) != len(polys):
            raise DomainError("layer lists must be nonempty and of equal length")
        if any(v <= 0 for v in h) or any(v <= 0 for v in k):
            raise DomainError("thicknesses and permeabilities must be positive")
        exps = {p.exponents for p in polys if not p.is_darcy}
        if len(exps) > 1:
            raise DomainError("all layers must share one exponent set")
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "polys", polys)

    @classmethod
    def two_term(cls, h, k, beta) -> "LayerStack":
        return cls(h, k, [GPolynomial.two_term(b) for b in beta])

    @property
    def n(self) -> int:
        return len(self.h)

    @property
    def H(self) -> float:
        return float(sum(self.h))

    @property
    def exponents(self) -> tuple:
        for p in self.polys:
            if not p.is_darcy:
                return p.exponents
        return ()

    def coefficient_matrix(self) -> np.ndarray:
        """``a[j, i]`` for exponent ``j`` and layer ``i`` (zeros for Darcy layers)."""
        exps = self.exponents
        out = np.zeros((len(exps), self.n))
        for i, p in enumerate(self.polys):
            if p.is_darcy:
                continue
            for a, al in p.terms:
                out[exps.index(al), i] = a
        return out

    def gfield(self) -> GField:
        return GField(self.exponents, self.coefficient_matrix())

    def betas(self) -> np.ndarray:
        """Two-term coefficients; raises if a layer is not two-term or Darcy."""
        if self.exponents not in ((), (1.0,)):
            raise DomainError("stack is not two-term")
        m = self.coefficient_matrix()
        return m[0] if m.size else np.zeros(self.n)

    @classmethod
    def read_csv(cls, path) -> "LayerStack":
        """Columns ``thickness,k`` plus ``a_<alpha>`` per g-term (``a_1`` is beta)."""
        with Path(path).open() as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise DomainError(f"{path}: no layers")
        terms = sorted((float(c[2:]), c) for c in rows[0] if c.startswith("a_"))
        h, k, polys = [], [], []
        for r in rows:
            h.append(float(r["thickness"]))
            k.append(float(r["k"]))
            polys.append(GPolynomial(tuple((float(r[c]), al) for al, c in terms)))
        return cls(h, k, polys)


def _arrays(stack):
    return np.array(stack.h), np.array(stack.k)


# -- parallel flow -----------------------------------------------------------

def kstar_parallel(stack: LayerStack) -> float:
    h, k = _arrays(stack)
    return float((k * h).sum() / h.sum())


def _layer_mobility(stack, xi_layers):
    return np.array([eval_G(float(x), p) for x, p in zip(xi_layers, stack.polys)])


def gstar_parallel(stack: LayerStack, xi: float) -> float:
    if xi < 0:
        raise DomainError("xi must be >= 0")
    h, k = _arrays(stack)
    G = _layer_mobility(stack, k * xi)
    return float((G * k * h).sum() / (k * h).sum())


def gpoly_parallel(stack: LayerStack, xi: float) -> dict:
    """Layer velocities, their thickness average and ``1/g*(u*)``.

    Velocities are horizontal components for a gradient ``(xi, 0)``.
    """
    if xi < 0:
        raise DomainError("xi must be >= 0")
    h, k = _arrays(stack)
    G = _layer_mobility(stack, k * xi)
    u = -G * k * xi
    ustar = float((u * h).sum() / h.sum())
    # 1/g_i(|u_i|) = G_i by construction of G
    inv_g = float((G * k * h).sum() / (k * h).sum())
    return {"u": u, "ustar": ustar, "inv_gstar": inv_g}


def _twoterm_layer_speed(k, beta, xi):
    return 2.0 * k / (1.0 + np.sqrt(1.0 + 4.0 * beta * k * xi))


def betastar_parallel(stack: LayerStack, xi: float) -> float:
    """Upscaled two-term coefficient for parallel flow at gradient ``xi``."""
    beta = stack.betas()
    if xi < 0:
        raise DomainError("xi must be >= 0")
    if xi == 0:
        return betastar_parallel_limits(stack)[0]
    h, k = _arrays(stack)
    w = h / h.sum()
    u = _twoterm_layer_speed(k, beta, xi)
    return float((beta * u**2 * w).sum() / (u * w).sum() ** 2)


def betastar_parallel_limits(stack: LayerStack) -> tuple[float, float]:
    """``(xi -> 0, xi -> inf)`` limits of :func:`betastar_parallel`."""
    beta = stack.betas()
    h, k = _arrays(stack)
    w = h / h.sum()
    ks = float((k * w).sum())
    lo = float((beta * k**2 * w).sum() / ks**2)
    if np.any(beta == 0):
        hi = 0.0  # a Darcy layer dominates the flux at large gradients
    else:
        hi = float(ks / (np.sqrt(k / beta) * w).sum() ** 2)
    return lo, hi


# -- perpendicular flow ------------------------------------------------------

def kstar_perpendicular(stack: LayerStack) -> float:
    h, k = _arrays(stack)
    return float(h.sum() / (h / k).sum())


def astar_perpendicular(stack: LayerStack) -> tuple:
    """Harmonically weighted g-coefficients, one per shared exponent."""
    h, k = _arrays(stack)
    w = h / k
    a = stack.coefficient_matrix()
    return tuple(float(v) for v in (a * w).sum(axis=1) / w.sum())


def gpoly_perpendicular(stack: LayerStack) -> GPolynomial:
    return GPolynomial(tuple(zip(astar_perpendicular(stack), stack.exponents)))


def gstar_perpendicular(stack: LayerStack, Q: float, L: float) -> tuple[float, np.ndarray]:
    """``G*`` and layer gradients for total flux ``Q`` through width ``L``."""
    if not L > 0:
        raise DomainError("L must be positive")
    h, k = _arrays(stack)
    s = abs(Q) / L
    g = np.array([1.0 + sum(a * s**al for a, al in p.terms) for p in stack.polys])
    G = 1.0 / g
    xi_i = abs(Q) / (G * k * L)
    ks = kstar_perpendicular(stack)
    inv = ks / h.sum() * ((1.0 / G) * (h / k)).sum()
    return float(1.0 / inv), xi_i


def gstar_perpendicular_at_gradient(stack: LayerStack, xi: float) -> float:
    """``G*`` across the layers at mean gradient ``xi``.

    Equals the mobility of the harmonically averaged polynomial at ``k* xi``.
    """
    if xi < 0:
        raise DomainError("xi must be >= 0")
    return eval_G(kstar_perpendicular(stack) * xi, gpoly_perpendicular(stack))


# -- continuous profiles -----------------------------------------------------

def integrate(f: Callable, a: float, b: float, breakpoints: Sequence[float] = (), rtol: float = QUAD_RTOL) -> float:
    """Adaptive Gauss-Kronrod on each smooth piece.

    Nodes are interior, so step functions may take either value at a
    breakpoint without spoiling the result.
    """
    pts = [a] + sorted(p for p in breakpoints if a < p < b) + [b]
    total = 0.0
    for lo, hi in zip(pts[:-1], pts[1:]):
        val, err, info = quad(lambda x: float(np.asarray(f(np.array([x]))).reshape(-1)[0]), lo, hi,
                              epsabs=0.0, epsrel=rtol, limit=200, full_output=1)[:3]
        if err > 10 * rtol * max(abs(val), 1e-300) and err > 1e-14:
            raise ConvergenceError(f"quadrature on [{lo}, {hi}] did not converge", iterations=info["neval"],
                                   residual=err)
        total += val
    return total


@dataclass(frozen=True)
class Profile:
    """Continuous layer data on ``[0, H]``.

    ``k`` and each ``a[j]`` are vectorized callables of ``x2``; ``exponents``
    are shared.  ``breakpoints`` mark discontinuities for the quadrature.
    """

    k: Callable
    H: float = 1.0
    a: tuple = ()
    exponents: tuple = ()
    breakpoints: tuple = ()

    def g(self, s, x2):
        out = np.ones_like(np.asarray(x2, dtype=float))
        for aj, al in zip(self.a, self.exponents):
            out = out + np.asarray(aj(x2)) * np.asarray(s) ** al
        return out

    def mobility(self, xi, x2):
        """``G(xi; x2)`` pointwise; ``xi`` broadcast against ``x2``."""
        x2 = np.atleast_1d(np.asarray(x2, dtype=float))
        xi = np.broadcast_to(np.asarray(xi, dtype=float), x2.shape)
        if not self.a:
            return np.ones_like(x2)
        coeffs = np.stack([np.broadcast_to(np.asarray(aj(x2), dtype=float), x2.shape) for aj in self.a])
        return GField(self.exponents, coeffs).mobility(xi)

    def _int(self, f):
        return integrate(f, 0.0, self.H, self.breakpoints)


def continuous_kstar_parallel(prof: Profile) -> float:
    return prof._int(prof.k) / prof.H


def continuous_kstar_perpendicular(prof: Profile) -> float:
    return prof.H / prof._int(lambda x: 1.0 / prof.k(x))


def continuous_gstar_parallel(prof: Profile, xi: float) -> float:
    ks = continuous_kstar_parallel(prof)
    return prof._int(lambda x: prof.mobility(prof.k(x) * xi, x) * prof.k(x)) / (prof.H * ks)


def continuous_betastar_parallel(prof: Profile, xi: float) -> float:
    if prof.exponents != (1.0,):
        raise DomainError("two-term profile required")
    beta = prof.a[0]
    H = prof.H

    def speed(x):
        return _twoterm_layer_speed(prof.k(x), beta(x), xi)

    num = prof._int(lambda x: beta(x) * speed(x) ** 2) / H
    den = (prof._int(speed) / H) ** 2
    return num / den


def continuous_astar_perpendicular(prof: Profile) -> tuple:
    w = prof._int(lambda x: 1.0 / prof.k(x))
    return tuple(prof._int(lambda x, aj=aj: aj(x) / prof.k(x)) / w for aj in prof.a)


def continuous_gstar_perpendicular(prof: Profile, Q: float, L: float) -> float:
    """``G*`` across a continuous profile for flux ``Q`` through width ``L``."""
    s = abs(Q) / L
    ks = continuous_kstar_perpendicular(prof)
    inv = ks / prof.H * prof._int(lambda x: prof.g(s, x) / prof.k(x))
    return 1.0 / inv


# -- G* evaluators for coarse blocks -----------------------------------------

class LayeredGStar:
    """Closed-form ``G*`` of a block whose cells are treated as layers.

    ``kind="parallel"`` averages ``G_c(k_c |xi|) k_c``; ``"perpendicular"``
    uses the harmonically averaged polynomial at ``k_harm |xi|``.  Cells are
    weighted by area, so any block geometry is accepted.
    """

    def __init__(self, kind: str, k, gfield: GField, weights=None):
        if kind not in ("parallel", "perpendicular"):
            raise DomainError(f"unknown layered kind {kind!r}")
        self.kind = kind
        self.k = np.asarray(k, dtype=float).reshape(-1)
        self.gfield = gfield.reshape((self.k.size,))
        w = np.ones_like(self.k) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
        self.w = w / w.sum()
        if kind == "perpendicular":
            hw = self.w / self.k
            self.kstar = 1.0 / hw.sum()
            a = (self.gfield.coefficients * hw).sum(axis=1) / hw.sum()
            self._poly = GField(self.gfield.exponents, a.reshape(-1, 1))
        else:
            self.kstar = float((self.w * self.k).sum())

    @classmethod
    def from_block(cls, block, kind: str) -> "LayeredGStar":
        return cls(kind, block.k, block.gfield)

    @property
    def is_trivial(self) -> bool:
        return self.gfield.is_darcy

    def magnitude(self, xi) -> np.ndarray:
        """``G*`` as a function of ``|xi|``."""
        s = np.atleast_1d(np.asarray(xi, dtype=float))
        if self.is_trivial:
            return np.ones_like(s)
        if self.kind == "perpendicular":
            return self._poly.mobility(self.kstar * s[:, None])[:, 0]
        G = self.gfield.mobility(self.k[None, :] * s[:, None])
        return (G * self.k * self.w).sum(axis=1) / self.kstar

    def evaluate(self, xi) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        shape = xi.shape[:-1]
        x = xi.reshape(-1, 2)
        return self.magnitude(np.hypot(x[:, 0], x[:, 1])).reshape(shape)

    def __call__(self, grad):
        return self.evaluate(grad)

    def to_dict(self) -> dict:
        return {"kind": "layered", "layered_kind": self.kind, "k": self.k.tolist(), "weights": self.w.tolist(),
                "exponents": list(self.gfield.exponents), "coefficients": self.gfield.coefficients.tolist()}

    @classmethod
    def from_dict(cls, d) -> "LayeredGStar":
        n = len(d["k"])
        coeffs = np.asarray(d["coefficients"], dtype=float).reshape(len(d["exponents"]), n)
        return cls(d["layered_kind"], d["k"], GField(d["exponents"], coeffs), d["weights"])
