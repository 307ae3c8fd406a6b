"""Generalized Forchheimer law and the nonlinear mobility.

The momentum relation ``g(|u|) u = -k grad p`` with

    g(s) = 1 + sum_j a_j s**alpha_j,    0 < alpha_1 < ... < alpha_m,  a_j >= 0

is rewritten as ``u = -G(|k grad p|) k grad p`` where ``G(xi) = 1/g(h^-1(xi))``
and ``h(s) = s g(s)``.  Viscosity is fixed to one.

Scalar routines (:func:`eval_g`, :func:`invert_h`, :func:`eval_G`, ...) work on
a single :class:`GPolynomial`.  :class:`GField` holds one polynomial per cell
with a shared exponent set and evaluates everything vectorized.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConvergenceError, DomainError

# relative residual target for h(s) = xi
H_RTOL = 1e-12
_MAX_NEWTON = 200


@dataclass(frozen=True)
class GPolynomial:
    """Coefficients and exponents of ``g(s) = 1 + sum a_j s**alpha_j``.

    ``terms`` is a tuple of ``(a_j, alpha_j)`` pairs with strictly increasing
    positive exponents and nonnegative coefficients.  An empty tuple is the
    Darcy law ``g = 1``.
    """

    terms: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        terms = tuple((float(a), float(al)) for a, al in self.terms)
        object.__setattr__(self, "terms", terms)
        prev = 0.0
        for a, alpha in terms:
            if not np.isfinite(a) or a < 0:
                raise DomainError(f"coefficient must be >= 0, got {a}")
            if not alpha > prev:
                raise DomainError(
                    f"exponents must be positive and strictly increasing, got {[t[1] for t in terms]}"
                )
            prev = alpha

    @classmethod
    def darcy(cls) -> "GPolynomial":
        return cls(())

    @classmethod
    def two_term(cls, beta: float) -> "GPolynomial":
        """The two-term law ``u + beta |u| u = -k grad p``."""
        return cls(((beta, 1.0),))

    @classmethod
    def three_term(cls, a1: float, a2: float) -> "GPolynomial":
        return cls(((a1, 1.0), (a2, 2.0)))

    @classmethod
    def power_law(cls, b1: float, m: float) -> "GPolynomial":
        """``u + b1 |u|**(m-1) u = -k grad p``."""
        return cls(((b1, m - 1.0),))

    @classmethod
    def from_config(cls, spec) -> "GPolynomial":
        """Build from a config value.

        Accepts a list of ``{"a": .., "alpha": ..}`` mappings, a list of
        ``(a, alpha)`` pairs, or a mapping ``{"law": "two-term", "beta": ..}``
        (also ``"darcy"``).
        """
        if spec is None:
            return cls.darcy()
        if isinstance(spec, GPolynomial):
            return spec
        if isinstance(spec, dict):
            law = str(spec.get("law", "")).lower()
            if law in ("darcy", "linear"):
                return cls.darcy()
            if law in ("two-term", "two_term", "forchheimer"):
                return cls.two_term(float(spec["beta"]))
            if law in ("three-term", "three_term"):
                return cls.three_term(float(spec["a1"]), float(spec["a2"]))
            if law in ("power", "power-law"):
                return cls.power_law(float(spec["b1"]), float(spec["m"]))
            raise DomainError(f"unknown law {spec.get('law')!r}")
        terms = []
        for item in spec:
            if isinstance(item, dict):
                terms.append((item["a"], item["alpha"]))
            else:
                a, alpha = item
                terms.append((a, alpha))
        return cls(tuple(terms))

    def to_config(self) -> list[dict]:
        return [{"a": a, "alpha": alpha} for a, alpha in self.terms]

    @property
    def coefficients(self) -> tuple[float, ...]:
        return tuple(a for a, _ in self.terms)

    @property
    def exponents(self) -> tuple[float, ...]:
        return tuple(al for _, al in self.terms)

    @property
    def is_darcy(self) -> bool:
        return all(a == 0.0 for a, _ in self.terms)


def _check_nonneg(x, name):
    if not x >= 0:
        raise DomainError(f"{name} must be >= 0, got {x}")


def eval_g(s: float, poly: GPolynomial) -> float:
    """Evaluate ``g(s) = 1 + sum a_j s**alpha_j``."""
    _check_nonneg(s, "s")
    out = 1.0
    for a, alpha in poly.terms:
        out += a * s**alpha
    return out


def _dg(s, poly):
    out = 0.0
    for a, alpha in poly.terms:
        if s > 0:
            out += a * alpha * s ** (alpha - 1.0)
    return out


def eval_h(s: float, poly: GPolynomial) -> float:
    """Evaluate ``h(s) = s g(s)``."""
    _check_nonneg(s, "s")
    return s * eval_g(s, poly)


def invert_h(xi: float, poly: GPolynomial) -> float:
    """Return the unique ``s >= 0`` with ``h(s) = xi``.

    Newton iteration seeded at ``xi / g(xi**(1/(1+alpha_max)))`` and kept
    inside the bracket ``[0, xi]``; a step leaving the bracket is replaced by
    bisection.
    """
    _check_nonneg(xi, "xi")
    xi = float(xi)
    if xi == 0.0 or poly.is_darcy:
        return xi
    alpha_max = poly.terms[-1][1]
    lo, hi = 0.0, xi
    s = xi / eval_g(xi ** (1.0 / (1.0 + alpha_max)), poly)
    tol = H_RTOL * max(xi, 1.0)
    r = np.inf
    for it in range(_MAX_NEWTON):
        r = s * eval_g(s, poly) - xi
        if r > 0:
            hi = s
        else:
            lo = s
        dh = eval_g(s, poly) + s * _dg(s, poly)
        step = r / dh
        s_new = s - step
        if not lo < s_new < hi:
            s_new = 0.5 * (lo + hi)
        if abs(s_new - s) <= 4.0 * np.finfo(float).eps * s or hi - lo <= 4.0 * np.finfo(float).eps * hi:
            s = s_new
            r = s * eval_g(s, poly) - xi
            if abs(r) <= tol:
                return s
        s = s_new
    raise ConvergenceError(
        f"invert_h did not converge for xi={xi}", iterations=_MAX_NEWTON, residual=r, bracket=(lo, hi)
    )


def eval_G(xi: float, poly: GPolynomial) -> float:
    """Nonlinear mobility ``G(xi) = 1/g(h^-1(xi))``, in ``(0, 1]``."""
    _check_nonneg(xi, "xi")
    if poly.is_darcy:
        return 1.0
    return 1.0 / eval_g(invert_h(xi, poly), poly)


def eval_G_twoterm(xi: float, beta: float) -> float:
    """Closed form of the mobility for the two-term law."""
    _check_nonneg(xi, "xi")
    _check_nonneg(beta, "beta")
    return 2.0 / (1.0 + np.sqrt(1.0 + 4.0 * beta * xi))


class GField:
    """Per-cell g-polynomials sharing one exponent set.

    Parameters
    ----------
    exponents : sequence of float
        Strictly increasing positive exponents ``alpha_j``.
    coefficients : array_like, shape (n_terms, ...)
        ``coefficients[j]`` is the field of ``a_j`` values.  Trailing shape is
        the cell shape (usually ``(ny, nx)``).
    """

    def __init__(self, exponents: Sequence[float], coefficients):
        self.exponents = tuple(float(a) for a in exponents)
        coeffs = np.asarray(coefficients, dtype=float)
        if coeffs.ndim == 0 or coeffs.shape[0] != len(self.exponents):
            raise DomainError("coefficients must have one leading row per exponent")
        prev = 0.0
        for alpha in self.exponents:
            if not alpha > prev:
                raise DomainError("exponents must be positive and strictly increasing")
            prev = alpha
        if np.any(coeffs < 0) or not np.all(np.isfinite(coeffs)):
            raise DomainError("coefficients must be finite and nonnegative")
        self.coefficients = coeffs
        self.coefficients.setflags(write=False)

    @classmethod
    def darcy(cls, shape) -> "GField":
        return cls((), np.zeros((0,) + tuple(shape)))

    @classmethod
    def two_term(cls, beta) -> "GField":
        beta = np.asarray(beta, dtype=float)
        return cls((1.0,), beta[None, ...])

    @classmethod
    def uniform(cls, poly: GPolynomial, shape) -> "GField":
        shape = tuple(shape)
        coeffs = np.empty((len(poly.terms),) + shape)
        for j, (a, _) in enumerate(poly.terms):
            coeffs[j] = a
        return cls(poly.exponents, coeffs)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.coefficients.shape[1:]

    @property
    def n_terms(self) -> int:
        return len(self.exponents)

    @property
    def is_darcy(self) -> bool:
        return self.n_terms == 0 or not np.any(self.coefficients)

    @property
    def is_two_term(self) -> bool:
        return self.exponents == (1.0,)

    def cell(self, index) -> GPolynomial:
        """The scalar polynomial of one cell."""
        return GPolynomial(tuple((float(self.coefficients[(j,) + tuple(np.atleast_1d(index))]), al)
                                 for j, al in enumerate(self.exponents)))

    def take(self, key) -> "GField":
        """Restrict to a sub-array of cells (any numpy index on the cell axes)."""
        if isinstance(key, tuple):
            key = (slice(None),) + key
        else:
            key = (slice(None), key)
        return GField(self.exponents, self.coefficients[key])

    def reshape(self, shape) -> "GField":
        shape = tuple(shape)
        if self.n_terms == 0 and -1 in shape:
            size = int(np.prod(self.shape))
            shape = tuple(size if d == -1 else d for d in shape)
        return GField(self.exponents, self.coefficients.reshape((self.n_terms,) + shape))

    def max_coefficient(self) -> float:
        return float(self.coefficients.max()) if self.coefficients.size else 0.0

    # vectorized kernels; ``s``/``xi`` broadcast against the cell shape

    def g(self, s):
        s = np.asarray(s, dtype=float)
        out = np.ones(np.broadcast_shapes(s.shape, self.shape))
        for a, alpha in zip(self.coefficients, self.exponents):
            out = out + a * s**alpha
        return out

    def h(self, s):
        return np.asarray(s, dtype=float) * self.g(s)

    def _dh(self, s):
        out = np.ones(np.broadcast_shapes(s.shape, self.shape))
        for a, alpha in zip(self.coefficients, self.exponents):
            out = out + a * (1.0 + alpha) * s**alpha
        return out

    def inverse_h(self, xi):
        """Vectorized safeguarded Newton for ``h(s) = xi``."""
        xi = np.asarray(xi, dtype=float)
        if np.any(xi < 0):
            raise DomainError("xi must be >= 0")
        shape = np.broadcast_shapes(xi.shape, self.shape)
        xi = np.broadcast_to(xi, shape)
        if self.is_darcy:
            return xi.copy()
        alpha_max = self.exponents[-1]
        lo = np.zeros(shape)
        hi = xi.copy()
        s = xi / self.g(xi ** (1.0 / (1.0 + alpha_max)))
        eps4 = 4.0 * np.finfo(float).eps
        tol = H_RTOL * np.maximum(xi, 1.0)
        for _ in range(_MAX_NEWTON):
            r = self.h(s) - xi
            pos = r > 0
            hi = np.where(pos, s, hi)
            lo = np.where(pos, lo, s)
            s_new = s - r / self._dh(s)
            bad = ~((s_new > lo) & (s_new < hi))
            s_new = np.where(bad, 0.5 * (lo + hi), s_new)
            done = (np.abs(s_new - s) <= eps4 * s) | (hi - lo <= eps4 * hi)
            s = s_new
            if np.all(done):
                r = self.h(s) - xi
                if np.all(np.abs(r) <= tol):
                    return s
        r = self.h(s) - xi
        raise ConvergenceError("vectorized invert_h did not converge", iterations=_MAX_NEWTON,
                               residual=float(np.max(np.abs(r) / np.maximum(xi, 1.0))))

    def mobility(self, xi):
        """``G(xi)`` per cell; ``xi`` is the magnitude ``|k grad p|``."""
        xi = np.asarray(xi, dtype=float)
        if self.is_darcy:
            return np.ones(np.broadcast_shapes(xi.shape, self.shape))
        if self.is_two_term:
            return 2.0 / (1.0 + np.sqrt(1.0 + 4.0 * self.coefficients[0] * xi))
        return 1.0 / self.g(self.inverse_h(xi))


def stack_fields(fields: Iterable[GField]) -> GField:
    """Concatenate flattened fields that share an exponent set."""
    fields = list(fields)
    exps = fields[0].exponents
    for f in fields:
        if f.exponents != exps:
            raise DomainError("fields have different exponent sets")
    coeffs = np.concatenate([f.coefficients.reshape(f.n_terms, -1) for f in fields], axis=1)
    return GField(exps, coeffs)
