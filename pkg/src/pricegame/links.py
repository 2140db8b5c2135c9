"""Demand link functions and their concavity calculus.

A link is a positive, strictly increasing map from a scalar price index to
expected demand.  The module provides the power/log transform pair used to
express "concave under transformation" constraints, the virtual-valuation
map whose monotone inverse yields closed-form best responses, and grid-based
shape diagnostics.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
from scipy.special import ndtr

from .errors import (
    DegenerateDerivativeError,
    DomainError,
    FormatError,
    ShapeViolationError,
)

_SQRT_2PI = math.sqrt(2.0 * math.pi)
_SQRT_2 = math.sqrt(2.0)


def _norm_pdf(z):
    return np.exp(-0.5 * np.square(z)) / _SQRT_2PI


def d_transform(s: float, y):
    """Concavity transform: log y at s=0, -y**s for s<0, y**s for s>0.

    A positive function is s-concave exactly when its transform is concave;
    s=1 is the identity branch.  Raises DomainError for non-positive y.
    """
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0.0):
        raise DomainError("d_transform requires y > 0")
    if s == 0.0:
        out = np.log(y)
    elif s < 0.0:
        out = -np.power(y, s)
    else:
        out = np.power(y, s)
    return float(out) if out.ndim == 0 else out


def h_transform(s: float, x):
    """Inverse of :func:`d_transform`: exp at s=0, (-x)**(1/s) for s<0, x**(1/s) for s>0.

    Branch domains: any real x at s=0, x<0 for s<0, x>0 for s>0.
    """
    x = np.asarray(x, dtype=float)
    if s == 0.0:
        out = np.exp(x)
    elif s < 0.0:
        if np.any(x >= 0.0):
            raise DomainError("h_transform with s<0 requires x < 0")
        out = np.power(-x, 1.0 / s)
    else:
        if np.any(x <= 0.0):
            raise DomainError("h_transform with s>0 requires x > 0")
        out = np.power(x, 1.0 / s)
    return float(out) if out.ndim == 0 else out


def h_transform_deriv(s: float, x):
    """Derivative of :func:`h_transform` on its branch domain (always positive)."""
    x = np.asarray(x, dtype=float)
    if s == 0.0:
        out = np.exp(x)
    elif s < 0.0:
        out = -(1.0 / s) * np.power(-x, 1.0 / s - 1.0)
    else:
        out = (1.0 / s) * np.power(x, 1.0 / s - 1.0)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ShapeReport:
    """Outcome of the two equivalent grid checks for s-concavity.

    ``differential_slack`` is the max of psi*psi'' + (s-1)*psi'^2 over the
    grid (nonpositive for a genuinely s-concave link); ``min_phi_prime`` is
    the minimum finite-difference slope of the virtual valuation, which
    should be at least s+1 exactly when the differential form is nonpositive.
    """

    s_concave_ok: bool
    min_phi_prime: float
    differential_slack: float
    tol: float
    phi_prime_ok: bool
    criteria_agree: bool


@dataclass(frozen=True, eq=False)
class LinkSpec:
    """A positive increasing link with declared concavity index ``s``.

    Families: ``probit_shift`` (normal CDF shifted right by ``shift``),
    ``exponential``, ``linear_affine`` (u + intercept), and ``tabulated``
    (piecewise-linear through (grid, values) knots).  ``psi_lower`` and
    ``deriv_floor`` are declared positive floors for the link and its
    derivative on ``domain``; both are checked on an evaluation grid at
    construction.  Instances are immutable; equality is identity.
    """

    kind: str
    s: float
    domain: tuple[float, float]
    psi_lower: float
    deriv_floor: float
    shift: float = 0.0
    intercept: float = 0.0
    grid: np.ndarray | None = None
    values: np.ndarray | None = None

    # -- constructors ------------------------------------------------------

    @classmethod
    def probit(cls, shift: float = 0.0, *, domain=(-6.0, 6.0), s: float = 0.0,
               psi_lower: float | None = None, deriv_floor: float | None = None):
        return cls._build("probit_shift", s, domain, psi_lower, deriv_floor,
                          shift=float(shift))

    @classmethod
    def exponential(cls, *, domain=(-6.0, 6.0), s: float = 0.0,
                    psi_lower: float | None = None, deriv_floor: float | None = None):
        return cls._build("exponential", s, domain, psi_lower, deriv_floor)

    @classmethod
    def linear_affine(cls, intercept: float = 0.0, *, domain=(0.01, 6.0),
                      s: float = 1.0, psi_lower: float | None = None,
                      deriv_floor: float | None = None):
        return cls._build("linear_affine", s, domain, psi_lower, deriv_floor,
                          intercept=float(intercept))

    @classmethod
    def tabulated(cls, grid, values, *, s: float, domain=None,
                  psi_lower: float | None = None, deriv_floor: float | None = None):
        grid = np.asarray(grid, dtype=float)
        values = np.asarray(values, dtype=float)
        if grid.ndim != 1 or grid.shape != values.shape or grid.size < 3:
            raise DomainError("tabulated link needs matching 1-d grid/values with >= 3 knots")
        if np.any(np.diff(grid) <= 0.0):
            raise DomainError("tabulated grid must be strictly increasing")
        if np.any(values <= 0.0):
            raise DomainError("tabulated link values must be positive")
        if domain is None:
            domain = (float(grid[0]), float(grid[-1]))
        return cls._build("tabulated", s, domain, psi_lower, deriv_floor,
                          grid=grid, values=values)

    @classmethod
    def tabulated_from_csv(cls, path, *, s: float, **kwargs):
        """Load a tabulated link from a two-column CSV of (u, psi(u)) rows."""
        us, vs = [], []
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].lstrip().startswith("#"):
                    continue
                if len(row) != 2:
                    raise FormatError(f"expected two columns, got {row!r}")
                try:
                    us.append(float(row[0]))
                    vs.append(float(row[1]))
                except ValueError:
                    if us:
                        raise FormatError(f"non-numeric row {row!r}")
                    continue  # header line
        if len(us) < 3:
            raise FormatError("tabulated link CSV needs at least 3 numeric rows")
        return cls.tabulated(us, vs, s=s, **kwargs)

    @classmethod
    def _build(cls, kind, s, domain, psi_lower, deriv_floor, **extra):
        lo, hi = float(domain[0]), float(domain[1])
        if not lo < hi:
            raise DomainError("link domain must be a nonempty interval")
        if s <= -1.0:
            raise DomainError("concavity index must exceed -1")
        probe = cls(kind=kind, s=float(s), domain=(lo, hi), psi_lower=1.0,
                    deriv_floor=1.0, **extra)
        grid = probe._eval_grid(512)
        pv = probe.psi(grid)
        dv = probe.psi_prime(grid)
        if np.any(pv <= 0.0):
            raise DomainError(f"{kind} link is not positive on its domain")
        if np.any(dv <= 0.0):
            raise DomainError(f"{kind} link is not strictly increasing on its domain")
        if psi_lower is None:
            psi_lower = float(np.min(pv))
        if deriv_floor is None:
            deriv_floor = float(np.min(dv))
        if psi_lower <= 0.0 or deriv_floor <= 0.0:
            raise DomainError("psi_lower and deriv_floor must be positive")
        if float(np.min(pv)) < psi_lower - 1e-12 or float(np.min(dv)) < deriv_floor - 1e-12:
            raise DomainError("declared floors exceed the observed grid minima")
        return replace(probe, psi_lower=float(psi_lower), deriv_floor=float(deriv_floor))

    # -- evaluation --------------------------------------------------------

    def _eval_grid(self, size: int) -> np.ndarray:
        if self.kind == "tabulated":
            return self.grid
        return np.linspace(self.domain[0], self.domain[1], size)

    def psi(self, u):
        u = np.asarray(u, dtype=float)
        if self.kind == "probit_shift":
            out = ndtr(u - self.shift)
        elif self.kind == "exponential":
            out = np.exp(u)
        elif self.kind == "linear_affine":
            out = u + self.intercept
        else:
            out = np.interp(u, self.grid, self.values)
        return float(out) if out.ndim == 0 else out

    def psi_prime(self, u):
        u = np.asarray(u, dtype=float)
        if self.kind == "probit_shift":
            out = _norm_pdf(u - self.shift)
        elif self.kind == "exponential":
            out = np.exp(u)
        elif self.kind == "linear_affine":
            out = np.ones_like(u)
        else:
            out = np.interp(u, self.grid, self._tab_d1())
        return float(out) if out.ndim == 0 else out

    def psi_double_prime(self, u):
        u = np.asarray(u, dtype=float)
        if self.kind == "probit_shift":
            z = u - self.shift
            out = -z * _norm_pdf(z)
        elif self.kind == "exponential":
            out = np.exp(u)
        elif self.kind == "linear_affine":
            out = np.zeros_like(u)
        else:
            out = np.interp(u, self.grid, self._tab_d2())
        return float(out) if out.ndim == 0 else out

    # scalar fast paths for root-finding loops (no array wrapping)
    def _psi_scalar(self, u: float) -> float:
        if self.kind == "probit_shift":
            return 0.5 * math.erfc(-(u - self.shift) / _SQRT_2)
        if self.kind == "exponential":
            return math.exp(u)
        if self.kind == "linear_affine":
            return u + self.intercept
        return float(np.interp(u, self.grid, self.values))

    def _psi_prime_scalar(self, u: float) -> float:
        if self.kind == "probit_shift":
            z = u - self.shift
            return math.exp(-0.5 * z * z) / _SQRT_2PI
        if self.kind == "exponential":
            return math.exp(u)
        if self.kind == "linear_affine":
            return 1.0
        return float(np.interp(u, self.grid, self._tab_d1()))

    def _tab_d1(self) -> np.ndarray:
        # central differences with the local grid spacing, one-sided at ends
        return np.gradient(self.values, self.grid)

    def _tab_d2(self) -> np.ndarray:
        return np.gradient(self._tab_d1(), self.grid)

    def validate(self, grid_size: int = 512) -> None:
        """Re-check positivity, the derivative floor, and s-concavity on a grid."""
        grid = self._eval_grid(grid_size)
        pv = self.psi(grid)
        if np.any(pv <= 0.0):
            raise DomainError("link is not positive on its domain")
        if np.any(self.psi_prime(grid) < self.deriv_floor - 1e-12):
            raise DomainError("link derivative drops below its declared floor")
        report = check_shape(self, grid_size)
        if not report.s_concave_ok:
            raise ShapeViolationError(
                f"link fails the s-concavity check (slack {report.differential_slack:.3g})")


def virtual_valuation(link: LinkSpec, u):
    """u + psi(u)/psi'(u); the monotone map whose inverse prices a single sale."""
    u = np.asarray(u, dtype=float)
    pv = link.psi(u)
    dv = link.psi_prime(u)
    if np.any(dv < link.deriv_floor * 1e-6):
        raise DegenerateDerivativeError("link derivative too close to zero")
    out = u + pv / dv
    return float(out) if out.ndim == 0 else out


def _virtual_valuation_scalar(link: LinkSpec, u: float) -> float:
    dv = link._psi_prime_scalar(u)
    if dv < link.deriv_floor * 1e-6:
        raise DegenerateDerivativeError("link derivative too close to zero")
    return u + link._psi_scalar(u) / dv


@lru_cache(maxsize=256)
def _phi_table(link: LinkSpec, size: int):
    """Cached (u grid, virtual valuation) table; raises on non-monotone values."""
    grid = np.linspace(link.domain[0], link.domain[1], size)
    phi = virtual_valuation(link, grid)
    if np.any(np.diff(phi) <= 0.0):
        raise ShapeViolationError("virtual valuation is not strictly increasing")
    return grid, phi


def invert_virtual_valuation(link: LinkSpec, v: float, *, return_clamped: bool = False,
                             seed_grid: int = 1025):
    """Invert the virtual valuation by bracketed bisection on the link domain.

    Values of ``v`` outside the attainable range are clamped to the matching
    domain endpoint; pass ``return_clamped=True`` to receive a (root, clamped)
    pair.  Raises ShapeViolationError if the seeded bracket reveals a
    non-monotone virtual valuation.
    """
    grid, phi = _phi_table(link, seed_grid)
    lo, hi = link.domain

    v = float(v)
    if v <= phi[0]:
        clamped = v < phi[0]
        return (lo, clamped) if return_clamped else lo
    if v >= phi[-1]:
        clamped = v > phi[-1]
        return (hi, clamped) if return_clamped else hi

    k = int(np.searchsorted(phi, v))
    a, b = float(grid[k - 1]), float(grid[k])
    fa = float(phi[k - 1])
    while b - a > 1e-12:
        mid = 0.5 * (a + b)
        fm = _virtual_valuation_scalar(link, mid)
        if (fa - v) * (fm - v) <= 0.0:
            b = mid
        else:
            a, fa = mid, fm
    root = 0.5 * (a + b)
    return (root, False) if return_clamped else root


def g_map(link: LinkSpec, u: float) -> float:
    """u minus the virtual-valuation inverse at u; scales into best responses."""
    return float(u) - invert_virtual_valuation(link, u)


def check_shape(link: LinkSpec, grid_size: int = 512, *, s: float | None = None,
                tol: float | None = None) -> ShapeReport:
    """Grid check of s-concavity in both equivalent forms (report only).

    Form (a): the virtual-valuation slope is at least s+1 everywhere.
    Form (b): psi*psi'' + (s-1)*psi'^2 is nonpositive everywhere.
    The two agree pointwise through the identity
    phi' - (s+1) = -(psi*psi'' + (s-1)*psi'^2) / psi'^2, so the slope check
    is run with the differential tolerance rescaled by the local psi'^2.
    Tabulated links are checked on their own knots so derivative stencils
    match the knot spacing.
    """
    if grid_size < 3:
        raise DomainError("check_shape needs grid_size >= 3")
    if s is None:
        s = link.s
    grid = link._eval_grid(grid_size)
    pv = link.psi(grid)
    d1 = link.psi_prime(grid)
    d2 = link.psi_double_prime(grid)

    differential = pv * d2 + (s - 1.0) * np.square(d1)
    differential_slack = float(np.max(differential))
    if tol is None:
        tol = 1e-8 * (1.0 + float(np.max(np.abs(pv))) ** 2)

    with np.errstate(divide="ignore", invalid="ignore"):
        phi = grid + pv / d1
    phi_prime = (phi[2:] - phi[:-2]) / (grid[2:] - grid[:-2])
    min_phi_prime = float(np.min(phi_prime)) if phi_prime.size else float("nan")

    s_concave_ok = differential_slack <= tol
    # pointwise margin with the matched tolerance, plus stencil slack
    fd_tol = 1e-6 * (1.0 + abs(s + 1.0))
    margin = phi_prime - (s + 1.0) + tol / np.square(d1[1:-1])
    phi_prime_ok = bool(np.min(margin) >= -fd_tol) if margin.size else True
    return ShapeReport(
        s_concave_ok=s_concave_ok,
        min_phi_prime=min_phi_prime,
        differential_slack=differential_slack,
        tol=tol,
        phi_prime_ok=phi_prime_ok,
        criteria_agree=(s_concave_ok == phi_prime_ok),
    )
