"""Domain types and closed-form identities for the five-parameter Gaussian family.

A Gaussian density matrix is parametrized by (sigma, f, r, q, p) through its
position-representation kernel in mean/difference coordinates u = (x+y)/2,
s = x - y:

    rho(u, s) = sqrt(sigma / 2 pi hbar)
                * exp[ -sigma (u-q)^2 / 2 hbar - f s^2 / 2 hbar
                       - i r sigma (u-q) s / 2 hbar + i p s / hbar ]

Positivity of the density operator requires sigma <= 4 f.  The second moments
follow in closed form:

    (dq)^2 = hbar / sigma
    (dp)^2 = hbar f (1 + sigma r^2 / 4 f)
    C_pq   = -hbar r / 2

and the phase-space localization area A = sqrt(dq2 dp2 - cpq^2) satisfies
A = (hbar/2) sqrt(4 f / sigma), Tr rho^2 = hbar / (2 A).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from shapely.geometry import Polygon as _ShapelyPolygon

__all__ = [
    "ConstraintError",
    "SubquantumMomentError",
    "PhysicalParams",
    "GaussianState",
    "MomentSet",
    "PotentialModel",
    "PhaseSpaceCell",
    "moments_from_params",
    "params_from_moments",
    "purity_and_area",
    "eval_density",
    "eval_potential",
]


class ConstraintError(ValueError):
    """A domain-type invariant was violated."""


class SubquantumMomentError(ConstraintError):
    """Second moments violate the uncertainty bound A >= hbar/2."""


@dataclass(frozen=True)
class PhysicalParams:
    """Bath and system constants.

    Attributes
    ----------
    mass : float
        Particle mass M > 0.
    gamma : float
        Dissipation constant (inverse time), >= 0.
    kT : float
        Bath temperature in energy units, >= 0.
    hbar : float
        Planck constant; a free parameter so hbar-scaling sweeps are possible.
    eta : float
        Optional momentum-diffusion (Dekker) coefficient, >= 0.  Adds a
        position-diffusion term to the master equation that restores
        positivity at short times; its normalization is pinned by the moment
        signature d(dq2)/dt = +2 eta.
    """

    mass: float = 1.0
    gamma: float = 0.0
    kT: float = 0.0
    hbar: float = 1.0
    eta: float = 0.0

    def __post_init__(self):
        if not (self.mass > 0):
            raise ConstraintError(f"mass must be > 0, got {self.mass}")
        if not (self.hbar > 0):
            raise ConstraintError(f"hbar must be > 0, got {self.hbar}")
        for name in ("gamma", "kT", "eta"):
            if getattr(self, name) < 0:
                raise ConstraintError(f"{name} must be >= 0, got {getattr(self, name)}")

    @property
    def D(self) -> float:
        """Diffusion coefficient D = 2 M gamma kT.  Always derived, never set."""
        return 2.0 * self.mass * self.gamma * self.kT


@dataclass(frozen=True)
class GaussianState:
    """Five-parameter Gaussian density matrix (sigma, f, r, q, p).

    ``sigma`` sets the position width (dq2 = hbar/sigma), ``f`` the
    off-diagonal decay, ``r`` the dimensionless position-momentum
    correlation, (q, p) the phase-space center.  Density-operator
    positivity requires sigma <= 4 f.
    """

    sigma: float
    f: float
    r: float = 0.0
    q: float = 0.0
    p: float = 0.0

    # roundoff slack on the positivity boundary sigma <= 4 f
    _POSITIVITY_SLACK = 1e-9

    def __post_init__(self):
        if not (self.sigma > 0):
            raise ConstraintError(f"sigma must be > 0, got {self.sigma}")
        if not (self.f > 0):
            raise ConstraintError(f"f must be > 0, got {self.f}")
        if self.sigma > 4.0 * self.f * (1.0 + self._POSITIVITY_SLACK):
            raise ConstraintError(
                f"positivity requires sigma <= 4 f, got sigma={self.sigma}, 4f={4*self.f}")

    @classmethod
    def pure(cls, sigma: float, q: float = 0.0, p: float = 0.0) -> "GaussianState":
        """Minimum-uncertainty state with sigma = 4 f (Tr rho^2 = 1)."""
        return cls(sigma=sigma, f=sigma / 4.0, r=0.0, q=q, p=p)

    def as_array(self) -> np.ndarray:
        """Parameters in the fixed order (q, p, sigma, f, r) used by the ODE layer."""
        return np.array([self.q, self.p, self.sigma, self.f, self.r])

    @classmethod
    def from_array(cls, y) -> "GaussianState":
        q, p, sigma, f, r = (float(v) for v in y)
        return cls(sigma=sigma, f=f, r=r, q=q, p=p)


@dataclass(frozen=True)
class MomentSet:
    """First and second moments (dq2, dp2, cpq, q, p) of a phase-space state."""

    dq2: float
    dp2: float
    cpq: float
    q: float = 0.0
    p: float = 0.0

    def __post_init__(self):
        if not (self.dq2 > 0) or not (self.dp2 > 0):
            raise ConstraintError(
                f"variances must be > 0, got dq2={self.dq2}, dp2={self.dp2}")
        if self.dq2 * self.dp2 - self.cpq**2 <= 0:
            raise ConstraintError(
                f"dq2*dp2 - cpq^2 must be > 0, got {self.dq2*self.dp2 - self.cpq**2}")

    @property
    def area(self) -> float:
        """Wigner-function localization area A = sqrt(dq2 dp2 - cpq^2)."""
        return math.sqrt(self.dq2 * self.dp2 - self.cpq**2)

    def purity(self, hbar: float) -> float:
        """Tr rho^2 = hbar / (2 A) for the Gaussian family."""
        return hbar / (2.0 * self.area)


@dataclass(frozen=True)
class PotentialModel:
    """Closed polynomial potential family with exact derivatives.

    Coefficients are stored ascending (c0 + c1 x + c2 x^2 + ...), degree <= 8.
    Use the constructors ``free``, ``linear``, ``harmonic``, ``quartic``,
    ``polynomial`` rather than building coefficient lists by hand.
    """

    family: str
    coeffs: tuple = ()

    _MAX_DEGREE = 8

    def __post_init__(self):
        if self.family not in ("free", "linear", "harmonic", "quartic", "polynomial"):
            raise ConstraintError(f"unknown potential family {self.family!r}")
        if len(self.coeffs) > self._MAX_DEGREE + 1:
            raise ConstraintError("polynomial potentials are limited to degree 8")
        c = np.asarray(self.coeffs, dtype=float)
        if self.family == "polynomial" and c.size > 1:
            deg = c.size - 1
            while deg > 0 and c[deg] == 0.0:
                deg -= 1
            # bounded from below: even leading degree with positive coefficient
            if deg >= 1 and (deg % 2 == 1 or c[deg] < 0):
                raise ConstraintError("polynomial potential must be bounded from below")

    @classmethod
    def free(cls) -> "PotentialModel":
        return cls("free", ())

    @classmethod
    def linear(cls, slope: float) -> "PotentialModel":
        """V(x) = slope * x."""
        return cls("linear", (0.0, float(slope)))

    @classmethod
    def harmonic(cls, m_omega2: float) -> "PotentialModel":
        """V(x) = (1/2) M omega^2 x^2; pass the product M omega^2."""
        return cls("harmonic", (0.0, 0.0, 0.5 * float(m_omega2)))

    @classmethod
    def quartic(cls, m_omega2: float, eta4: float) -> "PotentialModel":
        """Weakly nonlinear well V(x) = (1/2) M omega^2 x^2 + eta4 x^4."""
        if eta4 < 0:
            raise ConstraintError("quartic coefficient eta4 must be >= 0")
        return cls("quartic", (0.0, 0.0, 0.5 * float(m_omega2), 0.0, float(eta4)))

    @classmethod
    def polynomial(cls, coeffs) -> "PotentialModel":
        """Ascending coefficients (c0, c1, ...); must be bounded from below."""
        return cls("polynomial", tuple(float(c) for c in coeffs))

    def derivative_coeffs(self, order: int) -> np.ndarray:
        c = np.asarray(self.coeffs, dtype=float)
        for _ in range(order):
            if c.size <= 1:
                return np.zeros(1)
            c = c[1:] * np.arange(1, c.size)
        return c if c.size else np.zeros(1)

    def value(self, x):
        c = np.asarray(self.coeffs, dtype=float)
        if c.size == 0:
            return np.zeros_like(np.asarray(x, dtype=float)) + 0.0
        return np.polynomial.polynomial.polyval(x, c)

    def d1(self, x):
        return np.polynomial.polynomial.polyval(x, self.derivative_coeffs(1))

    def d2(self, x):
        return np.polynomial.polynomial.polyval(x, self.derivative_coeffs(2))


def eval_potential(pot: PotentialModel, x):
    """Return the consistent triple (V, V', V'') at x (scalar or array)."""
    return pot.value(x), pot.d1(x), pot.d2(x)


def _polygon_area(vertices: np.ndarray) -> float:
    x, p = vertices[:, 0], vertices[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(p, -1)) - np.dot(p, np.roll(x, -1))))


@dataclass(frozen=True)
class PhaseSpaceCell:
    """A rectangle or simple polygon in (q, p) with reference scales L, P.

    ``vertices`` is an (n, 2) float array, counterclockwise or clockwise;
    rectangles carry their bounds as well so the closed-form projector path
    can recognize them.  L and P default to the bounding-box extents.
    The quantum-scale requirement L * P >= hbar is enforced at projector
    construction, where hbar is known.
    """

    vertices: tuple
    is_rectangle: bool
    L: float
    P: float

    def __post_init__(self):
        v = self.vertex_array()
        if v.shape[0] < 3:
            raise ConstraintError("a phase-space cell needs at least 3 vertices")
        if _polygon_area(v) <= 0:
            raise ConstraintError("cell must have positive area")
        if not (self.L > 0 and self.P > 0):
            raise ConstraintError("reference scales L, P must be > 0")
        if not _ShapelyPolygon(v).is_valid:
            raise ConstraintError("cell polygon must be simple (non-self-intersecting)")

    @classmethod
    def rectangle(cls, q1: float, q2: float, p1: float, p2: float,
                  L: float | None = None, P: float | None = None) -> "PhaseSpaceCell":
        if not (q1 < q2 and p1 < p2):
            raise ConstraintError("rectangle requires q1 < q2 and p1 < p2")
        verts = ((q1, p1), (q2, p1), (q2, p2), (q1, p2))
        return cls(vertices=verts, is_rectangle=True,
                   L=(q2 - q1) if L is None else L,
                   P=(p2 - p1) if P is None else P)

    @classmethod
    def polygon(cls, vertices, L: float | None = None, P: float | None = None) -> "PhaseSpaceCell":
        v = np.asarray(vertices, dtype=float)
        verts = tuple(map(tuple, v))
        qext = v[:, 0].max() - v[:, 0].min()
        pext = v[:, 1].max() - v[:, 1].min()
        return cls(vertices=verts, is_rectangle=False,
                   L=qext if L is None else L, P=pext if P is None else P)

    def vertex_array(self) -> np.ndarray:
        return np.asarray(self.vertices, dtype=float)

    @property
    def volume(self) -> float:
        """Phase-space volume [Gamma] (polygon area)."""
        return _polygon_area(self.vertex_array())

    @property
    def bounds(self):
        """(q1, q2, p1, p2) of the rectangle; raises for general polygons."""
        if not self.is_rectangle:
            raise ConstraintError("bounds are only defined for rectangle cells")
        v = self.vertex_array()
        return (v[:, 0].min(), v[:, 0].max(), v[:, 1].min(), v[:, 1].max())


def moments_from_params(state: GaussianState, params: PhysicalParams) -> MomentSet:
    """Second moments of the Gaussian state in closed form.

    dq2 = hbar/sigma,  dp2 = hbar f (1 + sigma r^2/4f),  cpq = -hbar r/2.
    """
    hbar = params.hbar
    dq2 = hbar / state.sigma
    dp2 = hbar * state.f * (1.0 + state.sigma * state.r**2 / (4.0 * state.f))
    cpq = -hbar * state.r / 2.0
    return MomentSet(dq2=dq2, dp2=dp2, cpq=cpq, q=state.q, p=state.p)


def params_from_moments(m: MomentSet, params: PhysicalParams) -> GaussianState:
    """Invert the moment map; requires A >= hbar/2."""
    hbar = params.hbar
    if m.area < hbar / 2.0 * (1.0 - 1e-12):
        raise SubquantumMomentError(
            f"moments have A = {m.area} < hbar/2 = {hbar/2}")
    sigma = hbar / m.dq2
    r = -2.0 * m.cpq / hbar
    f = m.dp2 / hbar - sigma * r**2 / 4.0
    return GaussianState(sigma=sigma, f=f, r=r, q=m.q, p=m.p)


def purity_and_area(state: GaussianState, params: PhysicalParams):
    """Return (Tr rho^2, A) = (sqrt(sigma/4f), (hbar/2) sqrt(4f/sigma))."""
    purity = math.sqrt(state.sigma / (4.0 * state.f))
    return purity, params.hbar / (2.0 * purity)


def eval_density(state: GaussianState, params: PhysicalParams, u, s):
    """Kernel rho(u, s) = <u+s/2| rho |u-s/2> of the Gaussian state.

    Accepts scalars or broadcastable arrays for u and s.
    """
    hbar = params.hbar
    uq = np.asarray(u) - state.q
    s = np.asarray(s)
    return np.sqrt(state.sigma / (2.0 * np.pi * hbar)) * np.exp(
        -state.sigma * uq**2 / (2.0 * hbar)
        - state.f * s**2 / (2.0 * hbar)
        - 1j * state.r * state.sigma * uq * s / (2.0 * hbar)
        + 1j * state.p * s / hbar
    )
