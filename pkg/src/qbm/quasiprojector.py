"""Gaussian quasiprojectors on phase-space cells and their quality measures.

A quasiprojector on a cell Gamma is the phase-space average of Gaussian
density matrices with fixed smearing (sigma, f, r),

    P = (1/2 pi hbar) integral_Gamma dq dp rho(sigma, f, r, q, p).

Its Weyl symbol is a smeared characteristic function of Gamma: 1 well
inside, 0 well outside, interpolating across a margin strip whose relative
area eps = [M]/[Gamma] measures how far P is from a true projector
(Tr P = [Gamma]/2 pi hbar, Tr|P - P^2| = O(eps) Tr P).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf
from shapely import contains_xy
from shapely.geometry import LineString, Polygon as ShapelyPolygon

from .core import (
    ConstraintError,
    GaussianState,
    PhaseSpaceCell,
    PhysicalParams,
    PotentialModel,
)
from .gaussian_dynamics import integrate
from .grid_solver import (
    GridOperator,
    GridSpec,
    Propagator,
    PropagatorConfig,
    to_matrix,
    weyl_quantize,
    SymbolTable,
)

__all__ = [
    "Quasiprojector",
    "MarginReport",
    "TransportResult",
    "EvolvedComparison",
    "build_projector",
    "projector_trace",
    "idempotency_defect",
    "projector_distance",
    "product_defect",
    "cell_margin_epsilon",
    "transport_cell",
    "evolved_projector_comparison",
    "effective_growth_mu",
    "smearing_area",
    "default_margin_length",
]


def smearing_area(sigma: float, f: float, hbar: float) -> float:
    """Wigner area A = (hbar/2) sqrt(4 f / sigma) of the smearing state."""
    return 0.5 * hbar * math.sqrt(4.0 * f / sigma)


def default_margin_length(eps_target: float) -> float:
    """Invert the regularity condition e^{-2 l^2} < eps for the margin length."""
    if not (0.0 < eps_target < 1.0):
        raise ConstraintError("eps_target must lie in (0, 1)")
    return math.sqrt(math.log(1.0 / eps_target) / 2.0)


@dataclass(frozen=True)
class MarginReport:
    """Rasterized margin measurement of a cell under a given smearing metric.

    Areas are quoted in metric units (the linear map to metric coordinates
    leaves the ratio eps = [M]/[Gamma] unchanged).
    """

    margin_area: float
    cell_area: float
    epsilon: float
    l: float
    regular: bool
    curvature_ok: bool


@dataclass
class Quasiprojector:
    """A realized quasiprojector: cell, smearing, kernel, and quality data."""

    cell: PhaseSpaceCell
    sigma: float
    f: float
    r: float
    params: PhysicalParams
    kernel: GridOperator
    trace: float
    epsilon: float
    margin_area: float
    margin_l: float

    def matrix(self) -> np.ndarray:
        return to_matrix(self.kernel)


def _metric_scales(sigma: float, f: float, r: float, hbar: float):
    """Scale factors to the coordinates in which the smearing metric is Euclidean.

    d(x, p) = sigma x^2 / 4 hbar + p^2 / (4 hbar f (1 + sigma r^2 / 4 f)).
    """
    sx = math.sqrt(sigma / (4.0 * hbar))
    sp = 1.0 / math.sqrt(4.0 * hbar * f * (1.0 + sigma * r**2 / (4.0 * f)))
    return sx, sp


def cell_margin_epsilon(cell: PhaseSpaceCell, sigma: float, f: float, r: float,
                        params: PhysicalParams, l: float) -> MarginReport:
    """Margin area, eps = [M]/[Gamma], and the regularity verdict at length l.

    The margin is the Minkowski sum of the cell boundary with the metric
    ball of radius l, computed exactly in metric-scaled coordinates
    (shapely buffer).  Regularity additionally demands e^{-2 l^2} < eps and
    polygon turning-angle curvature radii above l.
    """
    if l <= 0:
        raise ConstraintError("margin length l must be > 0")
    sx, sp = _metric_scales(sigma, f, r, params.hbar)
    v = cell.vertex_array()
    scaled = np.column_stack([v[:, 0] * sx, v[:, 1] * sp])
    poly = ShapelyPolygon(scaled)
    ring = LineString(list(poly.exterior.coords))
    margin_area = ring.buffer(l).area
    eps = margin_area / poly.area
    curvature_ok = _curvature_radii_ok(scaled, l)
    regular = (eps < 1.0) and (math.exp(-2.0 * l**2) < eps) and curvature_ok
    return MarginReport(margin_area=margin_area, cell_area=poly.area, epsilon=eps,
                        l=l, regular=regular, curvature_ok=curvature_ok)


def _curvature_radii_ok(scaled_vertices: np.ndarray, l: float) -> bool:
    """Turning-angle stand-in for the smooth-boundary curvature condition.

    For a densely sampled smooth boundary, segment_length / turning_angle
    approximates the curvature radius; sparse polygons (rectangles) pass
    through their long straight edges.
    """
    v = scaled_vertices
    n = len(v)
    e = np.roll(v, -1, axis=0) - v
    lengths = np.hypot(e[:, 0], e[:, 1])
    ang = np.arctan2(e[:, 1], e[:, 0])
    turn = np.abs(np.angle(np.exp(1j * (np.roll(ang, -1) - ang))))
    radii = np.where(turn > 1e-12, 0.5 * (lengths + np.roll(lengths, -1)) / np.maximum(turn, 1e-300),
                     np.inf)
    return bool(np.min(radii) > l)


def _erf_symbol(spec: GridSpec, params: PhysicalParams, sigma: float, f: float,
                q1: float, q2: float, p1: float, p2: float) -> SymbolTable:
    hbar = params.hbar
    u = spec.u()[:, None]
    xi = spec.xi(hbar)[None, :]
    a = math.sqrt(sigma / (2.0 * hbar))
    b = 1.0 / math.sqrt(2.0 * hbar * f)
    fq = erf((u - q1) * a) - erf((u - q2) * a)
    fp = erf((xi - p1) * b) - erf((xi - p2) * b)
    return SymbolTable(spec=spec, hbar=hbar, values=(0.25 * fq * fp).astype(complex))


def _quadrature_kernel(spec: GridSpec, params: PhysicalParams, sigma: float, f: float,
                       r: float, cell: PhaseSpaceCell,
                       max_points: int = 4_000_000) -> np.ndarray:
    """Midpoint quadrature of the cell integral on a (q, p) sub-lattice.

    Sub-lattice spacings are at most one third of the smearing widths
    sqrt(hbar/sigma) and sqrt(hbar f).
    """
    hbar = params.hbar
    dq = math.sqrt(hbar / sigma) / 3.0
    dp = math.sqrt(hbar * f) / 3.0
    v = cell.vertex_array()
    qlo, qhi = v[:, 0].min(), v[:, 0].max()
    plo, phi = v[:, 1].min(), v[:, 1].max()
    qs = np.arange(qlo + dq / 2.0, qhi, dq)
    ps = np.arange(plo + dp / 2.0, phi, dp)
    if len(qs) * len(ps) > max_points:
        raise ConstraintError(
            f"quadrature lattice of {len(qs)}x{len(ps)} points exceeds the memory budget")
    poly = ShapelyPolygon(v)
    QQ, PP = np.meshgrid(qs, ps, indexing="ij")
    inside = contains_xy(poly, QQ.ravel(), PP.ravel()).reshape(QQ.shape)

    u = spec.u()
    s = spec.s()
    pref = math.sqrt(sigma / (2.0 * math.pi * hbar)) * dq * dp / (2.0 * math.pi * hbar)
    s_gauss = np.exp(-f * s**2 / (2.0 * hbar))
    K = np.zeros((spec.n_u, spec.n_s), dtype=complex)
    for iq, qv in enumerate(qs):
        mask = inside[iq]
        if not mask.any():
            continue
        a_u = np.exp(-sigma * (u - qv) ** 2 / (2.0 * hbar))
        cross = np.exp(-1j * r * sigma * np.outer(u - qv, s) / (2.0 * hbar))
        p_sum = np.exp(1j * np.outer(ps[mask], s) / hbar).sum(axis=0)
        K += pref * (a_u[:, None] * cross) * (s_gauss * p_sum)[None, :]
    return K


def build_projector(cell: PhaseSpaceCell, sigma: float, f: float, r: float,
                    params: PhysicalParams, spec: GridSpec,
                    method: str = "auto", margin_l: float | None = None) -> Quasiprojector:
    """Realize the quasiprojector of a cell on a grid.

    Rectangles with r = 0 take the closed-form erf-symbol path followed by
    Weyl quantization; everything else is midpoint quadrature of the cell
    integral.  ``method`` forces 'erf' or 'quadrature' for cross-checks.
    The margin length defaults to the inversion of e^{-2 l^2} = eps_target
    with eps_target = sqrt(A_smearing / L P).
    """
    hbar = params.hbar
    if sigma <= 0 or f <= 0:
        raise ConstraintError("smearing requires sigma > 0 and f > 0")
    if sigma > 4.0 * f * (1.0 + 1e-9):
        raise ConstraintError("smearing must satisfy sigma <= 4 f")
    if cell.L * cell.P < hbar:
        raise ConstraintError(
            f"cell below the quantum scale: L*P = {cell.L * cell.P} < hbar = {hbar}")
    v = cell.vertex_array()
    if v[:, 0].min() <= spec.u()[0] or v[:, 0].max() >= spec.l_u:
        raise ConstraintError("cell exceeds the position box of the grid")
    xi_max = math.pi * hbar / spec.ds
    if v[:, 1].max() >= xi_max or v[:, 1].min() <= -xi_max:
        raise ConstraintError("cell exceeds the momentum range of the grid")

    if method == "auto":
        method = "erf" if (cell.is_rectangle and r == 0.0) else "quadrature"
    if method == "erf":
        if not (cell.is_rectangle and r == 0.0):
            raise ConstraintError("erf path requires a rectangle cell and r = 0")
        q1, q2, p1, p2 = cell.bounds
        kernel = weyl_quantize(_erf_symbol(spec, params, sigma, f, q1, q2, p1, p2), params)
    elif method == "quadrature":
        kernel = GridOperator(spec, _quadrature_kernel(spec, params, sigma, f, r, cell))
    else:
        raise ConstraintError(f"unknown build method {method!r}")
    kernel.hermitian_hint = True

    eps_target = math.sqrt(min(smearing_area(sigma, f, hbar) / (cell.L * cell.P), 0.99))
    l = default_margin_length(eps_target) if margin_l is None else margin_l
    report = cell_margin_epsilon(cell, sigma, f, r, params, l)
    if report.epsilon >= 1.0:
        raise ConstraintError(
            f"margin fills the cell (eps = {report.epsilon:.3f} >= 1): "
            "the smearing cannot resolve this cell")
    return Quasiprojector(cell=cell, sigma=sigma, f=f, r=r, params=params,
                          kernel=kernel, trace=float(kernel.trace().real),
                          epsilon=report.epsilon, margin_area=report.margin_area,
                          margin_l=l)


def projector_trace(proj: Quasiprojector) -> float:
    """Trace of the realized kernel; contract |Tr P - [Gamma]/2 pi hbar| <= 1%."""
    return float(proj.kernel.trace().real)


def _abs_eigen_sum(m: np.ndarray) -> float:
    evals = np.linalg.eigvalsh(0.5 * (m + m.conj().T))
    return float(np.sum(np.abs(evals)))


def idempotency_defect(proj: Quasiprojector) -> float:
    """Tr|P - P^2| by dense eigendecomposition of the lattice matrix."""
    m = proj.matrix()
    return _abs_eigen_sum(m - m @ m)


def projector_distance(p1: Quasiprojector, p2: Quasiprojector) -> float:
    """Tr|P - P'| for two smearings of the same cell."""
    if p1.cell != p2.cell:
        raise ConstraintError("projector_distance compares smearings of one cell; "
                              "the cells differ")
    return _abs_eigen_sum(p1.matrix() - p2.matrix())


def product_defect(p1: Quasiprojector, p2: Quasiprojector, p12: Quasiprojector) -> float:
    """Tr|P1 P2 - P12| with P12 built on the intersection cell."""
    return _abs_eigen_sum(p1.matrix() @ p2.matrix() - p12.matrix())


@dataclass(frozen=True)
class TransportResult:
    cell: PhaseSpaceCell
    area_ratio: float
    boundary: np.ndarray


def _advect_boundary(points: np.ndarray, pot: PotentialModel, params: PhysicalParams,
                     t: float, direction: str, dt: float) -> np.ndarray:
    # backward flow q' = -p/M, p' = +V'(q) + 2 gamma p is the forward system
    # integrated with a negated time step
    sign = 1.0 if direction == "forward" else -1.0
    g = params.gamma
    M = params.mass

    def rhs(z):
        q, p = z[:, 0], z[:, 1]
        return sign * np.column_stack([p / M, -pot.d1(q) - 2.0 * g * p])

    z = points.copy()
    n = max(1, int(round(t / dt)))
    h = t / n
    for _ in range(n):
        k1 = rhs(z)
        k2 = rhs(z + 0.5 * h * k1)
        k3 = rhs(z + 0.5 * h * k2)
        k4 = rhs(z + h * k3)
        z = z + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return z


def transport_cell(cell: PhaseSpaceCell, pot: PotentialModel, params: PhysicalParams,
                   t: float, direction: str = "forward", n_boundary: int = 256,
                   dt: float = 1e-3) -> TransportResult:
    """Advect the cell boundary along the classical dissipative flow.

    Forward transport contracts areas by e^{-2 gamma t} (Liouville with
    linear damping, any potential); backward transport is the Heisenberg
    companion flow q' = -p/M, p' = V'(q) + 2 gamma p with Jacobian
    e^{+2 gamma t}.  The transported boundary must remain simple.
    """
    if t < 0:
        raise ConstraintError("transport time must be >= 0")
    if direction not in ("forward", "backward"):
        raise ConstraintError(f"direction must be forward or backward, got {direction!r}")
    v = cell.vertex_array()
    n_edges = len(v)
    per_edge = max(2, int(math.ceil(n_boundary / n_edges)))
    pts = []
    for i in range(n_edges):
        a, b = v[i], v[(i + 1) % n_edges]
        for w in np.linspace(0.0, 1.0, per_edge, endpoint=False):
            pts.append(a + (b - a) * w)
    boundary0 = np.asarray(pts)
    if t == 0:
        return TransportResult(cell=cell, area_ratio=1.0, boundary=boundary0)
    boundary = _advect_boundary(boundary0, pot, params, t, direction, dt)
    if not ShapelyPolygon(boundary).is_valid:
        raise ConstraintError(
            f"transported boundary self-intersects at t = {t}; "
            "the cell does not evolve regularly")
    area0 = ShapelyPolygon(boundary0).area
    area1 = ShapelyPolygon(boundary).area
    cell_t = PhaseSpaceCell.polygon(boundary, L=cell.L, P=cell.P)
    return TransportResult(cell=cell_t, area_ratio=area1 / area0, boundary=boundary)


@dataclass(frozen=True)
class EvolvedComparison:
    hs_gap: float
    bound_ref: float
    eps_prime: float
    trace_initial: float
    trace_evolved: float
    smearing_t: tuple
    decoy_gaps: dict


def evolved_projector_comparison(proj: Quasiprojector, pot: PotentialModel,
                                 params: PhysicalParams, t: float,
                                 dt: float = 0.01, with_decoys: bool = False,
                                 remap: str = "spectral") -> EvolvedComparison:
    """Heisenberg-evolve a projector and compare against classical transport.

    The kernel is advanced with the adjoint propagator over t; the reference
    is a fresh quasiprojector on the backward-transported cell with smearing
    (sigma(t), f(t), r(t)) from the backward Gaussian ODEs.  The reported
    bound is eps' Tr P with eps' = sqrt(A(t) / L P) from the evolved
    smearing area.  Optional decoys rebuild the reference on translated /
    rotated / untransported cells; classical transport must win.
    """
    spec = proj.kernel.spec
    cfg = PropagatorConfig(dt=dt, scheme="strang", direction="heisenberg_M", remap=remap)
    prop = Propagator(spec, pot, params, cfg)
    evolved = proj.kernel.copy()
    prop.run(evolved, max(1, int(round(t / dt))))

    state0 = GaussianState(sigma=proj.sigma, f=proj.f, r=proj.r)
    back = integrate(state0, pot, params, t_final=t, dt=min(dt, 1e-3),
                     direction="backward", error_estimate=False)
    sig_t, f_t, r_t = back.sigma[-1], back.f[-1], back.r[-1]

    moved = transport_cell(proj.cell, pot, params, t, direction="backward")

    def reference_gap(c: PhaseSpaceCell) -> float:
        k = _quadrature_kernel(spec, params, sig_t, f_t, r_t, c)
        diff = evolved.values - k
        return math.sqrt(spec.du * spec.ds * float(np.sum(np.abs(diff) ** 2)))

    hs_gap = reference_gap(moved.cell)
    area_t = smearing_area(sig_t, f_t, params.hbar)
    eps_prime = math.sqrt(area_t / (proj.cell.L * proj.cell.P))
    bound = eps_prime * proj.trace

    decoys = {}
    if with_decoys:
        b = moved.boundary
        center = b.mean(axis=0)
        rot = b - center
        ang = 0.5
        rot = np.column_stack([
            rot[:, 0] * math.cos(ang) - rot[:, 1] * math.sin(ang),
            rot[:, 0] * math.sin(ang) + rot[:, 1] * math.cos(ang)]) + center
        shift = 0.4 * min(proj.cell.L, proj.cell.P)
        candidates = {
            "untransported": proj.cell,
            "translated_q": PhaseSpaceCell.polygon(b + [shift, 0.0], L=proj.cell.L, P=proj.cell.P),
            "translated_p": PhaseSpaceCell.polygon(b + [0.0, shift], L=proj.cell.L, P=proj.cell.P),
            "rotated": PhaseSpaceCell.polygon(rot, L=proj.cell.L, P=proj.cell.P),
        }
        decoys = {name: reference_gap(c) for name, c in candidates.items()}

    return EvolvedComparison(hs_gap=hs_gap, bound_ref=bound, eps_prime=eps_prime,
                             trace_initial=proj.trace,
                             trace_evolved=float(evolved.trace().real),
                             smearing_t=(float(sig_t), float(f_t), float(r_t)),
                             decoy_gaps=decoys)


def effective_growth_mu(eps_before: float, eps_after: float) -> float:
    """Predictability degradation mu = (1 + eps_after) / (1 + eps_before)."""
    for name, v in (("eps_before", eps_before), ("eps_after", eps_after)):
        if not (0.0 < v < 1.0):
            raise ConstraintError(f"{name} must lie in (0, 1), got {v}")
    return (1.0 + eps_after) / (1.0 + eps_before)
