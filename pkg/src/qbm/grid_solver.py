"""Brute-force master-equation solver on a (u, s) = ((x+y)/2, x-y) lattice.

Every term of the Markovian master equation is exactly solvable in these
coordinates, so one split step is a product of four factors:

  potential    multiply by exp(-i [V(u+s/2) - V(u-s/2)] dt / hbar)   (pointwise)
  kinetic      multiply by exp(-i hbar k_u k_s dt / M)               (2-D Fourier)
  dissipation  characteristic remap rho(u, s) <- rho(u, s e^{-2 gamma dt})
  diffusion    multiply by exp(-D s^2 dt / hbar^2)                   (pointwise)

plus, optionally, the Dekker factor exp(-eta k_u^2 dt) folded into the
Fourier pass.  The Heisenberg-picture step applies the exact discrete
adjoints of the same factors in reverse order, which makes the trace
duality Tr(M^n[P] rho) = Tr(P L^n[rho]) hold to roundoff at any step size.

FFT sign convention: the forward transform carries e^{-iks}; all propagator
phases are written against it and pinned by the free-particle analytic test.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import ConstraintError, GaussianState, PhysicalParams, PotentialModel, eval_density

__all__ = [
    "AliasingError",
    "GeometryError",
    "GridSpec",
    "GridOperator",
    "PropagatorConfig",
    "Propagator",
    "GridObservables",
    "SymbolTable",
    "init_from_gaussian",
    "step_L",
    "step_M",
    "observables",
    "hs_distance_to_gaussian",
    "weyl_symbol",
    "weyl_quantize",
    "to_matrix",
    "from_matrix",
    "box_identity_matrix",
    "trace_pairing",
    "matrix_grid_spec",
]


class AliasingError(ConstraintError):
    """State or operator does not fit the grid (position box or momentum Nyquist)."""


class GeometryError(ConstraintError):
    """Lattice does not admit the requested coordinate mapping."""


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class GridSpec:
    """Mean/difference lattice: u in [-l_u, l_u), s in [-l_s, l_s).

    n_u, n_s are powers of two >= 32.  The matrix bridge (``to_matrix``)
    additionally requires n_u == n_s and l_s == 2 l_u so that the (u, s)
    samples map exactly onto an (x, y) lattice of spacing du.
    """

    n_u: int
    n_s: int
    l_u: float
    l_s: float

    def __post_init__(self):
        for n in (self.n_u, self.n_s):
            if n < 32 or not _is_pow2(n):
                raise ConstraintError(f"grid sizes must be powers of two >= 32, got {n}")
        if not (self.l_u > 0 and self.l_s > 0):
            raise ConstraintError("grid half-extents must be > 0")

    @classmethod
    def square(cls, n: int, l_u: float) -> "GridSpec":
        """Matrix-bridge-compatible spec with n_u = n_s = n and l_s = 2 l_u."""
        return cls(n_u=n, n_s=n, l_u=l_u, l_s=2.0 * l_u)

    @property
    def du(self) -> float:
        return 2.0 * self.l_u / self.n_u

    @property
    def ds(self) -> float:
        return 2.0 * self.l_s / self.n_s

    def u(self) -> np.ndarray:
        return -self.l_u + self.du * np.arange(self.n_u)

    def s(self) -> np.ndarray:
        return -self.l_s + self.ds * np.arange(self.n_s)

    def ku(self) -> np.ndarray:
        return 2.0 * np.pi * np.fft.fftfreq(self.n_u, self.du)

    def ks(self) -> np.ndarray:
        return 2.0 * np.pi * np.fft.fftfreq(self.n_s, self.ds)

    def xi(self, hbar: float) -> np.ndarray:
        """Momentum grid conjugate to s (Weyl-symbol axis), xi = hbar * ks."""
        return hbar * self.ks()

    @property
    def s_zero_index(self) -> int:
        return self.n_s // 2

    def s_reflection_index(self) -> np.ndarray:
        """Index map j -> j' with s_{j'} = -s_j (the -l_s edge maps to itself)."""
        idx = np.zeros(self.n_s, dtype=int)
        idx[1:] = np.arange(self.n_s - 1, 0, -1)
        return idx

    def matrix_compatible(self) -> bool:
        return self.n_u == self.n_s and abs(self.l_s - 2.0 * self.l_u) <= 1e-12 * self.l_u


class GridOperator:
    """Operator kernel K(u_i, s_j) = <u + s/2| K |u - s/2> on a GridSpec.

    Steps mutate ``values`` in place; a GridOperator is owned by one
    evolution at a time.
    """

    def __init__(self, spec: GridSpec, values: np.ndarray, hermitian_hint: bool = False):
        values = np.asarray(values, dtype=complex)
        if values.shape != (spec.n_u, spec.n_s):
            raise GeometryError(
                f"values shape {values.shape} does not match grid {(spec.n_u, spec.n_s)}")
        self.spec = spec
        self.values = values
        self.hermitian_hint = hermitian_hint

    def copy(self) -> "GridOperator":
        return GridOperator(self.spec, self.values.copy(), self.hermitian_hint)

    def trace(self) -> complex:
        return self.spec.du * np.sum(self.values[:, self.spec.s_zero_index])

    def hs_norm(self) -> float:
        return math.sqrt(self.spec.du * self.spec.ds * float(np.sum(np.abs(self.values) ** 2)))

    def hermiticity_residual(self) -> float:
        """max |K(u,-s) - conj K(u,s)| over the lattice."""
        refl = self.spec.s_reflection_index()
        return float(np.max(np.abs(self.values[:, refl] - np.conj(self.values))))

    def check_hermitian(self, rel_tol: float = 1e-10):
        peak = float(np.max(np.abs(self.values)))
        if peak > 0 and self.hermiticity_residual() > rel_tol * peak:
            raise ConstraintError(
                f"hermitian_hint violated: residual {self.hermiticity_residual():.3e} "
                f"exceeds {rel_tol:.0e} * max|K| = {rel_tol * peak:.3e}")


@dataclass(frozen=True)
class PropagatorConfig:
    """Step size, splitting scheme, evolution direction, and the Dekker switch.

    scheme 'lie' composes the four factors once per step (first order);
    'strang' uses the palindromic composition V/2 T/2 R/2 G R/2 T/2 V/2,
    i.e. the potential factor symmetrized around an internally symmetric
    free-Brownian block (second order).  remap 'spectral' resamples the
    dissipation characteristic with the exact trigonometric interpolant;
    'catmull_rom' uses the cubic kernel (kept for cross-checks; its O(h^3)
    bias accumulates along the contraction and is visible at desk grids).
    """

    dt: float
    scheme: str = "strang"
    direction: str = "schrodinger_L"
    include_eta: bool = False
    remap: str = "spectral"

    def __post_init__(self):
        if self.dt <= 0:
            raise ConstraintError("dt must be > 0")
        if self.scheme not in ("lie", "strang"):
            raise ConstraintError(f"scheme must be lie or strang, got {self.scheme!r}")
        if self.direction not in ("schrodinger_L", "heisenberg_M"):
            raise ConstraintError(f"unknown direction {self.direction!r}")
        if self.remap not in ("spectral", "catmull_rom"):
            raise ConstraintError(f"unknown remap {self.remap!r}")


def _remap_matrix_spectral(s: np.ndarray, ds: float, c: float) -> np.ndarray:
    """Dense gather matrix R with (R v)_j = trig-interpolant of v at c s_j.

    Exact for band-limited rows; the unpaired Nyquist mode is evaluated as a
    cosine so R stays real.
    """
    n = len(s)
    x = (c * s - s[0]) / ds
    k = np.fft.fftfreq(n, 1.0)
    E = np.exp(2j * np.pi * np.outer(x, k)) / n
    E[:, n // 2] = np.cos(2.0 * np.pi * x * k[n // 2]) / n
    return np.ascontiguousarray((E @ np.fft.fft(np.eye(n), axis=0)).real)


def _remap_matrix_catmull_rom(s: np.ndarray, ds: float, c: float) -> np.ndarray:
    """Catmull-Rom gather matrix; gathers outside [-l_s, l_s) read zero."""
    n = len(s)
    x = (c * s - s[0]) / ds
    i1 = np.floor(x).astype(int)
    w = x - i1
    weights = np.stack([
        -0.5 * w**3 + w**2 - 0.5 * w,
        1.5 * w**3 - 2.5 * w**2 + 1.0,
        -1.5 * w**3 + 2.0 * w**2 + 0.5 * w,
        0.5 * w**3 - 0.5 * w**2,
    ], axis=1)
    R = np.zeros((n, n))
    rows = np.arange(n)
    for m in range(4):
        idx = i1 + m - 1
        ok = (idx >= 0) & (idx < n)
        R[rows[ok], idx[ok]] += weights[ok, m]
    return R


class Propagator:
    """Precomputed split-step factors for one (spec, pot, params, cfg) tuple.

    ``step`` advances the kernel in place by cfg.dt in the configured
    direction.  ``mass_lost_estimate`` accumulates the Hilbert-Schmidt mass
    that the Heisenberg-direction remap pushed past the s-boundary (the
    zero-padding loss the finite grid cannot represent).
    """

    def __init__(self, spec: GridSpec, pot: PotentialModel, params: PhysicalParams,
                 cfg: PropagatorConfig):
        self.spec = spec
        self.cfg = cfg
        self.params = params
        u = spec.u()
        s = spec.s()
        dv = pot.value(u[:, None] + s[None, :] / 2.0) - pot.value(u[:, None] - s[None, :] / 2.0)
        ku, ks = np.meshgrid(spec.ku(), spec.ks(), indexing="ij")
        hbar, M, D = params.hbar, params.mass, params.D
        eta = params.eta if cfg.include_eta else 0.0
        dt = cfg.dt

        half = (cfg.scheme == "strang")
        dt_v = dt / 2.0 if half else dt
        dt_t = dt / 2.0 if half else dt
        dt_r = dt / 2.0 if half else dt
        self._phase_v = np.exp(-1j * dv * dt_v / hbar)
        # Dekker factor exp(-eta k_u^2 dt) rides along in the Fourier pass
        self._phase_t = np.exp(-1j * hbar * ku * ks * dt_t / M - eta * ku**2 * dt_t)
        self._gauss = np.exp(-D * s[None, :] ** 2 * dt / hbar**2)
        make = _remap_matrix_spectral if cfg.remap == "spectral" else _remap_matrix_catmull_rom
        contraction = math.exp(-2.0 * params.gamma * dt_r)
        self._R = make(s, spec.ds, contraction)
        # transposed gather = spreading form used by step_L (values[:, j] = sum_i R[j, i] v_i)
        self._RT = np.ascontiguousarray(self._R.T)
        # columns of the gather matrix that are never read feed the
        # Heisenberg-direction mass-loss diagnostic
        self._col_deficit = np.clip(1.0 - np.abs(self._R).sum(axis=0), 0.0, None)
        self.mass_lost_estimate = 0.0
        self.steps_taken = 0

    def _apply_T(self, K, conj):
        ph = np.conj(self._phase_t) if conj else self._phase_t
        return np.fft.ifft2(np.fft.fft2(K) * ph)

    def step(self, op: GridOperator) -> GridOperator:
        if op.spec != self.spec:
            raise GeometryError("operator grid does not match propagator grid")
        K = op.values
        if self.cfg.direction == "schrodinger_L":
            if self.cfg.scheme == "strang":
                K = K * self._phase_v
                K = self._apply_T(K, conj=False)
                K = K @ self._RT
                K = K * self._gauss
                K = K @ self._RT
                K = self._apply_T(K, conj=False)
                K = K * self._phase_v
            else:
                K = K * self._phase_v
                K = self._apply_T(K, conj=False)
                K = K @ self._RT
                K = K * self._gauss
        else:
            self._track_mass_loss(K)
            if self.cfg.scheme == "strang":
                K = K * np.conj(self._phase_v)
                K = self._apply_T(K, conj=True)
                K = K @ self._R
                K = K * self._gauss
                K = K @ self._R
                K = self._apply_T(K, conj=True)
                K = K * np.conj(self._phase_v)
            else:
                K = K * self._gauss
                K = K @ self._R
                K = self._apply_T(K, conj=True)
                K = K * np.conj(self._phase_v)
        op.values = np.ascontiguousarray(K)
        self.steps_taken += 1
        return op

    def run(self, op: GridOperator, n_steps: int) -> GridOperator:
        for _ in range(n_steps):
            self.step(op)
        return op

    def _track_mass_loss(self, K):
        if np.any(self._col_deficit > 1e-12):
            w = self._col_deficit[None, :]
            self.mass_lost_estimate += math.sqrt(
                self.spec.du * self.spec.ds * float(np.sum(w * np.abs(K) ** 2)))

    def support_loss_warning(self, rel_slack: float = 1e-6, hs_ref: float = 1.0):
        """Return a warning string when accumulated mass loss exceeds the slack."""
        if self.mass_lost_estimate > rel_slack * hs_ref:
            return (f"heisenberg remap support loss: ~{self.mass_lost_estimate:.3e} "
                    f"HS mass pushed past the s-boundary over {self.steps_taken} steps")
        return None


def step_L(op: GridOperator, pot: PotentialModel, params: PhysicalParams,
           cfg: PropagatorConfig) -> GridOperator:
    """One Schroedinger-picture step.  Convenience wrapper; batch runs should
    build a :class:`Propagator` once and call ``step`` repeatedly."""
    if cfg.direction != "schrodinger_L":
        raise ConstraintError("step_L requires cfg.direction = 'schrodinger_L'")
    return Propagator(op.spec, pot, params, cfg).step(op)


def step_M(op: GridOperator, pot: PotentialModel, params: PhysicalParams,
           cfg: PropagatorConfig) -> GridOperator:
    """One Heisenberg-picture step (exact discrete adjoint of step_L)."""
    if cfg.direction != "heisenberg_M":
        raise ConstraintError("step_M requires cfg.direction = 'heisenberg_M'")
    return Propagator(op.spec, pot, params, cfg).step(op)


def init_from_gaussian(state: GaussianState, params: PhysicalParams,
                       spec: GridSpec) -> GridOperator:
    """Sample a Gaussian state onto the grid, guarding against aliasing.

    The state must fit the box (6 position widths inside l_u), its coherence
    length must fit the s-range, and the momentum grid must satisfy the
    Nyquist bound xi_max = pi hbar / ds > 5 (|p| + dp).
    """
    hbar = params.hbar
    dq = math.sqrt(hbar / state.sigma)
    if 6.0 * dq + abs(state.q) >= spec.l_u:
        raise AliasingError(
            f"state too wide for box: 6 dq + |q| = {6*dq + abs(state.q):.3g} >= l_u = {spec.l_u}")
    s_width = math.sqrt(hbar / (2.0 * state.f)) * (1.0 + abs(state.r))
    if 6.0 * s_width >= spec.l_s:
        raise AliasingError(
            f"coherence length too long: 6 sqrt(hbar/2f)(1+|r|) = {6*s_width:.3g} >= l_s = {spec.l_s}")
    dp = math.sqrt(hbar * state.f * (1.0 + state.sigma * state.r**2 / (4 * state.f)))
    ks_max = math.pi / spec.ds
    if ks_max * hbar <= 5.0 * (abs(state.p) + dp):
        raise AliasingError(
            f"momentum Nyquist bound violated: pi hbar/ds = {ks_max*hbar:.3g} "
            f"<= 5 (|p| + dp) = {5*(abs(state.p)+dp):.3g}")
    u = spec.u()
    s = spec.s()
    values = eval_density(state, params, u[:, None], s[None, :])
    return GridOperator(spec, values, hermitian_hint=True)


@dataclass(frozen=True)
class GridObservables:
    trace: float
    hs_norm: float
    q: float
    p: float
    dq2: float
    dp2: float
    cpq: float
    purity: float


def _ds_column(op: GridOperator, hbar: float, order: int) -> np.ndarray:
    """Spectral d^order/ds^order of the kernel, evaluated at s = 0."""
    ks = op.spec.ks()
    deriv = np.fft.ifft(np.fft.fft(op.values, axis=1) * (1j * ks[None, :]) ** order, axis=1)
    return deriv[:, op.spec.s_zero_index]


def observables(op: GridOperator, params: PhysicalParams,
                require_hermitian: bool = True) -> GridObservables:
    """Trace, HS norm, first/second moments and purity of a kernel.

    Position moments integrate the diagonal K(u, 0); momentum moments use
    spectral s-derivatives at s = 0.  Purity is hs_norm^2 / trace^2 (exact
    for Hermitian kernels).
    """
    if require_hermitian and not op.hermitian_hint:
        raise ConstraintError("moment extraction requires a Hermitian kernel "
                              "(pass require_hermitian=False to override)")
    spec = op.spec
    diag = op.values[:, spec.s_zero_index].real
    u = spec.u()
    tr = spec.du * float(np.sum(diag))
    qbar = spec.du * float(np.sum(u * diag)) / tr
    dq2 = spec.du * float(np.sum((u - qbar) ** 2 * diag)) / tr
    hbar = params.hbar
    d1 = _ds_column(op, hbar, 1)
    d2 = _ds_column(op, hbar, 2)
    pbar = float(np.real(-1j * hbar * spec.du * np.sum(d1))) / tr
    p2 = float(np.real(-(hbar**2) * spec.du * np.sum(d2))) / tr
    qp_sym = float(np.real(-1j * hbar * spec.du * np.sum(u * d1))) / tr
    hs = op.hs_norm()
    return GridObservables(trace=tr, hs_norm=hs, q=qbar, p=pbar,
                           dq2=dq2, dp2=p2 - pbar**2, cpq=qp_sym - qbar * pbar,
                           purity=hs**2 / tr**2)


def hs_distance_to_gaussian(op: GridOperator, state: GaussianState,
                            params: PhysicalParams) -> float:
    """Hilbert-Schmidt distance between the kernel and a sampled Gaussian."""
    spec = op.spec
    g = eval_density(state, params, spec.u()[:, None], spec.s()[None, :])
    return math.sqrt(spec.du * spec.ds * float(np.sum(np.abs(op.values - g) ** 2)))


@dataclass
class SymbolTable:
    """Weyl symbol f(u_i, xi_k) with its grids; xi is in fftfreq order."""

    spec: GridSpec
    hbar: float
    values: np.ndarray  # (n_u, n_s) complex; real for Hermitian kernels

    def u(self) -> np.ndarray:
        return self.spec.u()

    def xi(self) -> np.ndarray:
        return self.spec.xi(self.hbar)

    def at(self, x: float, xi: float) -> complex:
        """Symbol value at the grid point nearest (x, xi)."""
        iu = int(np.argmin(np.abs(self.u() - x)))
        ix = int(np.argmin(np.abs(self.xi() - xi)))
        return complex(self.values[iu, ix])


def weyl_symbol(op: GridOperator, params: PhysicalParams) -> SymbolTable:
    """f(u, xi) = sum_j ds e^{-i xi s_j / hbar} K(u, s_j), xi = hbar k_s."""
    spec = op.spec
    ks = spec.ks()
    f = spec.ds * np.fft.fft(op.values, axis=1) * np.exp(-1j * ks * spec.s()[0])[None, :]
    return SymbolTable(spec=spec, hbar=params.hbar, values=f)


def weyl_quantize(symbol: SymbolTable, params: PhysicalParams,
                  spec: GridSpec | None = None) -> GridOperator:
    """Inverse of :func:`weyl_symbol`; the xi-grid must match the spec's."""
    if spec is None:
        spec = symbol.spec
    if spec != symbol.spec:
        raise GeometryError("symbol table grid does not match the requested spec")
    if abs(symbol.hbar - params.hbar) > 1e-15 * params.hbar:
        raise GeometryError("symbol table hbar does not match params.hbar")
    ks = spec.ks()
    g = symbol.values * np.exp(1j * ks * spec.s()[0])[None, :] / spec.ds
    values = np.fft.ifft(g, axis=1)
    return GridOperator(spec, values)


def _upsample2(K: np.ndarray) -> np.ndarray:
    """Spectral x2 refinement in both axes (exact for band-limited kernels).

    The unpaired Nyquist coefficient is split between +-N/2 so real kernels
    stay real and node values are preserved exactly.
    """
    n0, n1 = K.shape
    Kf = np.fft.fftshift(np.fft.fft2(K))
    pad = np.zeros((2 * n0, 2 * n1), dtype=complex)
    pad[n0 // 2: n0 // 2 + n0, n1 // 2: n1 // 2 + n1] = Kf
    # split Nyquist rows/columns (they sit at the lower edge of the embedded block)
    pad[n0 // 2 + n0, n1 // 2: n1 // 2 + n1] = 0.5 * pad[n0 // 2, n1 // 2: n1 // 2 + n1]
    pad[n0 // 2, n1 // 2: n1 // 2 + n1] *= 0.5
    pad[:, n1 // 2 + n1] = 0.5 * pad[:, n1 // 2]
    pad[:, n1 // 2] *= 0.5
    return np.fft.ifft2(np.fft.ifftshift(pad)) * 4.0


def _require_matrix_compatible(spec: GridSpec):
    if not spec.matrix_compatible():
        raise GeometryError(
            "matrix bridge requires n_u == n_s and l_s == 2 l_u "
            f"(got n_u={spec.n_u}, n_s={spec.n_s}, l_u={spec.l_u}, l_s={spec.l_s})")


def matrix_grid_spec(spec: GridSpec):
    """The x-lattice behind to_matrix: 2 n points, spacing du, from -2 l_u."""
    _require_matrix_compatible(spec)
    n = spec.n_u
    return -2.0 * spec.l_u + spec.du * np.arange(2 * n)


def to_matrix(op: GridOperator) -> np.ndarray:
    """Kernel matrix M_ab = K((x_a+x_b)/2, x_a-x_b) du on the x-lattice.

    With l_s = 2 l_u the (u, s) samples land exactly on the (x, y) lattice;
    the half-spaced midpoints are filled by exact spectral refinement.
    Matrix products then approximate operator composition with one du
    quadrature weight per product, trace(M) = trace(K), and the Frobenius
    norm equals the HS norm.
    """
    spec = op.spec
    _require_matrix_compatible(spec)
    n = spec.n_u
    fine = _upsample2(op.values)
    a = np.arange(2 * n)
    A, B = np.meshgrid(a, a, indexing="ij")
    iu = A + B - n          # fine-u index, spacing du/2 over [-l_u, l_u)
    js = A - B + n          # fine-s index, spacing du over [-2 l_u, 2 l_u)
    ok = (iu >= 0) & (iu < 2 * n) & (js >= 0) & (js < 2 * n)
    m = np.zeros((2 * n, 2 * n), dtype=complex)
    m[ok] = fine[iu[ok], js[ok]] * spec.du
    return m


def from_matrix(m: np.ndarray, spec: GridSpec, hermitian_hint: bool = False) -> GridOperator:
    """Exact inverse of :func:`to_matrix` on the lattice.

    Every (u_i, s_j) grid point is an exact (x_a, y_b) pair, so no
    interpolation is involved: K(u_i, s_j) = M[i+j, i-j+n] / du.
    """
    _require_matrix_compatible(spec)
    n = spec.n_u
    if m.shape != (2 * n, 2 * n):
        raise GeometryError(f"matrix shape {m.shape} does not match grid ({2*n}, {2*n})")
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    values = m[i + j, i - j + n] / spec.du
    return GridOperator(spec, values, hermitian_hint=hermitian_hint)


def box_identity_matrix(spec: GridSpec) -> np.ndarray:
    """Identity operator on the finite box, in matrix representation."""
    _require_matrix_compatible(spec)
    return np.eye(2 * spec.n_u, dtype=complex)


def trace_pairing(a: GridOperator, b: GridOperator) -> complex:
    """Tr(A B) evaluated on the lattice as sum A(u, s) B(u, -s) du ds."""
    if a.spec != b.spec:
        raise GeometryError("operators live on different grids")
    refl = a.spec.s_reflection_index()
    return a.spec.du * a.spec.ds * complex(np.sum(a.values * b.values[:, refl]))
