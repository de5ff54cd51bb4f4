"""Decoherence functional for phase-space histories and its diagnostics.

Two-time histories alpha = (alpha_1, alpha_2) over partitions {P^1} at t1
and {P^2} at t2 carry the functional

    D(alpha, alpha') = delta_{alpha_2 alpha_2'}
                       Tr( P^2_{alpha_2} e^{L (t2-t1)}[ P^1_{alpha_1}
                           rho_{t1} P^1_{alpha_1'} ] )

computed here in the Schroedinger picture: lattice-matrix sandwiches are
brought back to kernel form and evolved with the split-step propagator
(which is linear and accepts non-Hermitian operands).  Off-diagonal
smallness of Re D licenses assigning probabilities to histories; the ratio
kappa quantifies how small.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product as _iproduct

import numpy as np

from .core import ConstraintError, PhysicalParams, PotentialModel
from .grid_solver import (
    GridOperator,
    GridSpec,
    Propagator,
    PropagatorConfig,
    box_identity_matrix,
    from_matrix,
    to_matrix,
)
from .quasiprojector import Quasiprojector

__all__ = [
    "CostGuardError",
    "Partition",
    "HistoryAlphabet",
    "DecoherenceTable",
    "markov_guard",
    "decoherence_functional_two_time",
    "n_time_functional",
    "consistency_epsilon",
    "conditional_probability",
]

FULL_TABLE_ENTRY_LIMIT = 10_000


class CostGuardError(RuntimeError):
    """The requested full table exceeds the entry budget."""


def _as_matrix(member, spec: GridSpec) -> np.ndarray:
    if isinstance(member, Quasiprojector):
        if member.kernel.spec != spec:
            raise ConstraintError("projector grid does not match the partition grid")
        return to_matrix(member.kernel)
    m = np.asarray(member)
    n = 2 * spec.n_u
    if m.shape != (n, n):
        raise ConstraintError(f"partition member matrix must be {(n, n)}, got {m.shape}")
    return m.astype(complex)


@dataclass
class Partition:
    """A finite list of effects at one time, summing to the box identity.

    Members may be Quasiprojectors or raw lattice matrices.  ``complete``
    appends the complement of the supplied members, making the sum exact.
    """

    labels: list
    matrices: list
    completeness_residual: float

    @classmethod
    def complete(cls, members, spec: GridSpec, labels=None) -> "Partition":
        mats = [_as_matrix(m, spec) for m in members]
        ident = box_identity_matrix(spec)
        rest = ident - sum(mats)
        mats.append(rest)
        if labels is None:
            labels = [f"P{i}" for i in range(len(mats) - 1)] + ["rest"]
        else:
            labels = list(labels) + ["rest"]
        return cls(labels=labels, matrices=mats, completeness_residual=0.0)

    @classmethod
    def from_members(cls, members, spec: GridSpec, labels=None,
                     tau_part: float = 1e-3) -> "Partition":
        """Partition from an explicit member list, checked for completeness.

        The residual ||sum P - 1||_HS / ||1||_HS must stay below tau_part;
        Gaussian tails leaking off the finite box are the usual cause when
        it does not.
        """
        mats = [_as_matrix(m, spec) for m in members]
        ident = box_identity_matrix(spec)
        resid = float(np.linalg.norm(sum(mats) - ident) / np.linalg.norm(ident))
        if resid > tau_part:
            raise ConstraintError(
                f"partition incomplete: ||sum P - 1|| = {resid:.3e} ||1|| exceeds "
                f"tau_part = {tau_part}")
        if labels is None:
            labels = [f"P{i}" for i in range(len(mats))]
        return cls(labels=list(labels), matrices=mats, completeness_residual=resid)

    def __len__(self):
        return len(self.matrices)


@dataclass
class HistoryAlphabet:
    """Ordered times t1 < ... < tn with a partition at each time."""

    times: list
    partitions: list

    def __post_init__(self):
        if len(self.times) != len(self.partitions):
            raise ConstraintError("need one partition per time")
        if len(self.times) < 2:
            raise ConstraintError("histories need at least two times")
        t = np.asarray(self.times, dtype=float)
        if not np.all(np.diff(t) > 0):
            raise ConstraintError("times must be strictly increasing")

    @property
    def min_spacing(self) -> float:
        return float(np.min(np.diff(np.asarray(self.times, dtype=float))))

    def n_histories(self) -> int:
        n = 1
        for p in self.partitions:
            n *= len(p)
        return n


def markov_guard(params: PhysicalParams, spacing: float):
    """Ratio of the projection spacing to the Markov time hbar/kT.

    Returns (ratio, ok); ok is None when kT = 0 (infinite Markov time, the
    guard does not apply).
    """
    if spacing <= 0:
        raise ConstraintError("spacing must be > 0")
    if params.kT == 0:
        return math.inf, None
    ratio = spacing / (params.hbar / params.kT)
    return ratio, bool(ratio > 1.0)


@dataclass
class DecoherenceTable:
    """Complex decoherence matrix over a finite history alphabet.

    ``labels[i]`` is the tuple of per-time branch indices of history i;
    ``matrix[i, j]`` is D(alpha_i, alpha_j).  Probabilities are the
    diagonal, reported raw and clipped to [0, 1] (clipping is flagged,
    not silent: approximate decoherence permits small negativity).
    """

    labels: list
    matrix: np.ndarray
    partition_labels: list
    markov_ratio: float
    markov_ok: object
    warnings: list = field(default_factory=list)

    @property
    def probabilities_raw(self) -> np.ndarray:
        return np.real(np.diag(self.matrix))

    @property
    def probabilities(self) -> np.ndarray:
        return np.clip(self.probabilities_raw, 0.0, 1.0)

    @property
    def clipped(self) -> bool:
        p = self.probabilities_raw
        return bool(np.any(p < 0.0) or np.any(p > 1.0))

    def imag_diag(self) -> float:
        return float(np.max(np.abs(np.imag(np.diag(self.matrix)))))


def _evolved_sandwich(left: np.ndarray, rho_mat: np.ndarray, right: np.ndarray,
                      prop: Propagator, n_steps: int, spec: GridSpec) -> np.ndarray:
    op = from_matrix(left @ rho_mat @ right, spec)
    prop.run(op, n_steps)
    return to_matrix(op)


def decoherence_functional_two_time(p1_list, p2_list, rho0: GridOperator,
                                    pot: PotentialModel, params: PhysicalParams,
                                    t1: float, t2: float,
                                    cfg: PropagatorConfig) -> DecoherenceTable:
    """Decoherence functional for two-time histories.

    ``p1_list`` and ``p2_list`` are Partitions (or lists accepted by
    Partition.from_members).  rho0 is evolved to t1; the sandwiched
    branches are evolved over t2 - t1; the final time enters through
    traces only, carrying the Kronecker-delta structure.
    """
    alphabet = HistoryAlphabet(times=[t1, t2], partitions=[
        p1_list if isinstance(p1_list, Partition) else Partition.from_members(p1_list, rho0.spec),
        p2_list if isinstance(p2_list, Partition) else Partition.from_members(p2_list, rho0.spec),
    ])
    return n_time_functional(alphabet, rho0, pot, params, cfg, mode="full")


def n_time_functional(alphabet: HistoryAlphabet, rho0: GridOperator,
                      pot: PotentialModel, params: PhysicalParams,
                      cfg: PropagatorConfig, mode: str = "full") -> DecoherenceTable:
    """Decoherence functional over an n-time alphabet.

    mode 'full' assembles the whole D(alpha, alpha') matrix (cost grows as
    the squared product of partition sizes; refused beyond
    FULL_TABLE_ENTRY_LIMIT entries).  mode 'diagonal' computes only the
    branch probabilities.
    """
    if cfg.direction != "schrodinger_L":
        raise ConstraintError("the decoherence functional evolves states; "
                              "use a schrodinger_L config")
    if mode not in ("full", "diagonal"):
        raise ConstraintError(f"mode must be 'full' or 'diagonal', got {mode!r}")
    n_hist = alphabet.n_histories()
    if mode == "full" and n_hist**2 > FULL_TABLE_ENTRY_LIMIT:
        raise CostGuardError(
            f"full table would hold {n_hist}^2 = {n_hist**2} entries "
            f"(> {FULL_TABLE_ENTRY_LIMIT}); use mode='diagonal' or coarsen")

    spec = rho0.spec
    times = [float(t) for t in alphabet.times]
    parts = alphabet.partitions
    warnings = []
    ratio, ok = markov_guard(params, alphabet.min_spacing)
    if ok is False:
        warnings.append(
            f"markov guard: min spacing / (hbar/kT) = {ratio:.3g} <= 1; "
            "the superoperator factorization of the functional is suspect")

    prop = Propagator(spec, pot, params, cfg)
    dt = cfg.dt

    def steps_for(span: float) -> int:
        n = max(1, int(round(span / dt)))
        if abs(n * dt - span) > 1e-9 * max(1.0, span):
            raise ConstraintError(
                f"evolution span {span} is not a multiple of dt = {dt}")
        return n

    rho = rho0.copy()
    if times[0] > 0:
        prop.run(rho, steps_for(times[0]))
    current = {((), ()): to_matrix(rho)}

    # walk the chain; keys are (left_indices, right_indices) after each time;
    # the split-step factors commute with the kernel adjoint, so only
    # lexicographically ordered keys are evolved and the rest mirrored
    n_times = len(times)
    for k in range(n_times - 1):
        part = parts[k]
        n_steps = steps_for(times[k + 1] - times[k])
        nxt = {}
        for (li, ri), mat in current.items():
            if li > ri:
                continue
            for a in range(len(part)):
                for b in range(len(part)):
                    if mode == "diagonal" and a != b:
                        continue
                    if li == ri and a > b:
                        continue
                    nxt[(li + (a,), ri + (b,))] = _evolved_sandwich(
                        part.matrices[a], mat, part.matrices[b], prop, n_steps, spec)
        mirrored = dict(nxt)
        for (li, ri), mat in nxt.items():
            if li != ri:
                mirrored[(ri, li)] = mat.conj().T
        current = mirrored

    final_part = parts[-1]
    labels = list(_iproduct(*[range(len(p)) for p in parts]))
    index = {lab: i for i, lab in enumerate(labels)}
    D = np.zeros((n_hist, n_hist), dtype=complex)
    for (li, ri), mat in current.items():
        for c in range(len(final_part)):
            # Tr(P X) = trace of the matrix product; one du weight already in each factor
            val = complex(np.einsum("ij,ji->", final_part.matrices[c], mat))
            D[index[li + (c,)], index[ri + (c,)]] = val
    table = DecoherenceTable(labels=labels, matrix=D,
                             partition_labels=[p.labels for p in parts],
                             markov_ratio=ratio, markov_ok=ok, warnings=warnings)
    _attach_structure_warnings(table, mode)
    return table


def _attach_structure_warnings(table: DecoherenceTable, mode: str):
    p = table.probabilities_raw
    tot = float(np.sum(p))
    if abs(tot - 1.0) > 5e-3:
        table.warnings.append(f"probabilities sum to {tot:.6f}, not 1")
    if table.imag_diag() > 1e-6:
        table.warnings.append(
            f"diagonal carries imaginary residue {table.imag_diag():.3e}")
    if table.clipped:
        table.warnings.append("probabilities clipped to [0, 1]; raw values retained")


def consistency_epsilon(table: DecoherenceTable) -> float:
    """Smallest eps for which |Re D(a, a')| <= eps sum_a D(a, a) holds.

    This is the weak (consistency) condition; callers wanting the strict
    decoherence variant can take |D| off the table directly.
    """
    diag_sum = float(np.sum(np.real(np.diag(table.matrix))))
    if diag_sum <= 0:
        raise ConstraintError("degenerate table: diagonal sum is not positive")
    n = table.matrix.shape[0]
    off = np.abs(np.real(table.matrix - np.diag(np.diag(table.matrix))))
    return float(np.max(off)) / diag_sum if n > 1 else 0.0


def conditional_probability(table: DecoherenceTable, from_index: int, to_index: int):
    """p(final = to_index | first = from_index), plus the raw unclipped value.

    Marginalizes the diagonal over the final-time branch for fixed first
    branch.  from/to address the first and last slots of the label tuples.
    """
    p = table.probabilities_raw
    num = 0.0
    den = 0.0
    for lab, prob in zip(table.labels, p):
        if lab[0] == from_index:
            den += prob
            if lab[-1] == to_index:
                num += prob
    if den <= 0:
        raise ConstraintError(
            f"conditional undefined: marginal probability of branch {from_index} "
            f"is {den:.3e}")
    raw = num / den
    return min(max(raw, 0.0), 1.0), raw
