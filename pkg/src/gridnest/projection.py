"""Value-function Taylor models from KKT sensitivity.

A program whose upper block is pinned defines a value function J(p): the
optimal objective as the pin p varies.  From one solve at a base pin we build:

- a first-order model from the multipliers alone (envelope theorem), which is
  a global under-estimator of J whenever the program is jointly convex; and
- a second-order model whose Hessian comes from differentiating the active
  KKT system with respect to p.

The sensitivity system treats registered equality pairs as single rows with a
free multiplier and keeps only strongly active inequalities.  Weakly active
rows (tight but with a vanishing multiplier) make the system ambiguous and are
reported via DegenerateActiveSet so callers can retry without them.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .program import ConvexProgram, Solution

__all__ = [
    "ActiveSet",
    "DegenerateActiveSet",
    "FirstOrderExpansion",
    "SecondOrderExpansion",
    "Sensitivity",
    "SingularKKTMatrix",
    "classify_active",
    "first_order_expansion",
    "second_order_expansion",
    "sensitivity",
]


class DegenerateActiveSet(RuntimeError):
    """Tight constraints with near-zero multipliers make sensitivity ambiguous."""

    def __init__(self, weak_rows: list[int]) -> None:
        super().__init__(f"weakly active constraints {weak_rows}")
        self.weak_rows = weak_rows


class SingularKKTMatrix(RuntimeError):
    """The active-set KKT system is rank deficient at the solution."""


@dataclass(frozen=True)
class FirstOrderExpansion:
    """Affine model J(p) ~ value + gradient.(p - base)."""

    base: np.ndarray
    value: float
    gradient: np.ndarray

    def evaluate(self, p: np.ndarray) -> float:
        return self.value + float(self.gradient @ (np.asarray(p, float) - self.base))


@dataclass(frozen=True)
class SecondOrderExpansion:
    """Quadratic model with the same value/slope plus a PSD curvature term."""

    base: np.ndarray
    value: float
    gradient: np.ndarray
    hessian: np.ndarray

    def evaluate(self, p: np.ndarray) -> float:
        d = np.asarray(p, float) - self.base
        return self.value + float(self.gradient @ d) + 0.5 * float(d @ (self.hessian @ d))

    def to_first_order(self) -> FirstOrderExpansion:
        return FirstOrderExpansion(self.base, self.value, self.gradient)


@dataclass
class ActiveSet:
    """Constraint classification at a solution.

    ``equalities`` holds one representative row per registered pair (always
    active); ``strong`` are tight inequalities with clearly positive
    multipliers; ``weak`` are tight with multipliers at noise level.
    """

    equalities: list[int] = field(default_factory=list)
    strong: list[int] = field(default_factory=list)
    weak: list[int] = field(default_factory=list)


def classify_active(program: ConvexProgram, solution: Solution,
                    act_tol: float = 1e-6) -> ActiveSet:
    v = solution.primal
    duals = solution.duals
    vals = program.constraint_values(v)
    paired = program.paired_indices()
    scale = 1.0 + float(np.abs(v).max(initial=0.0))
    lam_scale = 1.0 + float(duals.max(initial=0.0))
    out = ActiveSet()
    for i, _ in program.equality_pairs:
        out.equalities.append(i)
    for k in range(program.n_constraints):
        if k in paired:
            continue
        if vals[k] < -act_tol * scale:
            continue
        if duals[k] > act_tol * lam_scale:
            out.strong.append(k)
        else:
            out.weak.append(k)
    return out


@dataclass
class Sensitivity:
    """Derivatives of the pinned optimum with respect to the pin.

    ``primal`` rows follow the free-variable order (internal block then lower
    block); ``dual`` rows follow ``active_rows``.
    """

    primal: np.ndarray  # d z* / d p, (n_free, n_p)
    dual: np.ndarray  # d multipliers / d p, (n_active, n_p)
    active_rows: list[int]
    free_idx: np.ndarray
    hessian_full: np.ndarray  # Lagrangian Hessian over all variables


def _free_and_param_idx(program: ConvexProgram) -> tuple[np.ndarray, np.ndarray]:
    mask = np.ones(program.n, dtype=bool)
    mask[program.upper_slice] = False
    return np.flatnonzero(mask), np.arange(program.n)[program.upper_slice]


def _lagrangian_hessian(program: ConvexProgram, duals: np.ndarray) -> np.ndarray:
    H = program.C2.copy()
    for k, con in enumerate(program.constraints):
        if con.Q is not None and duals[k] != 0.0:
            H += duals[k] * con.Q
    return H


def sensitivity(program: ConvexProgram, solution: Solution, *,
                act_tol: float = 1e-6,
                drop_rows: set[int] | frozenset[int] = frozenset()) -> Sensitivity:
    """Differentiate the active KKT conditions with respect to the pin.

    Raises DegenerateActiveSet when tight-but-zero-multiplier rows exist (pass
    them through ``drop_rows`` to treat them as inactive) and SingularKKTMatrix
    when the active system is rank deficient.
    """
    if program.fixed_upper is None:
        raise ValueError("sensitivity requires a pinned upper block")
    active = classify_active(program, solution, act_tol)
    weak = [k for k in active.weak if k not in drop_rows]
    if weak:
        raise DegenerateActiveSet(weak)

    v = solution.primal
    z_idx, p_idx = _free_and_param_idx(program)
    rows = active.equalities + [k for k in active.strong if k not in drop_rows]
    nz, na, npar = z_idx.size, len(rows), p_idx.size

    H = _lagrangian_hessian(program, solution.duals)
    Hzz = H[np.ix_(z_idx, z_idx)]
    Hzp = H[np.ix_(z_idx, p_idx)]

    Ja = np.zeros((na, nz))
    Gp = np.zeros((na, npar))
    for r, k in enumerate(rows):
        grad = program.constraints[k].gradient(v)
        Ja[r] = grad[z_idx]
        Gp[r] = grad[p_idx]

    K = np.zeros((nz + na, nz + na))
    K[:nz, :nz] = Hzz
    K[:nz, nz:] = Ja.T
    K[nz:, :nz] = Ja
    rhs = -np.vstack([Hzp, Gp])

    if nz + na == 0:
        return Sensitivity(np.zeros((0, npar)), np.zeros((0, npar)), rows, z_idx, H)
    lu, piv = scipy.linalg.lu_factor(K, check_finite=False)
    diag = np.abs(np.diag(lu))
    if diag.size and diag.min() <= 1e-12 * max(1.0, diag.max()):
        raise SingularKKTMatrix(f"active KKT system rank deficient ({na} active rows)")
    sol = scipy.linalg.lu_solve((lu, piv), rhs, check_finite=False)
    return Sensitivity(sol[:nz], sol[nz:], rows, z_idx, H)


def first_order_expansion(program: ConvexProgram, solution: Solution) -> FirstOrderExpansion:
    """Envelope-theorem slope: objective and constraint gradients in the pin,
    weighted by the multipliers, evaluated at the solved point."""
    if program.fixed_upper is None:
        raise ValueError("expansion requires a pinned upper block")
    _, p_idx = _free_and_param_idx(program)
    v = solution.primal
    grad = program.objective_gradient(v)[p_idx]
    for k, con in enumerate(program.constraints):
        lam = solution.duals[k]
        if lam != 0.0:
            grad = grad + lam * con.gradient(v)[p_idx]
    return FirstOrderExpansion(program.fixed_upper.copy(), solution.objective, grad)


def second_order_expansion(program: ConvexProgram, solution: Solution, *,
                           act_tol: float = 1e-6,
                           drop_rows: set[int] | frozenset[int] = frozenset(),
                           ) -> SecondOrderExpansion:
    """Quadratic value-function model; curvature from the sensitivity system.

    The Hessian is symmetrized and eigenvalue-floored at zero.  A markedly
    negative eigenvalue signals an inconsistent sensitivity solve and raises
    SingularKKTMatrix rather than silently clipping it.
    """
    first = first_order_expansion(program, solution)
    sens = sensitivity(program, solution, act_tol=act_tol, drop_rows=drop_rows)
    z_idx, p_idx = _free_and_param_idx(program)
    H = sens.hessian_full
    Hzz = H[np.ix_(z_idx, z_idx)]
    Hzp = H[np.ix_(z_idx, p_idx)]
    Hpp = H[np.ix_(p_idx, p_idx)]
    R = sens.primal
    JH = R.T @ Hzz @ R + R.T @ Hzp + Hzp.T @ R + Hpp
    JH = 0.5 * (JH + JH.T)
    if JH.size:
        eigval, eigvec = np.linalg.eigh(JH)
        scale = max(1.0, float(np.abs(eigval).max()))
        if eigval.min() < -1e-8 * scale:
            raise SingularKKTMatrix(
                f"value-function curvature indefinite (min eig {eigval.min():.3e})")
        JH = (eigvec * np.clip(eigval, 0.0, None)) @ eigvec.T
    return SecondOrderExpansion(first.base, first.value, first.gradient, JH)
