"""Convex program model with partitioned variable blocks.

A program's variable vector is laid out as ``v = [internal | upper | lower]``.
The objective is a quadratic form; every constraint is a quadratic-representable
inequality ``g(v) <= 0``.  Equality constraints are stored as registered pairs
``g <= 0`` / ``-g <= 0`` so the constraint list stays inequality-only.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np


class ProgramError(ValueError):
    """Raised when a program violates its construction invariants."""


class ConstraintKind(enum.Enum):
    # linear: g = q.v + r, zero Hessian
    LINEAR = "linear"
    # quadratic: PSD Hessian (convex function)
    QUADRATIC = "quadratic"
    # cone: squared second-order-cone form |Av|^2 - (b.v)^2 <= 0; the Hessian is
    # indefinite but the region is convex given the b.v >= 0 side constraint
    CONE = "cone"


@dataclass(frozen=True)
class QuadraticConstraint:
    """Inequality oracle g(v) = 0.5 v'Qv + q'v + r <= 0 (Q omitted when linear)."""

    q: np.ndarray
    r: float
    Q: np.ndarray | None = None
    kind: ConstraintKind = ConstraintKind.LINEAR
    name: str = ""

    def value(self, v: np.ndarray) -> float:
        val = float(self.q @ v) + self.r
        if self.Q is not None:
            val += 0.5 * float(v @ (self.Q @ v))
        return val

    def gradient(self, v: np.ndarray) -> np.ndarray:
        if self.Q is None:
            return self.q.copy()
        return self.Q @ v + self.q

    def hessian(self, v: np.ndarray) -> np.ndarray:
        if self.Q is None:
            return np.zeros((self.q.size, self.q.size))
        return self.Q.copy()


class SolveStatus(enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    MAX_ITERATIONS = "MaxIterations"


@dataclass(frozen=True)
class KktResiduals:
    stationarity: float
    complementarity: float
    feasibility: float

    def max(self) -> float:
        return max(self.stationarity, self.complementarity, self.feasibility)


@dataclass
class Solution:
    """Primal-dual solve result over the full (pins included) variable vector."""

    primal: np.ndarray
    duals: np.ndarray
    objective: float
    status: SolveStatus
    kkt_residuals: KktResiduals
    iterations: int = 0

    @property
    def optimal(self) -> bool:
        return self.status is SolveStatus.OPTIMAL


def _check_symmetric_psd(M: np.ndarray, tag: str, floor: float = -1e-9) -> None:
    if not np.allclose(M, M.T, atol=1e-10):
        raise ProgramError(f"{tag}: matrix not symmetric")
    if M.shape[0] == 0:
        return
    scale = max(1.0, float(np.abs(M).max()))
    lo = float(np.linalg.eigvalsh(M).min())
    if lo < floor * scale:
        raise ProgramError(f"{tag}: not PSD (min eigenvalue {lo:.3e})")


@dataclass
class ConvexProgram:
    """Quadratic objective + quadratic-representable inequality constraints.

    ``equality_pairs`` lists index pairs (i, j) where constraint j is the exact
    negation of constraint i; together they pin g_i(v) = 0.  ``fixed_upper``
    pins the upper-boundary block to a constant, turning it into a parameter.
    """

    n_internal: int
    n_upper: int
    n_lower: int
    c0: float
    c1: np.ndarray
    C2: np.ndarray
    constraints: list[QuadraticConstraint] = field(default_factory=list)
    equality_pairs: list[tuple[int, int]] = field(default_factory=list)
    fixed_upper: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.n_internal + self.n_upper + self.n_lower

    @property
    def n_constraints(self) -> int:
        return len(self.constraints)

    @property
    def internal_slice(self) -> slice:
        return slice(0, self.n_internal)

    @property
    def upper_slice(self) -> slice:
        return slice(self.n_internal, self.n_internal + self.n_upper)

    @property
    def lower_slice(self) -> slice:
        return slice(self.n_internal + self.n_upper, self.n)

    def objective_value(self, v: np.ndarray) -> float:
        return self.c0 + float(self.c1 @ v) + 0.5 * float(v @ (self.C2 @ v))

    def objective_gradient(self, v: np.ndarray) -> np.ndarray:
        return self.C2 @ v + self.c1

    def constraint_values(self, v: np.ndarray) -> np.ndarray:
        return np.array([c.value(v) for c in self.constraints])

    def paired_indices(self) -> dict[int, int]:
        """Map from each pair member to its twin."""
        out: dict[int, int] = {}
        for i, j in self.equality_pairs:
            out[i] = j
            out[j] = i
        return out

    def validate(self) -> None:
        n = self.n
        if self.c1.shape != (n,) or self.C2.shape != (n, n):
            raise ProgramError("objective dimensions do not match variable blocks")
        _check_symmetric_psd(self.C2, "objective")
        for k, con in enumerate(self.constraints):
            if con.q.shape != (n,):
                raise ProgramError(f"constraint {k} ({con.name}): bad gradient size")
            if con.Q is not None and con.Q.shape != (n, n):
                raise ProgramError(f"constraint {k} ({con.name}): bad Hessian size")
            if con.kind is ConstraintKind.QUADRATIC:
                _check_symmetric_psd(con.Q, f"constraint {k} ({con.name})")
            if con.kind is ConstraintKind.LINEAR and con.Q is not None:
                raise ProgramError(f"constraint {k} ({con.name}): linear with Hessian")
        seen: set[int] = set()
        for i, j in self.equality_pairs:
            if i in seen or j in seen:
                raise ProgramError("equality pair indices overlap")
            seen.update((i, j))
            gi, gj = self.constraints[i], self.constraints[j]
            if gi.kind is not ConstraintKind.LINEAR or gj.kind is not ConstraintKind.LINEAR:
                raise ProgramError("equality pairs must be linear")
            if not (np.allclose(gi.q, -gj.q, atol=1e-12) and abs(gi.r + gj.r) <= 1e-9 * (1 + abs(gi.r))):
                raise ProgramError(f"constraints {i}/{j} are not an exact negation pair")
        if self.fixed_upper is not None and self.fixed_upper.shape != (self.n_upper,):
            raise ProgramError("fixed_upper dimension does not match n_upper")

    def with_fixed_upper(self, pin: np.ndarray | None) -> "ConvexProgram":
        pin = None if pin is None else np.asarray(pin, dtype=float)
        if pin is not None and pin.shape != (self.n_upper,):
            raise ProgramError("pin dimension does not match n_upper")
        return replace(self, fixed_upper=pin)


def kkt_residual(program: ConvexProgram, point: np.ndarray, duals: np.ndarray) -> KktResiduals:
    """Raw KKT residuals of (point, duals) for the program as posed.

    Stationarity is measured over the free variables (the pinned upper block,
    when present, is a parameter).  Complementarity is max_i |lambda_i g_i|;
    feasibility is the worst inequality violation max_i max(g_i, 0).
    """
    point = np.asarray(point, dtype=float)
    duals = np.asarray(duals, dtype=float)
    if point.shape != (program.n,):
        raise ProgramError(f"point has size {point.size}, expected {program.n}")
    if duals.shape != (program.n_constraints,):
        raise ProgramError(f"duals has size {duals.size}, expected {program.n_constraints}")
    grad = program.objective_gradient(point)
    for lam, con in zip(duals, program.constraints):
        if lam != 0.0:
            grad = grad + lam * con.gradient(point)
    if program.fixed_upper is not None:
        mask = np.ones(program.n, dtype=bool)
        mask[program.upper_slice] = False
        grad = grad[mask]
    vals = program.constraint_values(point)
    stationarity = float(np.abs(grad).max()) if grad.size else 0.0
    complementarity = float(np.abs(duals * vals).max()) if vals.size else 0.0
    feasibility = float(np.maximum(vals, 0.0).max()) if vals.size else 0.0
    return KktResiduals(stationarity, complementarity, feasibility)


class ProgramBuilder:
    """Incremental builder that manages the block layout and named variables.

    Declare all variables first (``add_internal`` / ``add_upper`` / ``add_lower``),
    then add objective terms and constraints against the returned index arrays.
    """

    def __init__(self) -> None:
        self._sizes = {"internal": 0, "upper": 0, "lower": 0}
        self._vars: list[tuple[str, str, int]] = []  # (name, block, size)
        self._sealed = False
        self._names: dict[str, np.ndarray] = {}
        self._obj_const = 0.0
        self._lin: list[tuple[np.ndarray, np.ndarray]] = []
        self._quad: list[tuple[np.ndarray, np.ndarray]] = []
        self._cons: list[QuadraticConstraint] = []
        self._pairs: list[tuple[int, int]] = []

    def _add_var(self, name: str, block: str, size: int) -> str:
        if self._sealed:
            raise ProgramError("cannot declare variables after layout is sealed")
        if name in (v[0] for v in self._vars):
            raise ProgramError(f"duplicate variable name {name!r}")
        if size < 0:
            raise ProgramError("variable size must be nonnegative")
        self._vars.append((name, block, size))
        self._sizes[block] += size
        return name

    def add_internal(self, name: str, size: int = 1) -> str:
        return self._add_var(name, "internal", size)

    def add_upper(self, name: str, size: int = 1) -> str:
        return self._add_var(name, "upper", size)

    def add_lower(self, name: str, size: int = 1) -> str:
        return self._add_var(name, "lower", size)

    def _seal(self) -> None:
        if self._sealed:
            return
        offsets = {"internal": 0}
        offsets["upper"] = self._sizes["internal"]
        offsets["lower"] = offsets["upper"] + self._sizes["upper"]
        for name, block, size in self._vars:
            self._names[name] = np.arange(offsets[block], offsets[block] + size)
            offsets[block] += size
        self._sealed = True

    @property
    def n(self) -> int:
        return sum(self._sizes.values())

    def idx(self, name: str) -> np.ndarray:
        """Absolute indices of a declared variable in the final layout."""
        self._seal()
        return self._names[name]

    # -- objective -----------------------------------------------------------
    def add_constant_cost(self, c: float) -> None:
        self._obj_const += float(c)

    def add_linear_cost(self, idx: np.ndarray, coeff) -> None:
        self._seal()
        idx = np.atleast_1d(idx)
        self._lin.append((idx, np.broadcast_to(np.asarray(coeff, float), idx.shape).copy()))

    def add_quadratic_cost(self, idx: np.ndarray, coeff) -> None:
        """Adds sum_k coeff_k * v_k^2 (diagonal quadratic cost)."""
        self._seal()
        idx = np.atleast_1d(idx)
        self._quad.append((idx, np.broadcast_to(np.asarray(coeff, float), idx.shape).copy()))

    # -- constraints ---------------------------------------------------------
    def _vec(self, terms: dict) -> np.ndarray:
        self._seal()
        q = np.zeros(self.n)
        for key, coeff in terms.items():
            idx = self._names[key] if isinstance(key, str) else np.atleast_1d(key)
            q[idx] += np.broadcast_to(np.asarray(coeff, float), idx.shape)
        return q

    def add_le(self, terms: dict, rhs: float, name: str = "") -> int:
        """Linear constraint sum(terms) <= rhs; terms maps name/indices -> coeffs."""
        q = self._vec(terms)
        self._cons.append(QuadraticConstraint(q=q, r=-float(rhs), name=name))
        return len(self._cons) - 1

    def add_ge(self, terms: dict, rhs: float, name: str = "") -> int:
        q = self._vec(terms)
        self._cons.append(QuadraticConstraint(q=-q, r=float(rhs), name=name))
        return len(self._cons) - 1

    def add_eq(self, terms: dict, rhs: float, name: str = "") -> tuple[int, int]:
        """Equality as a registered inequality pair g <= 0, -g <= 0."""
        q = self._vec(terms)
        i = len(self._cons)
        self._cons.append(QuadraticConstraint(q=q, r=-float(rhs), name=name or "eq"))
        self._cons.append(QuadraticConstraint(q=-q, r=float(rhs), name=(name or "eq") + "~"))
        self._pairs.append((i, i + 1))
        return i, i + 1

    def add_box(self, name_or_idx, lo, hi, name: str = "") -> None:
        self._seal()
        idx = self._names[name_or_idx] if isinstance(name_or_idx, str) else np.atleast_1d(name_or_idx)
        lo = np.broadcast_to(np.asarray(lo, float), idx.shape)
        hi = np.broadcast_to(np.asarray(hi, float), idx.shape)
        label = name or (name_or_idx if isinstance(name_or_idx, str) else "box")
        for k, j in enumerate(idx):
            if np.isfinite(hi[k]):
                self.add_le({int(j): 1.0}, hi[k], name=f"{label}[{k}]<=")
            if np.isfinite(lo[k]):
                self.add_ge({int(j): 1.0}, lo[k], name=f"{label}[{k}]>=")

    def add_quadratic_le(self, Q: np.ndarray, q_terms: dict, rhs: float, name: str = "",
                         kind: ConstraintKind = ConstraintKind.QUADRATIC) -> int:
        """Constraint 0.5 v'Qv + q.v <= rhs with full-size Q."""
        self._seal()
        q = self._vec(q_terms)
        self._cons.append(QuadraticConstraint(q=q, r=-float(rhs), Q=np.asarray(Q, float), kind=kind, name=name))
        return len(self._cons) - 1

    def add_cone_le(self, sq_idx: np.ndarray, bound_idx: np.ndarray, name: str = "") -> int:
        """Squared-cone row: sum(v[sq]^2) <= prod-or-square of v[bound].

        With one bound index the row is |v[sq]|^2 <= v[b]^2; with two it is the
        rotated form |v[sq]|^2 <= v[b1] * v[b2].  Callers must constrain the
        bound variables nonnegative for the region to be convex.
        """
        self._seal()
        sq_idx = np.atleast_1d(sq_idx)
        bound_idx = np.atleast_1d(bound_idx)
        Q = np.zeros((self.n, self.n))
        for j in sq_idx:
            Q[j, j] = 2.0
        if bound_idx.size == 1:
            b = int(bound_idx[0])
            Q[b, b] = -2.0
        elif bound_idx.size == 2:
            b1, b2 = int(bound_idx[0]), int(bound_idx[1])
            Q[b1, b2] -= 1.0
            Q[b2, b1] -= 1.0
        else:
            raise ProgramError("cone bound must be one or two variables")
        self._cons.append(QuadraticConstraint(q=np.zeros(self.n), r=0.0, Q=Q,
                                              kind=ConstraintKind.CONE, name=name))
        return len(self._cons) - 1

    def build(self, validate: bool = True) -> ConvexProgram:
        self._seal()
        n = self.n
        c1 = np.zeros(n)
        for idx, coeff in self._lin:
            np.add.at(c1, idx, coeff)
        C2 = np.zeros((n, n))
        for idx, coeff in self._quad:
            np.add.at(C2, (idx, idx), 2.0 * coeff)
        prog = ConvexProgram(
            n_internal=self._sizes["internal"],
            n_upper=self._sizes["upper"],
            n_lower=self._sizes["lower"],
            c0=self._obj_const,
            c1=c1,
            C2=C2,
            constraints=list(self._cons),
            equality_pairs=list(self._pairs),
        )
        if validate:
            prog.validate()
        return prog
