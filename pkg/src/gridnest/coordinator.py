"""Hierarchical coordination by exchanging value-function models.

A tree of convex programs is solved by iterating at each internal node:
children are solved at pinned boundary values, each returns first- and
second-order models of its value function, and the node re-optimizes a master
program in which each child is represented by an epigraph variable bounded by
its latest second-order model and every accumulated first-order model.  The
recursion bottoms out at leaves (direct solves); an internal node hands its
converged master, cuts included, to its own parent for projection.

Every pinned solve goes through a penalty relaxation: the boundary pin is met
through slack variables with a linear price, so child problems stay feasible
for any pin and the pin parameter enters only simple linear rows.  That keeps
envelope slopes bounded even where the underlying problem loses constraint
regularity (e.g. a second-order cone pinned at its vertex).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .program import ConstraintKind, ConvexProgram, ProgramError, QuadraticConstraint, Solution, SolveStatus
from .projection import (
    DegenerateActiveSet,
    FirstOrderExpansion,
    SecondOrderExpansion,
    SingularKKTMatrix,
    classify_active,
    first_order_expansion,
    second_order_expansion,
)
from .solver import solve

__all__ = [
    "AntiCyclingState",
    "ConvergedFormulation",
    "CoordinationConfig",
    "CoordinationError",
    "CoordinationResult",
    "HierarchyNode",
    "IterationRecord",
    "IterationTrace",
    "MaxOuterIterations",
    "RelaxedLower",
    "anti_cycling_step",
    "compute_optimum",
    "compute_projection_nested",
    "default_penalty",
    "relax_lower",
    "solve_bilevel",
    "solve_nested",
]


class CoordinationError(RuntimeError):
    """A subproblem failed; carries the (level, index) path of the culprit."""

    def __init__(self, label: str, message: str) -> None:
        super().__init__(f"[node {label}] {message}")
        self.label = label


class MaxOuterIterations(CoordinationError):
    def __init__(self, label: str, iterations: int, trace: "IterationTrace",
                 pin: np.ndarray | None = None) -> None:
        super().__init__(label, f"no convergence within {iterations} outer iterations")
        self.iterations = iterations
        self.trace = trace
        self.pin = pin  # the upper boundary this run was pinned to


@dataclass
class HierarchyNode:
    """One problem in the tree plus the selector feeding each child its pin."""

    level: int
    index: int
    problem: ConvexProgram
    mapping: np.ndarray | None = None  # rows: own upper dims, cols: parent lower dims
    children: list["HierarchyNode"] = field(default_factory=list)
    name: str = ""

    @property
    def label(self) -> str:
        return self.name or f"{self.level}.{self.index}"

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def validate(self, parent: "HierarchyNode | None" = None) -> None:
        if parent is None:
            if self.problem.n_upper != 0:
                raise ProgramError(f"root node {self.label} must have an empty upper block")
        else:
            if self.mapping is None:
                raise ProgramError(f"node {self.label} lacks a boundary mapping")
            if self.mapping.shape != (self.problem.n_upper, parent.problem.n_lower):
                raise ProgramError(
                    f"node {self.label}: mapping shape {self.mapping.shape} does not "
                    f"match (upper={self.problem.n_upper}, parent lower="
                    f"{parent.problem.n_lower})")
        if self.is_leaf and self.problem.n_lower != 0:
            raise ProgramError(f"leaf node {self.label} must have an empty lower block")
        seen = set()
        for child in self.children:
            if id(child) in seen:
                raise ProgramError(f"node {self.label}: duplicate child object")
            seen.add(id(child))
            child.validate(self)

    def depth(self) -> int:
        return 1 + max((c.depth() for c in self.children), default=0)


@dataclass(frozen=True)
class CoordinationConfig:
    epsilon: float = 1e-6
    max_outer: int = 100
    c_ply: float | None = None  # None: per-node automatic scale
    anti_cycling: bool = False
    act_tol: float = 1e-6
    # masters and children are solved well below epsilon so that leftover
    # barrier noise cannot masquerade as boundary movement between rounds
    solver_tol: float = 1e-10
    solver_max_iter: int = 200
    first_order_only: bool = False  # cutting-plane-only mode (Benders-style)
    prune_cuts: bool = False  # drop first-order cuts based at the latest model's base

    def __post_init__(self) -> None:
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.c_ply is not None and self.c_ply < 0:
            raise ValueError("c_ply must be nonnegative")


@dataclass
class IterationRecord:
    k: int
    boundary: np.ndarray
    l_norm_change: float
    upper_obj: float
    child_values: dict[str, float]
    lower_bound_obj: float | None
    inner_iters: int
    flags: list[str] = field(default_factory=list)
    gap: float | None = None  # feasible total minus cut-model total, when both exist
    t_prox: float = 0.0  # proximal weight the step was taken under

    @property
    def sum_o(self) -> float:
        return float(sum(self.child_values.values()))


@dataclass
class IterationTrace:
    node_label: str
    records: list[IterationRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def lower_bounds(self) -> list[float]:
        return [r.lower_bound_obj for r in self.records if r.lower_bound_obj is not None]


def default_penalty(program: ConvexProgram) -> float:
    """Boundary-mismatch price: two orders above the objective's own scale, so
    the relaxation is exact wherever the value function's slopes live, while
    keeping the elastic multipliers small enough not to wreck the barrier
    solver's conditioning at slightly infeasible pins."""
    scale = 1.0 + float(np.abs(program.c1).max(initial=0.0))
    if program.C2.size:
        scale += float(np.abs(np.diag(program.C2)).max(initial=0.0))
    return 1e2 * scale


@dataclass
class RelaxedLower:
    """Pin-relaxed clone of a program.

    Layout: ``[original internal | freed upper | s+ | s- | pin parameter |
    lower]`` with the pin living in the (fixed) upper block, an elastic split
    ``u - p = s+ - s-`` enforced as an equality pair, nonnegative slack halves,
    and a price ``c_ply * (s + s^2)`` on each slack half.  The equality
    multiplier then carries the boundary slope exactly even where the inner
    problem's own multipliers blow up.
    """

    program: ConvexProgram
    free_upper_slice: slice
    slack_slice: slice
    old_to_new: np.ndarray

    def original_point(self, v: np.ndarray) -> np.ndarray:
        return v[self.old_to_new]

    def max_slack(self, v: np.ndarray) -> float:
        s = v[self.slack_slice]
        if not s.size:
            return 0.0
        half = s.size // 2
        return float((s[:half] + s[half:]).max())


def relax_lower(problem: ConvexProgram, pin: np.ndarray, c_ply: float) -> RelaxedLower:
    pin = np.asarray(pin, dtype=float)
    if pin.shape != (problem.n_upper,):
        raise ProgramError(f"pin has size {pin.size}, expected {problem.n_upper}")
    if c_ply < 0:
        raise ProgramError("penalty must be nonnegative")
    ni, nu, nl = problem.n_internal, problem.n_upper, problem.n_lower
    if nu == 0:
        return RelaxedLower(problem.with_fixed_upper(pin), slice(ni, ni), slice(ni, ni),
                            np.arange(problem.n))

    n_new = ni + 4 * nu + nl
    old_to_new = np.concatenate([np.arange(ni + nu), ni + 4 * nu + np.arange(nl)])
    u_free = np.arange(ni, ni + nu)
    sp_idx = np.arange(ni + nu, ni + 2 * nu)
    sm_idx = np.arange(ni + 2 * nu, ni + 3 * nu)
    p_idx = np.arange(ni + 3 * nu, ni + 4 * nu)

    c1 = np.zeros(n_new)
    c1[old_to_new] = problem.c1
    c1[sp_idx] += c_ply
    c1[sm_idx] += c_ply
    C2 = np.zeros((n_new, n_new))
    C2[np.ix_(old_to_new, old_to_new)] = problem.C2
    # the linear coefficient alone already makes the relaxation exact at
    # feasible pins; the quadratic term keeps the relaxed value function
    # strictly curved across infeasible pins, where a purely linear price
    # would leave it piecewise flat and its curvature models degenerate
    C2[sp_idx, sp_idx] += 2.0 * c_ply
    C2[sm_idx, sm_idx] += 2.0 * c_ply

    cons: list[QuadraticConstraint] = []
    for con in problem.constraints:
        q = np.zeros(n_new)
        q[old_to_new] = con.q
        Q = None
        if con.Q is not None:
            Q = np.zeros((n_new, n_new))
            Q[np.ix_(old_to_new, old_to_new)] = con.Q
        cons.append(QuadraticConstraint(q=q, r=con.r, Q=Q, kind=con.kind, name=con.name))
    pairs = list(problem.equality_pairs)
    for j in range(nu):
        q = np.zeros(n_new)
        q[u_free[j]], q[p_idx[j]], q[sp_idx[j]], q[sm_idx[j]] = 1.0, -1.0, -1.0, 1.0
        cons.append(QuadraticConstraint(q=q, r=0.0, name=f"pin[{j}]+"))
        cons.append(QuadraticConstraint(q=-q, r=0.0, name=f"pin[{j}]-"))
        pairs.append((len(cons) - 2, len(cons) - 1))
    for j in range(nu):
        q = np.zeros(n_new)
        q[sp_idx[j]] = -1.0
        cons.append(QuadraticConstraint(q=q, r=0.0, name=f"slack+[{j}]"))
        q = np.zeros(n_new)
        q[sm_idx[j]] = -1.0
        cons.append(QuadraticConstraint(q=q, r=0.0, name=f"slack-[{j}]"))

    prog = ConvexProgram(
        n_internal=ni + 3 * nu,
        n_upper=nu,
        n_lower=nl,
        c0=problem.c0,
        c1=c1,
        C2=C2,
        constraints=cons,
        equality_pairs=pairs,
        fixed_upper=pin.copy(),
    )
    return RelaxedLower(prog, slice(ni, ni + nu), slice(ni + nu, ni + 3 * nu), old_to_new)


@dataclass
class ConvergedFormulation:
    """A pinned program together with its solved point, ready for projection."""

    program: ConvexProgram
    solution: Solution


@dataclass
class NodeReport:
    """Result of optimizing one subtree at a pinned boundary."""

    value: float
    formulation: ConvergedFormulation
    outer: int
    bottom_solves: int
    boundary: dict[str, np.ndarray]
    per_node: dict[str, dict]
    trace: IterationTrace | None
    max_slack: float
    flags: list[str]


class Decision(enum.Enum):
    PROCEED = "proceed"
    ROLLBACK = "rollback"


@dataclass(frozen=True)
class AntiCyclingState:
    boundary: np.ndarray
    objective: float


def anti_cycling_step(previous: AntiCyclingState | None, current: AntiCyclingState,
                      tol: float = 1e-9) -> Decision:
    """Compare consecutive solutions of the cutting-plane-only master; a repeat
    means the curvature-bearing master is cycling and its pin should be
    replaced by the cutting-plane iterate."""
    if previous is None:
        return Decision.PROCEED
    same_l = previous.boundary.shape == current.boundary.shape and bool(
        np.all(np.abs(previous.boundary - current.boundary) <= tol))
    same_obj = abs(previous.objective - current.objective) <= tol * (
        1.0 + abs(current.objective))
    return Decision.ROLLBACK if (same_l and same_obj) else Decision.PROCEED


# ---------------------------------------------------------------------------
# solve acceptance
# ---------------------------------------------------------------------------


def _accept(sol: Solution, label: str, what: str) -> list[str]:
    """Gate a solver result.  A clean optimum passes; an iteration-limited
    result passes with a flag when primal feasibility and complementarity are
    tight (multipliers may legitimately diverge at non-regular geometry);
    anything else aborts coordination."""
    if sol.status is SolveStatus.OPTIMAL:
        return []
    if sol.status is SolveStatus.MAX_ITERATIONS:
        res = sol.kkt_residuals
        prim_ok = res.feasibility <= 1e-6 * (1.0 + float(np.abs(sol.primal).max(initial=0.0)))
        comp_ok = res.complementarity <= 1e-4 * (1.0 + abs(sol.objective))
        if prim_ok and comp_ok:
            return [f"weak-kkt:{what}"]
    raise CoordinationError(label, f"{what} solve ended {sol.status.value}")


def _is_exactish(sol: Solution) -> bool:
    """True when a result can be used as if it were a clean optimum.

    At non-regular geometry the barrier can stall on complementarity while the
    point itself has long settled: primal-feasible and stationary to orders of
    magnitude below coordination tolerances.  Such a point's objective is a
    valid achieved value (feasibility is what an upper bound needs) and its
    multipliers support a tangent, so downstream consumers treat it as exact.
    """
    if sol.status is SolveStatus.OPTIMAL:
        return True
    if sol.status is not SolveStatus.MAX_ITERATIONS:
        return False
    res = sol.kkt_residuals
    prim_scale = 1.0 + float(np.abs(sol.primal).max(initial=0.0))
    return (res.feasibility <= 1e-8 * prim_scale
            and res.stationarity <= 1e-6 * (1.0 + abs(sol.objective)))


# ---------------------------------------------------------------------------
# projection of a converged formulation
# ---------------------------------------------------------------------------


def _merge_duplicate_actives(program: ConvexProgram, solution: Solution,
                             act_tol: float) -> tuple[Solution, set[int]]:
    """Fold multipliers of active rows with duplicated gradients onto a single
    carrier row (preferring one with curvature) and mark the rest dropped.

    At a converged master the latest affine cut is tangent to the quadratic
    model at the same base, which duplicates a KKT row exactly; locally only
    the curved row stays active away from the base, so it carries the merged
    multiplier.
    """
    active = classify_active(program, solution, act_tol)
    rows = active.strong + active.weak
    v = solution.primal
    grads = {k: program.constraints[k].gradient(v) for k in rows}
    duals = solution.duals.copy()
    dropped: set[int] = set()
    for i_pos, i in enumerate(rows):
        if i in dropped:
            continue
        for j in rows[i_pos + 1:]:
            if j in dropped:
                continue
            gi, gj = grads[i], grads[j]
            scale = max(float(np.abs(gi).max()), float(np.abs(gj).max()), 1e-12)
            if float(np.abs(gi - gj).max()) > 1e-6 * scale:
                continue
            carrier, dup = i, j
            if program.constraints[i].Q is None and program.constraints[j].Q is not None:
                carrier, dup = j, i
            duals[carrier] += duals[dup]
            duals[dup] = 0.0
            dropped.add(dup)
    return replace(solution, duals=duals), dropped


def compute_projection_nested(formulation: ConvergedFormulation, *,
                              act_tol: float = 1e-6,
                              first_order_only: bool = False,
                              ) -> tuple[FirstOrderExpansion, SecondOrderExpansion | None, list[str]]:
    """Value-function models of a converged (possibly cut-carrying) program.

    The affine model needs only the multipliers and is always produced.  The
    quadratic model goes through a fallback chain: plain sensitivity, retry
    with weakly active rows forced inactive, retry after merging
    duplicated-gradient rows, and finally none (caller uses the affine model).
    """
    prog, sol = formulation.program, formulation.solution
    jf = first_order_expansion(prog, sol)
    flags: list[str] = []
    if first_order_only:
        return jf, None, flags
    if not _is_exactish(sol):
        return jf, None, ["second-order-skipped:weak-kkt"]

    attempts: list[tuple[Solution, set[int]]] = [(sol, set())]
    merged, dropped = _merge_duplicate_actives(prog, sol, act_tol)
    if dropped:
        attempts.append((merged, dropped))
    for attempt_sol, drops in attempts:
        try:
            js = second_order_expansion(prog, attempt_sol, act_tol=act_tol, drop_rows=drops)
        except DegenerateActiveSet as deg:
            try:
                js = second_order_expansion(prog, attempt_sol, act_tol=act_tol,
                                            drop_rows=drops | set(deg.weak_rows))
                flags.append("degenerate-rows-dropped")
            except (SingularKKTMatrix, DegenerateActiveSet):
                continue
        except SingularKKTMatrix:
            continue
        if drops:
            flags.append("duplicate-cuts-merged")
        return jf, js, flags
    flags.append("first-order-fallback")
    return jf, None, flags


# ---------------------------------------------------------------------------
# master assembly
# ---------------------------------------------------------------------------


@dataclass
class _Master:
    program: ConvexProgram
    o_index: dict[str, int]
    rel_to_master: np.ndarray  # relaxed-program variable positions in the master


def _build_master(relaxed: ConvexProgram, order: list[str],
                  js_map: dict[str, SecondOrderExpansion | None],
                  jf_map: dict[str, list[FirstOrderExpansion]],
                  mappings: dict[str, np.ndarray],
                  use_second_order: bool,
                  prune_tol: float | None,
                  jf_fallback: dict[str, FirstOrderExpansion] | None = None,
                  prox: tuple[float, np.ndarray] | None = None) -> _Master:
    ni, nu, nl = relaxed.n_internal, relaxed.n_upper, relaxed.n_lower
    nc = len(order)
    n_new = ni + nc + nu + nl
    rel_map = np.concatenate([np.arange(ni), ni + nc + np.arange(nu + nl)])
    o_pos = {label: ni + j for j, label in enumerate(order)}
    l_pos = ni + nc + nu + np.arange(nl)

    c1 = np.zeros(n_new)
    c1[rel_map] = relaxed.c1
    for label in order:
        c1[o_pos[label]] += 1.0
    C2 = np.zeros((n_new, n_new))
    C2[np.ix_(rel_map, rel_map)] = relaxed.C2
    c0 = relaxed.c0
    if prox is not None and prox[0] > 0.0:
        # stabilization around the best evaluated boundary: curvature t on the
        # boundary block keeps the trial point near territory the cuts have
        # actually measured
        t, center = prox
        C2[l_pos, l_pos] += t
        c1[l_pos] -= t * center
        c0 += 0.5 * t * float(center @ center)

    cons: list[QuadraticConstraint] = []
    for con in relaxed.constraints:
        q = np.zeros(n_new)
        q[rel_map] = con.q
        Q = None
        if con.Q is not None:
            Q = np.zeros((n_new, n_new))
            Q[np.ix_(rel_map, rel_map)] = con.Q
        cons.append(QuadraticConstraint(q=q, r=con.r, Q=Q, kind=con.kind, name=con.name))

    def affine_row(label: str, base: np.ndarray, value: float, gradient: np.ndarray,
                   tag: str) -> QuadraticConstraint:
        sel = mappings[label]
        q = np.zeros(n_new)
        q[l_pos] = sel.T @ gradient
        q[o_pos[label]] = -1.0
        return QuadraticConstraint(q=q, r=value - float(gradient @ base), name=tag)

    for label in order:
        js = js_map.get(label) if use_second_order else None
        if js is not None:
            sel = mappings[label]
            H = js.hessian
            q = np.zeros(n_new)
            q[l_pos] = sel.T @ (js.gradient - H @ js.base)
            q[o_pos[label]] = -1.0
            r = js.value - float(js.gradient @ js.base) + 0.5 * float(js.base @ (H @ js.base))
            if np.any(H):
                Q = np.zeros((n_new, n_new))
                Q[np.ix_(l_pos, l_pos)] = sel.T @ H @ sel
                cons.append(QuadraticConstraint(q=q, r=r, Q=Q,
                                                kind=ConstraintKind.QUADRATIC,
                                                name=f"model2:{label}"))
            else:
                cons.append(QuadraticConstraint(q=q, r=r, name=f"model2:{label}"))
            if jf_fallback and label in jf_fallback:
                # the quadratic model may be anchored away from this round's
                # boundary (offset rebuild); the tangent taken at the boundary
                # itself is what keeps the epigraph honest there, so it rides
                # along whenever the two base points differ
                fb = jf_fallback[label]
                if float(np.abs(fb.base - js.base).max(initial=0.0)) > (prune_tol or 0.0):
                    cons.append(affine_row(label, fb.base, fb.value, fb.gradient,
                                           f"model1-current:{label}"))
        elif use_second_order and jf_fallback and label in jf_fallback:
            # no quadratic model this round: the freshest affine model stands
            # in so the child's epigraph variable never goes unsupported
            fb = jf_fallback[label]
            cons.append(affine_row(label, fb.base, fb.value, fb.gradient,
                                   f"model1-current:{label}"))
        for i, jf in enumerate(jf_map.get(label, [])):
            if (prune_tol is not None and js is not None
                    and float(np.abs(jf.base - js.base).max(initial=0.0)) <= prune_tol):
                continue
            cons.append(affine_row(label, jf.base, jf.value, jf.gradient,
                                   f"model1:{label}:{i}"))

    prog = ConvexProgram(
        n_internal=ni + nc,
        n_upper=nu,
        n_lower=nl,
        c0=c0,
        c1=c1,
        C2=C2,
        constraints=cons,
        equality_pairs=list(relaxed.equality_pairs),
        fixed_upper=None if relaxed.fixed_upper is None else relaxed.fixed_upper.copy(),
    )
    return _Master(prog, o_pos, rel_map)


# ---------------------------------------------------------------------------
# the coordination recursion
# ---------------------------------------------------------------------------


@dataclass
class _CutModels:
    report: NodeReport
    jf: FirstOrderExpansion
    js: SecondOrderExpansion | None
    flags: list[str]


def _cut_models(child: HierarchyNode, pin: np.ndarray,
                config: CoordinationConfig,
                warm: dict[str, np.ndarray] | None = None) -> _CutModels:
    rep = compute_optimum(child, pin, config, warm=warm)
    jf, js, proj_flags = compute_projection_nested(
        rep.formulation, act_tol=config.act_tol,
        first_order_only=config.first_order_only)
    return _CutModels(rep, jf, js, proj_flags)


def _solve_at_boundary(relaxed: RelaxedLower, l_init: np.ndarray,
                       config: CoordinationConfig) -> Solution | None:
    """Solve the relaxed node with its lower boundary held at a known-good
    point, restarting a coordination from where a previous run settled."""
    prog = relaxed.program
    if l_init.shape != (prog.n_lower,):
        return None
    cons = list(prog.constraints)
    pairs = list(prog.equality_pairs)
    lo = prog.lower_slice.start
    for j in range(prog.n_lower):
        q = np.zeros(prog.n)
        q[lo + j] = 1.0
        cons.append(QuadraticConstraint(q=q, r=-float(l_init[j]), name=f"restart[{j}]+"))
        cons.append(QuadraticConstraint(q=-q, r=float(l_init[j]), name=f"restart[{j}]-"))
        pairs.append((len(cons) - 2, len(cons) - 1))
    pinned = replace(prog, constraints=cons, equality_pairs=pairs)
    sol = solve(pinned, tol=config.solver_tol, max_iter=config.solver_max_iter)
    return sol if _is_exactish(sol) else None


def _nudged_cut_models(child: HierarchyNode, pin: np.ndarray,
                       config: CoordinationConfig,
                       want_second: bool,
                       warm: dict[str, np.ndarray] | None = None,
                       ) -> tuple[_CutModels | None, int]:
    """Rebuild the child's value-function models at slightly offset pins.

    At (or too near) a non-regular pin the multipliers or their sensitivities
    carry no usable local model.  Models rebuilt at a nearby regular pin are
    still global underestimators by convexity, so they are safe rows for the
    master; near a crease of the value surface they can be arbitrarily loose
    at the original pin, which is why the caller keeps the tangent taken at
    the pin itself whenever that solve stood.  Returns the usable models (or
    None if every offset stays non-regular) and the child solves spent trying.
    """
    scale = 1.0 + float(np.abs(pin).max(initial=0.0))
    spent = 0
    for h in (1e-4, -1e-4, 1e-2, -1e-2):
        try:
            cand = _cut_models(child, pin + h * scale, config, warm)
        except CoordinationError:
            continue
        spent += cand.report.bottom_solves
        if not _is_exactish(cand.report.formulation.solution):
            continue
        if want_second and cand.js is None:
            continue
        return cand, spent
    return None, spent


def compute_optimum(node: HierarchyNode, pin: np.ndarray,
                    config: CoordinationConfig,
                    warm: dict[str, np.ndarray] | None = None) -> NodeReport:
    """Optimize the subtree rooted at ``node`` with its upper boundary pinned.

    Leaves solve directly.  Internal nodes run the coordination loop: solve
    children at the current boundary, collect their value-function models,
    re-optimize the master, and stop when the boundary settles within epsilon.
    The returned formulation is the final master (cuts included), which the
    parent projects as if it were a plain lower problem.

    ``warm`` (shared across one tree solve) remembers where each node's lower
    boundary settled last time; a rerun of the same node under a slightly
    moved pin starts from there instead of from the node-alone optimum, which
    is what keeps the cost of repeated child evaluations flat.
    """
    c_ply = config.c_ply if config.c_ply is not None else default_penalty(node.problem)
    relaxed = relax_lower(node.problem, pin, c_ply)
    flags: list[str] = []
    if c_ply == 0.0 and node.problem.n_upper:
        flags.append("penalty-vacuous")

    if node.is_leaf:
        sol = solve(relaxed.program, tol=config.solver_tol, max_iter=config.solver_max_iter)
        flags += _accept(sol, node.label, "leaf")
        orig_point = relaxed.original_point(sol.primal)
        per_node = {node.label: {
            "level": node.level, "index": node.index,
            "objective": float(node.problem.objective_value(orig_point)),
            "status": sol.status.value, "outer_iterations": 0,
            "point": orig_point.copy(),
        }}
        return NodeReport(
            value=sol.objective, formulation=ConvergedFormulation(relaxed.program, sol),
            outer=0, bottom_solves=1, boundary={}, per_node=per_node, trace=None,
            max_slack=relaxed.max_slack(sol.primal), flags=flags)

    # initialization: the boundary a previous run of this node settled at, if
    # one is known and still admits a solve; otherwise the node alone,
    # children ignored
    init_sol: Solution | None = None
    if warm is not None and node.label in warm:
        init_sol = _solve_at_boundary(relaxed, warm[node.label], config)
        if init_sol is not None:
            flags.append("warm-start")
    if init_sol is None:
        init_sol = solve(relaxed.program, tol=config.solver_tol,
                         max_iter=config.solver_max_iter)
        flags += _accept(init_sol, node.label, "initialization")
    l_prev = init_sol.primal[relaxed.program.lower_slice].copy()

    order = [child.label for child in node.children]
    mappings = {child.label: child.mapping for child in node.children}
    js_map: dict[str, SecondOrderExpansion | None] = {}
    jf_map: dict[str, list[FirstOrderExpansion]] = {label: [] for label in order}
    trace = IterationTrace(node.label)
    prev40: AntiCyclingState | None = None
    use_second = not config.first_order_only
    prune_tol = max(10.0 * config.epsilon, 1e-8) if config.prune_cuts else None

    master_sol: Solution | None = None
    master: _Master | None = None
    l_final: np.ndarray | None = None
    own_final: np.ndarray | None = None
    # point (relaxed layout) whose lower block equals l_prev: its own cost plus
    # the children's true values at l_prev is a feasible total for the subtree
    ub_point: np.ndarray | None = init_sol.primal.copy()
    # stabilization state: best evaluated boundary, its total, the proximal
    # weight, and the previous round's trial bookkeeping for the serious/null
    # decision (deferred one round, when the trial point's true total arrives)
    center_l = l_prev.copy()
    center_own = init_sol.primal.copy()
    f_center: float | None = None
    center_child_vals: dict[str, float] | None = None
    t_prox = 0.0
    pending: tuple[float, float, float] | None = None  # predicted, model value, step²
    flat_run = 0  # consecutive measured totals level with the incumbent
    for k in range(1, config.max_outer + 1):
        iter_flags: list[str] = []
        inner = 0
        jf_new: dict[str, FirstOrderExpansion] = {}
        ub_exact = ub_point is not None
        child_total = 0.0
        child_vals: dict[str, float] = {}
        for child in node.children:
            child_pin = child.mapping @ l_prev
            models = _cut_models(child, child_pin, config, warm)
            inner += models.report.bottom_solves
            iter_flags += [f"{child.label}:{f}" for f in models.report.flags]
            usable = (_is_exactish(models.report.formulation.solution)
                      and (models.js is not None or not use_second))
            if not usable:
                nudged, spent = _nudged_cut_models(child, child_pin, config,
                                                   want_second=use_second,
                                                   warm=warm)
                inner += spent
                if nudged is not None:
                    if _is_exactish(models.report.formulation.solution):
                        # the solve at the boundary itself stood, only its
                        # curvature model is missing: keep the exact tangent
                        # taken here and borrow curvature from the offset solve
                        models = _CutModels(models.report, models.jf, nudged.js,
                                            models.flags + nudged.flags)
                    else:
                        models = nudged
                    iter_flags.append(f"{child.label}:nudged-cut")
            if not _is_exactish(models.report.formulation.solution) \
                    or not np.array_equal(models.jf.base, child_pin):
                ub_exact = False  # this child's value was not taken exactly at l_prev
            child_total += models.report.value
            child_vals[child.label] = models.report.value
            jf_new[child.label] = models.jf
            if use_second:
                js_map[child.label] = models.js
            iter_flags += [f"{child.label}:{f}" for f in models.flags]
        upper_feasible = (float(relaxed.program.objective_value(ub_point)) + child_total
                          if ub_exact else None)

        if use_second and upper_feasible is not None:
            eps_scale = config.epsilon * (1.0 + abs(upper_feasible))
            if f_center is None:
                f_center = upper_feasible
                center_child_vals = dict(child_vals)
                center_l = l_prev.copy()
                assert ub_point is not None
                center_own = ub_point.copy()
            elif pending is not None:
                # serious/null decision for the previous trial, now that its
                # true total is known: adopt it as the new center if it
                # realized a fair share of the decrease the model predicted,
                # otherwise raise the proximal weight toward the curvature the
                # model was missing at that trial
                predicted, model_val, step_sq = pending
                if abs(upper_feasible - f_center) <= 0.1 * eps_scale:
                    flat_run += 1
                else:
                    flat_run = 0
                if upper_feasible <= f_center - 0.1 * predicted:
                    ratio = ((f_center - upper_feasible) / predicted
                             if predicted > 0 else 1.0)
                    center_l = l_prev.copy()
                    f_center = upper_feasible
                    center_child_vals = dict(child_vals)
                    assert ub_point is not None
                    center_own = ub_point.copy()
                    t_prox *= 0.0625 if ratio >= 0.7 else 0.5
                    if t_prox < 1e-12:
                        t_prox = 0.0
                elif (math.sqrt(step_sq)
                      <= 1e3 * config.solver_tol * (1.0 + float(np.abs(center_l).max(initial=0.0)))):
                    # the trial step is already at the solvers' noise floor:
                    # raising the weight cannot shrink it further, it only
                    # drowns the bookkeeping in conditioning noise
                    iter_flags.append("null-step")
                else:
                    t_est = (2.0 * max(0.0, upper_feasible - model_val) / step_sq
                             if step_sq > 0 else 0.0)
                    t_new = max(2.0 * t_prox, t_est, 1e-8)
                    if t_prox > 0.0:
                        # one bad trial (a step across a crease the model could
                        # not see) must not catapult the weight past the scale
                        # that was just making progress
                        t_new = min(t_new, 10.0 * t_prox)
                    # beyond ~1e8 the folded proximal term loses more digits to
                    # cancellation than the extra damping is worth
                    t_prox = min(t_new, 1e8)
                    iter_flags.append("null-step")
        else:
            flat_run = 0  # no measured total this round, so no flatness evidence
        pending = None

        # a quadratic model is only trusted inside the piece it was built on;
        # extrapolated across a crease it can sit far above the true value and
        # make the master retreat from territory that is actually good.  The
        # two boundary points whose true child values are known this round —
        # the current pin and the stability center — give a cheap pointwise
        # validity check: a model caught overestimating either one is dropped
        # for the round (its affine tangent still anchors the master)
        if use_second:
            for child in node.children:
                js = js_map.get(child.label)
                if js is None:
                    continue
                checks = [(child.mapping @ l_prev, child_vals[child.label])]
                if center_child_vals is not None and child.label in center_child_vals:
                    checks.append((child.mapping @ center_l,
                                   center_child_vals[child.label]))
                for point, known in checks:
                    if js.evaluate(point) > known + 1e-6 * (1.0 + abs(known)):
                        js_map[child.label] = None
                        iter_flags.append(f"{child.label}:model2-overshoot")
                        break

        if config.first_order_only:
            for label, jf in jf_new.items():
                jf_map[label].append(jf)
        master = _build_master(relaxed.program, order, js_map, jf_map, mappings,
                               use_second_order=use_second, prune_tol=prune_tol,
                               jf_fallback=jf_new,
                               prox=(t_prox, center_l) if t_prox > 0.0 else None)
        master_sol = solve(master.program, tol=config.solver_tol,
                           max_iter=config.solver_max_iter)
        iter_flags += _accept(master_sol, node.label, "master")
        l_new = master_sol.primal[master.program.lower_slice].copy()
        prox_part = 0.5 * t_prox * float((l_new - center_l) @ (l_new - center_l))
        if f_center is not None:
            pending = (f_center - master_sol.objective,
                       master_sol.objective - prox_part,
                       float((l_new - center_l) @ (l_new - center_l)))

        lb_obj: float | None = None
        rollback = False
        # the plain cutting-plane master is the certified bound behind the gap
        # test: affine cuts underestimate everywhere, quadratic models only on
        # their own piece, so the stabilized master's objective never certifies
        if use_second:
            jf40 = {label: jf_map[label] + [jf_new[label]] for label in order}
            m40 = _build_master(relaxed.program, order, js_map, jf40, mappings,
                                use_second_order=False, prune_tol=None)
            sol40 = solve(m40.program, tol=config.solver_tol,
                          max_iter=config.solver_max_iter)
            iter_flags += _accept(sol40, node.label, "cutting-plane master")
            lb_obj = sol40.objective
            if config.anti_cycling:
                cur40 = AntiCyclingState(sol40.primal[m40.program.lower_slice].copy(),
                                         sol40.objective)
                if anti_cycling_step(prev40, cur40) is Decision.ROLLBACK:
                    rollback = True
                    iter_flags.append("rollback")
                prev40 = cur40
        if config.first_order_only:
            lb_obj = master_sol.objective

        if not config.first_order_only:
            for label, jf in jf_new.items():
                jf_map[label].append(jf)

        delta = float(np.linalg.norm(l_new - l_prev))
        gap = (upper_feasible - lb_obj
               if upper_feasible is not None and lb_obj is not None else None)
        trace.records.append(IterationRecord(
            k=k, boundary=l_new.copy(), l_norm_change=delta,
            upper_obj=master_sol.objective,
            child_values={label: float(master_sol.primal[master.o_index[label]])
                          for label in order},
            lower_bound_obj=lb_obj, inner_iters=inner, flags=iter_flags, gap=gap,
            t_prox=t_prox))

        if delta <= config.epsilon and t_prox == 0.0:
            l_final = l_new
            own_final = master_sol.primal[master.rel_to_master].copy()
            break
        if (gap is not None and upper_feasible is not None
                and gap <= config.epsilon * (1.0 + abs(upper_feasible))):
            # the feasible total at l_prev already meets the certified bound
            # to within epsilon of the total's own scale: the boundary may
            # still slide along a flat valley of the total cost, but no
            # meaningfully better boundary exists
            l_final = l_prev.copy()
            own_final = ub_point.copy()
            trace.records[-1].flags.append("gap-stop")
            break
        if flat_run >= 5 and f_center is not None:
            # five consecutive measured totals level with the incumbent: the
            # trials are rattling inside the solvers' noise band around a
            # settled point, so take the incumbent as the answer
            l_final = center_l.copy()
            own_final = center_own.copy()
            trace.records[-1].flags.append("stall-stop")
            break
        if rollback and prev40 is not None:
            l_prev = prev40.boundary.copy()
            ub_point = None  # no solved point carries this boundary in its lower block
            pending = None  # the trial this rollback displaced is never evaluated
        else:
            l_prev = l_new
            ub_point = master_sol.primal[master.rel_to_master].copy()
    else:
        raise MaxOuterIterations(node.label, config.max_outer, trace, pin=pin.copy())

    # exact evaluation at the settled boundary, using whichever solved point
    # actually carries that boundary in its lower block
    assert master is not None and master_sol is not None
    assert l_final is not None and own_final is not None
    if warm is not None:
        warm[node.label] = l_final.copy()
    value = float(relaxed.program.objective_value(own_final))
    boundary: dict[str, np.ndarray] = {}
    per_node: dict[str, dict] = {}
    max_slack = relaxed.max_slack(own_final)
    for child in node.children:
        child_pin = child.mapping @ l_final
        rep = compute_optimum(child, child_pin, config, warm=warm)
        value += rep.value
        boundary[child.label] = child_pin
        boundary.update(rep.boundary)
        per_node.update(rep.per_node)
        max_slack = max(max_slack, rep.max_slack)
        flags += [f"{child.label}:{f}" for f in rep.flags]
    if max_slack > 1e-7:
        flags.append(f"penalty-slack:{max_slack:.2e}")
        trace.records[-1].flags.append(f"penalty-slack:{max_slack:.2e}")

    orig_point = relaxed.original_point(own_final)
    per_node[node.label] = {
        "level": node.level, "index": node.index,
        "objective": float(node.problem.objective_value(orig_point)),
        "status": master_sol.status.value, "outer_iterations": len(trace.records),
        "point": orig_point.copy(),
    }
    total_inner = sum(r.inner_iters for r in trace.records)
    return NodeReport(
        value=value,
        formulation=ConvergedFormulation(master.program, master_sol),
        outer=len(trace.records), bottom_solves=total_inner,
        boundary=boundary, per_node=per_node, trace=trace,
        max_slack=max_slack, flags=flags)


@dataclass
class CoordinationResult:
    objective: float | None
    converged: bool
    boundary_values: dict[str, np.ndarray]
    per_node: dict[str, dict]
    trace: IterationTrace
    outer_iterations: int
    inner_iterations: int
    max_slack: float = 0.0
    flags: list[str] = field(default_factory=list)


def solve_nested(root: HierarchyNode, config: CoordinationConfig | None = None) -> CoordinationResult:
    """Coordinate the whole tree from the root; non-convergence is reported in
    the result rather than raised, so callers can still inspect the trace."""
    config = config or CoordinationConfig()
    root.validate()
    try:
        report = compute_optimum(root, np.zeros(0), config, warm={})
    except MaxOuterIterations as stop:
        return CoordinationResult(
            objective=None, converged=False, boundary_values={}, per_node={},
            trace=stop.trace, outer_iterations=len(stop.trace.records),
            inner_iterations=sum(r.inner_iters for r in stop.trace.records),
            flags=[f"max-outer:{stop.label}"])
    trace = report.trace or IterationTrace(root.label)
    return CoordinationResult(
        objective=report.value, converged=True, boundary_values=report.boundary,
        per_node=report.per_node, trace=trace, outer_iterations=report.outer,
        inner_iterations=report.bottom_solves, max_slack=report.max_slack,
        flags=report.flags)


def solve_bilevel(root: HierarchyNode, config: CoordinationConfig | None = None) -> CoordinationResult:
    """Two-level front end: root plus one layer of leaf children."""
    if root.depth() != 2:
        raise ProgramError("solve_bilevel expects exactly two levels")
    return solve_nested(root, config)
