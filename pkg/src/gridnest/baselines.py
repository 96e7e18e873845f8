"""Reference methods the coordination engine is measured against.

``solve_centralized`` flattens the whole tree into one program and solves it
directly — the exactness yardstick.  ``solve_benders`` reuses the coordination
engine restricted to affine value-function models (classic cutting planes).
``solve_admm`` runs consensus ADMM on every parent/child boundary, recursing
so that a child which is itself a parent resolves its own subtree to
convergence inside each local update.  ``isolated_cost`` prices the
no-coordination alternative: every boundary frozen at a pre-agreed zero
exchange.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coordinator import (
    CoordinationConfig,
    CoordinationError,
    CoordinationResult,
    HierarchyNode,
    _accept,
    solve_nested,
)
from .program import ConvexProgram, ProgramError, QuadraticConstraint, Solution, SolveStatus
from .solver import solve

__all__ = [
    "AdmmConfig",
    "AdmmResult",
    "FlatProgram",
    "flatten",
    "isolated_cost",
    "solve_admm",
    "solve_benders",
    "solve_centralized",
]


# ---------------------------------------------------------------------------
# centralized: flatten and solve
# ---------------------------------------------------------------------------


@dataclass
class FlatProgram:
    """One program holding every node's variables, couplings as equalities."""

    program: ConvexProgram
    slices: dict[str, slice]  # node label -> its variable block
    nodes: dict[str, HierarchyNode]


def _collect(node: HierarchyNode) -> list[HierarchyNode]:
    out = [node]
    for child in node.children:
        out += _collect(child)
    return out


def flatten(root: HierarchyNode) -> FlatProgram:
    nodes = _collect(root)
    offsets: dict[str, int] = {}
    total = 0
    for nd in nodes:
        offsets[nd.label] = total
        total += nd.problem.n

    c0 = 0.0
    c1 = np.zeros(total)
    C2 = np.zeros((total, total))
    cons: list[QuadraticConstraint] = []
    pairs: list[tuple[int, int]] = []

    for nd in nodes:
        off = offsets[nd.label]
        pr = nd.problem
        idx = np.arange(off, off + pr.n)
        c0 += pr.c0
        c1[idx] += pr.c1
        C2[np.ix_(idx, idx)] += pr.C2
        base = len(cons)
        for con in pr.constraints:
            q = np.zeros(total)
            q[idx] = con.q
            Q = None
            if con.Q is not None:
                Q = np.zeros((total, total))
                Q[np.ix_(idx, idx)] = con.Q
            cons.append(QuadraticConstraint(q=q, r=con.r, Q=Q, kind=con.kind,
                                            name=f"{nd.label}:{con.name}"))
        pairs += [(base + i, base + j) for i, j in pr.equality_pairs]

    # couplings: child upper block == mapping @ parent lower block
    for nd in nodes:
        off_p = offsets[nd.label]
        l_idx = off_p + np.arange(nd.problem.lower_slice.start, nd.problem.lower_slice.stop)
        for child in nd.children:
            off_c = offsets[child.label]
            u_idx = off_c + np.arange(child.problem.upper_slice.start,
                                      child.problem.upper_slice.stop)
            for row in range(u_idx.size):
                q = np.zeros(total)
                q[u_idx[row]] = 1.0
                q[l_idx] -= child.mapping[row]
                cons.append(QuadraticConstraint(
                    q=q, r=0.0, name=f"couple:{child.label}[{row}]+"))
                cons.append(QuadraticConstraint(
                    q=-q, r=-0.0, name=f"couple:{child.label}[{row}]-"))
                pairs.append((len(cons) - 2, len(cons) - 1))

    program = ConvexProgram(
        n_internal=total, n_upper=0, n_lower=0,
        c0=c0, c1=c1, C2=C2, constraints=cons, equality_pairs=pairs)
    slices = {nd.label: slice(offsets[nd.label], offsets[nd.label] + nd.problem.n)
              for nd in nodes}
    return FlatProgram(program, slices, {nd.label: nd for nd in nodes})


@dataclass
class CentralizedResult:
    objective: float
    status: SolveStatus
    solution: Solution
    per_node: dict[str, dict]
    boundary_values: dict[str, np.ndarray]


def solve_centralized(root: HierarchyNode, *, tol: float = 1e-8,
                      max_iter: int = 200) -> CentralizedResult:
    root.validate()
    flat = flatten(root)
    sol = solve(flat.program, tol=tol, max_iter=max_iter)
    per_node: dict[str, dict] = {}
    boundary: dict[str, np.ndarray] = {}
    for label, sl in flat.slices.items():
        nd = flat.nodes[label]
        point = sol.primal[sl]
        per_node[label] = {
            "level": nd.level, "index": nd.index,
            "objective": float(nd.problem.objective_value(point)),
            "status": sol.status.value,
            "point": point.copy(),
        }
        if nd.problem.n_upper:
            boundary[label] = point[nd.problem.upper_slice].copy()
    return CentralizedResult(
        objective=sol.objective, status=sol.status, solution=sol,
        per_node=per_node, boundary_values=boundary)


# ---------------------------------------------------------------------------
# generalized Benders: the coordination engine on affine models only
# ---------------------------------------------------------------------------


def solve_benders(root: HierarchyNode, config: CoordinationConfig | None = None,
                  ) -> CoordinationResult:
    """Cutting-plane coordination: every child is represented by accumulated
    affine under-estimators; the master objective is the reported bound."""
    base = config or CoordinationConfig()
    cfg = CoordinationConfig(
        epsilon=base.epsilon, max_outer=base.max_outer, c_ply=base.c_ply,
        anti_cycling=False, act_tol=base.act_tol, solver_tol=base.solver_tol,
        solver_max_iter=base.solver_max_iter, first_order_only=True,
        prune_cuts=False)
    return solve_nested(root, cfg)


# ---------------------------------------------------------------------------
# consensus ADMM over every parent/child boundary
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdmmConfig:
    rho: float = 3.0
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    max_iter: int = 500
    solver_tol: float = 1e-8
    solver_max_iter: int = 200


@dataclass
class AdmmResult:
    objective: float | None
    converged: bool
    iterations: int  # coordination rounds at the root boundary
    total_iterations: int  # rounds summed over every parent/child pair
    total_solves: int  # individual convex solves performed
    boundary_values: dict[str, np.ndarray]
    per_node: dict[str, dict]
    primal_residual: float
    dual_residual: float
    flags: list[str] = field(default_factory=list)


@dataclass
class _SubtreeOutcome:
    value: float
    upper_point: np.ndarray  # the node's upper-boundary coordinates
    boundary: dict[str, np.ndarray]
    per_node: dict[str, dict]
    rounds: int
    solves: int
    converged: bool
    primal_residual: float
    dual_residual: float


def _augmented(problem: ConvexProgram, target: np.ndarray, rho: float) -> ConvexProgram:
    """Free the upper block and add (rho/2)||u - target||^2 to the objective."""
    nu = problem.n_upper
    if nu == 0:
        return problem
    u = np.arange(problem.upper_slice.start, problem.upper_slice.stop)
    c1 = problem.c1.copy()
    c1[u] -= rho * target
    C2 = problem.C2.copy()
    C2[u, u] += rho
    return ConvexProgram(
        n_internal=problem.n_internal + nu, n_upper=0, n_lower=problem.n_lower,
        c0=problem.c0 + 0.5 * rho * float(target @ target),
        c1=c1, C2=C2, constraints=list(problem.constraints),
        equality_pairs=list(problem.equality_pairs))


def _solve_subtree(node: HierarchyNode, target: np.ndarray | None,
                   rho: float, config: AdmmConfig) -> _SubtreeOutcome:
    """Minimize the node's subtree cost, plus the proximal boundary term when
    ``target`` is given.  Childless nodes are one solve; otherwise consensus
    rounds alternate local updates against the node's own boundary."""
    # the augmented program keeps the [internal | upper | lower] positions of
    # the original, so original-problem slices stay valid on its solutions
    own = node.problem if target is None else _augmented(node.problem, target, rho)
    if not node.children:
        sol = solve(own, tol=config.solver_tol, max_iter=config.solver_max_iter)
        _accept(sol, node.label, "local update")
        value = float(node.problem.objective_value(sol.primal))
        u_point = sol.primal[node.problem.upper_slice].copy()
        per = {node.label: {"level": node.level, "index": node.index,
                            "objective": value, "status": sol.status.value,
                            "point": sol.primal.copy()}}
        return _SubtreeOutcome(value, u_point, {}, per, 0, 1, True, 0.0, 0.0)

    nl = node.problem.n_lower
    l_sl = slice(own.n - nl, own.n)
    duals = {child.label: np.zeros(child.problem.n_upper) for child in node.children}
    copies = {child.label: np.zeros(child.problem.n_upper) for child in node.children}
    l_val = np.zeros(nl)
    solves = 0
    rounds = 0
    child_out: dict[str, _SubtreeOutcome] = {}
    r_norm = d_norm = np.inf
    converged = False
    own_sol: Solution | None = None
    for rounds in range(1, config.max_iter + 1):
        # local updates: each child tracks its pinned image of l
        for child in node.children:
            t = child.mapping @ l_val - duals[child.label] / rho
            out = _solve_subtree(child, t, rho, config)
            child_out[child.label] = out
            copies[child.label] = out.upper_point
            solves += out.solves
        # boundary update: the node's own problem plus every proximal term
        prox = own
        for child in node.children:
            t = copies[child.label] + duals[child.label] / rho
            sel = child.mapping
            c1 = prox.c1.copy()
            C2 = prox.C2.copy()
            l_idx = np.arange(l_sl.start, l_sl.stop)
            c1[l_idx] -= rho * (sel.T @ t)
            C2[np.ix_(l_idx, l_idx)] += rho * (sel.T @ sel)
            prox = ConvexProgram(
                n_internal=prox.n_internal, n_upper=prox.n_upper,
                n_lower=prox.n_lower,
                c0=prox.c0 + 0.5 * rho * float(t @ t),
                c1=c1, C2=C2, constraints=list(prox.constraints),
                equality_pairs=list(prox.equality_pairs),
                fixed_upper=None if prox.fixed_upper is None else prox.fixed_upper.copy())
        own_sol = solve(prox, tol=config.solver_tol, max_iter=config.solver_max_iter)
        solves += 1
        _accept(own_sol, node.label, "boundary update")
        l_prev = l_val
        l_val = own_sol.primal[l_sl].copy()
        # scaled dual ascent and standard residual pair
        r_parts = []
        for child in node.children:
            gap = copies[child.label] - child.mapping @ l_val
            duals[child.label] += rho * gap
            r_parts.append(gap)
        r_vec = np.concatenate(r_parts) if r_parts else np.zeros(0)
        d_vec = rho * np.concatenate(
            [child.mapping @ (l_val - l_prev) for child in node.children])
        r_norm = float(np.linalg.norm(r_vec))
        d_norm = float(np.linalg.norm(d_vec))
        scale_p = max(
            float(np.linalg.norm(np.concatenate(
                [copies[c.label] for c in node.children]))),
            float(np.linalg.norm(np.concatenate(
                [c.mapping @ l_val for c in node.children]))))
        scale_d = float(np.linalg.norm(np.concatenate(
            [duals[c.label] for c in node.children])))
        eps_pri = np.sqrt(max(r_vec.size, 1)) * config.eps_abs + config.eps_rel * scale_p
        eps_dual = np.sqrt(max(r_vec.size, 1)) * config.eps_abs + config.eps_rel * scale_d
        if r_norm <= eps_pri and d_norm <= eps_dual:
            converged = True
            break

    assert own_sol is not None
    value = float(node.problem.objective_value(own_sol.primal))
    boundary: dict[str, np.ndarray] = {}
    per_node: dict[str, dict] = {}
    total_rounds = rounds
    total_value = value
    u_point = own_sol.primal[node.problem.upper_slice].copy()
    for child in node.children:
        out = child_out[child.label]
        total_value += out.value
        total_rounds += out.rounds
        boundary[child.label] = child.mapping @ l_val
        boundary.update(out.boundary)
        per_node.update(out.per_node)
        converged = converged and out.converged
    per_node[node.label] = {"level": node.level, "index": node.index,
                            "objective": value, "status": "optimal",
                            "consensus_rounds": rounds,
                            "point": own_sol.primal.copy()}
    return _SubtreeOutcome(total_value, u_point, boundary, per_node,
                           total_rounds, solves, converged, r_norm, d_norm)


def solve_admm(root: HierarchyNode, config: AdmmConfig | None = None) -> AdmmResult:
    """Consensus ADMM on the hierarchy: every parent keeps the boundary
    variable, every child keeps a local copy, and scaled duals reconcile them.
    A child with children of its own re-runs its inner consensus to
    convergence inside each of its local updates."""
    config = config or AdmmConfig()
    root.validate()
    if config.rho <= 0:
        raise ProgramError("rho must be positive")
    try:
        out = _solve_subtree(root, None, config.rho, config)
    except (ProgramError, CoordinationError) as err:
        return AdmmResult(objective=None, converged=False, iterations=0,
                          total_iterations=0, total_solves=0,
                          boundary_values={}, per_node={},
                          primal_residual=np.inf, dual_residual=np.inf,
                          flags=[str(err)])
    root_rounds = out.per_node[root.label].get("consensus_rounds", 0)
    return AdmmResult(
        objective=out.value, converged=out.converged,
        iterations=root_rounds, total_iterations=out.rounds,
        total_solves=out.solves, boundary_values=out.boundary,
        per_node=out.per_node, primal_residual=out.primal_residual,
        dual_residual=out.dual_residual)


# ---------------------------------------------------------------------------
# isolated operation: boundaries frozen at zero exchange
# ---------------------------------------------------------------------------


def isolated_cost(root: HierarchyNode, *, tol: float = 1e-8,
                  max_iter: int = 200) -> tuple[float, dict[str, float]]:
    """Total cost with every boundary pinned at the pre-agreed zero exchange:
    each node optimizes alone with its upper block fixed and its lower block
    forced to zero.  A node that cannot operate without exchange (for example
    a network island whose only voltage anchor is the severed boundary) is
    reported as infinite rather than raising."""
    per: dict[str, float] = {}
    total = 0.0
    for nd in _collect(root):
        pr = nd.problem
        cons = list(pr.constraints)
        pairs = list(pr.equality_pairs)
        for j in range(pr.n_lower):
            q = np.zeros(pr.n)
            q[pr.lower_slice.start + j] = 1.0
            cons.append(QuadraticConstraint(q=q, r=0.0, name=f"freeze-l[{j}]+"))
            cons.append(QuadraticConstraint(q=-q, r=0.0, name=f"freeze-l[{j}]-"))
            pairs.append((len(cons) - 2, len(cons) - 1))
        frozen = ConvexProgram(
            n_internal=pr.n_internal, n_upper=pr.n_upper, n_lower=pr.n_lower,
            c0=pr.c0, c1=pr.c1.copy(), C2=pr.C2.copy(), constraints=cons,
            equality_pairs=pairs,
            fixed_upper=np.zeros(pr.n_upper) if pr.n_upper else None)
        sol = solve(frozen, tol=tol, max_iter=max_iter)
        if sol.status is SolveStatus.INFEASIBLE:
            per[nd.label] = float("inf")
            total = float("inf")
            continue
        _accept(sol, nd.label, "isolated")  # vertex pins may stop on iterations with a tight primal
        per[nd.label] = sol.objective
        total += sol.objective
    return total, per
