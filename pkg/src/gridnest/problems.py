"""Built-in test problems: a small trilevel cone program and randomized
convex programs for exercising the projection calculus."""
from __future__ import annotations

import numpy as np

from .coordinator import HierarchyNode
from .program import ConvexProgram, ProgramBuilder

__all__ = [
    "case1_bilevel_tree",
    "case1_tree",
    "decoupled_tree",
    "random_qp",
    "random_socp",
]


def _case1_root() -> ConvexProgram:
    b = ProgramBuilder()
    b.add_lower("x")
    b.add_quadratic_cost(b.idx("x"), 1.0)
    b.add_linear_cost(b.idx("x"), -2.0)
    b.add_constant_cost(1.0)
    b.add_ge({"x": 1.0}, 0.0, name="x>=0")
    return b.build()


def _case1_middle() -> ConvexProgram:
    b = ProgramBuilder()
    b.add_internal("y1")
    b.add_upper("u")
    b.add_lower("y2")
    b.add_quadratic_cost(b.idx("y1"), 1.0)
    b.add_linear_cost(b.idx("y1"), -4.0)
    b.add_constant_cost(4.0)
    b.add_cone_le(np.concatenate([b.idx("y1"), b.idx("y2")]), b.idx("u"), name="ball")
    b.add_ge({"y2": 1.0}, 0.0, name="y2>=0")
    return b.build()


def _case1_leaf() -> ConvexProgram:
    b = ProgramBuilder()
    b.add_internal("z")
    b.add_upper("u")
    b.add_quadratic_cost(b.idx("z"), 1.0)
    b.add_linear_cost(b.idx("z"), -4.0)
    b.add_constant_cost(4.0)
    b.add_cone_le(b.idx("z"), b.idx("u"), name="cone")
    return b.build()


def case1_tree() -> HierarchyNode:
    """Three chained levels: a scalar budget x feeds a ball constraint on
    (y1, y2), and y2 in turn caps the leaf variable z."""
    leaf = HierarchyNode(3, 1, _case1_leaf(), mapping=np.eye(1), name="level3")
    middle = HierarchyNode(2, 1, _case1_middle(), mapping=np.eye(1),
                           children=[leaf], name="level2")
    return HierarchyNode(1, 1, _case1_root(), children=[middle], name="level1")


def case1_bilevel_tree() -> HierarchyNode:
    """Same feasible set split two ways: the scalar x on top, everything else
    collapsed into a single lower problem."""
    b = ProgramBuilder()
    b.add_internal("y1")
    b.add_internal("y2")
    b.add_internal("z")
    b.add_upper("u")
    b.add_quadratic_cost(b.idx("y1"), 1.0)
    b.add_linear_cost(b.idx("y1"), -4.0)
    b.add_quadratic_cost(b.idx("z"), 1.0)
    b.add_linear_cost(b.idx("z"), -4.0)
    b.add_constant_cost(8.0)
    b.add_cone_le(np.concatenate([b.idx("y1"), b.idx("y2")]), b.idx("u"), name="ball")
    b.add_cone_le(b.idx("z"), b.idx("y2"), name="cone")
    b.add_ge({"y2": 1.0}, 0.0, name="y2>=0")
    lower = HierarchyNode(2, 1, b.build(), mapping=np.eye(1), name="lower")
    return HierarchyNode(1, 1, _case1_root(), children=[lower], name="upper")


def decoupled_tree() -> HierarchyNode:
    """Parent and child share no boundary; optima are independent."""
    b = ProgramBuilder()
    b.add_internal("x")
    b.add_quadratic_cost(b.idx("x"), 1.0)
    b.add_linear_cost(b.idx("x"), -2.0)
    b.add_constant_cost(1.0)
    root_prog = b.build()
    b = ProgramBuilder()
    b.add_internal("y")
    b.add_quadratic_cost(b.idx("y"), 1.0)
    b.add_linear_cost(b.idx("y"), 4.0)
    b.add_constant_cost(4.0)
    child_prog = b.build()
    child = HierarchyNode(2, 1, child_prog, mapping=np.zeros((0, 0)), name="island")
    return HierarchyNode(1, 1, root_prog, children=[child], name="mainland")


def random_qp(seed: int, n: int = 6, n_par: int = 3, n_ineq: int = 8) -> ConvexProgram:
    """Strongly convex QP in x with the parameter block entering linear rows
    and a cross objective term; feasible with margin at the zero pin."""
    rng = np.random.default_rng(seed)
    ntot = n + n_par
    M = rng.normal(size=(n, n))
    P = M @ M.T + n * np.eye(n)
    q = rng.normal(size=n)
    Cx = 0.4 * rng.normal(size=(n, n_par))

    C2 = np.zeros((ntot, ntot))
    C2[:n, :n] = P
    C2[:n, n:] = Cx
    C2[n:, :n] = Cx.T
    C2[n:, n:] = (n_par + 1.0) * np.eye(n_par)  # keeps the joint objective convex
    c1 = np.concatenate([q, np.zeros(n_par)])

    b = ProgramBuilder()
    b.add_internal("x", n)
    b.add_upper("p", n_par)
    prog_idx = np.arange(ntot)
    A = rng.normal(size=(n_ineq, n))
    B = 0.5 * rng.normal(size=(n_ineq, n_par))
    x0 = rng.normal(size=n)
    margin = 0.5 + rng.random(n_ineq)
    rhs = A @ x0 + margin
    for i in range(n_ineq):
        terms = {int(prog_idx[j]): A[i, j] for j in range(n)}
        terms.update({int(prog_idx[n + j]): B[i, j] for j in range(n_par)})
        b.add_le(terms, float(rhs[i]), name=f"row{i}")
    b.add_box("x", -10.0, 10.0)
    prog = b.build(validate=False)
    prog.c1 = c1
    prog.C2 = C2
    prog.validate()
    return prog


def random_socp(seed: int, n: int = 6, n_par: int = 3, n_ineq: int = 6) -> ConvexProgram:
    """The QP family plus a squared-cone row on the first three x coordinates,
    with the cone bound kept strictly positive so the row stays regular."""
    prog = random_qp(seed, n=n, n_par=n_par, n_ineq=n_ineq)
    ntot = prog.n
    b = ProgramBuilder()
    b.add_internal("x", n)
    b.add_upper("p", n_par)
    b.add_cone_le(np.arange(2), np.array([2]), name="cone")
    b.add_ge({2: 1.0}, 0.3, name="cone-bound")
    extra = b.build(validate=False)
    merged = ConvexProgram(
        n_internal=n, n_upper=n_par, n_lower=0,
        c0=prog.c0, c1=prog.c1, C2=prog.C2,
        constraints=list(prog.constraints) + list(extra.constraints),
        equality_pairs=list(prog.equality_pairs),
    )
    merged.validate()
    return merged
