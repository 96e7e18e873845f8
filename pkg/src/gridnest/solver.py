"""Primal-dual interior-point solver for block-structured convex programs.

Pipeline: pin elimination (``fixed_upper`` becomes constants), collapse of
registered inequality pairs into equality rows with a free multiplier, then an
infeasible-start Mehrotra predictor-corrector iteration on the reduced problem.
Duals are mapped back onto the original constraint list, splitting each
equality multiplier across its two pair members so downstream sensitivity code
sees one consistent sign convention (every constraint is ``g <= 0``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .program import (
    ConstraintKind,
    ConvexProgram,
    KktResiduals,
    ProgramError,
    Solution,
    SolveStatus,
    kkt_residual,
)

_HUGE_PRIMAL = 1e12
_HUGE_OBJECTIVE = -1e14
_STATIC_REG = 1e-10
_FRACTION_TO_BOUNDARY = 0.995


# ---------------------------------------------------------------------------
# reduced problem representation
# ---------------------------------------------------------------------------


@dataclass
class _Rows:
    """Stacked inequality rows g(w) = G w + r + 0.5 w'Q_i w (Q on few rows)."""

    G: np.ndarray  # (m, n) linear parts
    r: np.ndarray  # (m,)
    quads: list[tuple[int, np.ndarray]]  # (row index, Hessian)

    @property
    def m(self) -> int:
        return self.r.size

    def values(self, w: np.ndarray) -> np.ndarray:
        g = self.G @ w + self.r
        for i, Q in self.quads:
            g[i] += 0.5 * float(w @ (Q @ w))
        return g

    def jacobian(self, w: np.ndarray) -> np.ndarray:
        J = self.G.copy()
        for i, Q in self.quads:
            J[i] += Q @ w
        return J

    def weighted_hessian(self, lam: np.ndarray, convex: bool = False) -> np.ndarray:
        """Sum of lam_i * Q_i; with ``convex`` each Q_i is clipped to its
        positive-semidefinite part, giving a descent-safe model whenever the
        exact Lagrangian Hessian has negative curvature."""
        n = self.G.shape[1]
        H = np.zeros((n, n))
        source = self._psd_quads() if convex else self.quads
        for i, Q in source:
            if lam[i] != 0.0:
                H += lam[i] * Q
        return H

    def _psd_quads(self) -> list[tuple[int, np.ndarray]]:
        cached = getattr(self, "_psd_cache", None)
        if cached is None:
            cached = []
            for i, Q in self.quads:
                vals, vecs = np.linalg.eigh(Q)
                if float(vals.min(initial=0.0)) >= 0.0:
                    cached.append((i, Q))
                else:
                    cached.append((i, (vecs * np.maximum(vals, 0.0)) @ vecs.T))
            self._psd_cache = cached
        return cached

    def curvature(self, dw: np.ndarray) -> np.ndarray:
        """Second-order terms 0.5 dw'Q_i dw per row (zero on linear rows)."""
        c = np.zeros(self.m)
        for i, Q in self.quads:
            c[i] = 0.5 * float(dw @ (Q @ dw))
        return c


@dataclass
class _Reduced:
    """Pin-eliminated, pair-collapsed problem handed to the iteration."""

    c0: float
    c1: np.ndarray
    C2: np.ndarray
    ineq: _Rows
    A: np.ndarray  # equality rows A w + b = 0
    b: np.ndarray
    ineq_orig: list[int]  # reduced ineq row -> original constraint index
    pair_orig: list[tuple[int, int]]  # equality row -> original (i, j) pair
    free_idx: np.ndarray
    base_point: np.ndarray  # full-size vector carrying the pins

    def expand(self, w: np.ndarray) -> np.ndarray:
        v = self.base_point.copy()
        v[self.free_idx] = w
        return v


def _reduce(program: ConvexProgram) -> _Reduced:
    n = program.n
    if program.fixed_upper is None:
        free_idx = np.arange(n)
        p0 = np.zeros(n)
    else:
        mask = np.ones(n, dtype=bool)
        mask[program.upper_slice] = False
        free_idx = np.flatnonzero(mask)
        p0 = np.zeros(n)
        p0[program.upper_slice] = program.fixed_upper

    c1_full = program.c1 + program.C2 @ p0
    c0 = program.c0 + float(program.c1 @ p0) + 0.5 * float(p0 @ (program.C2 @ p0))
    c1 = c1_full[free_idx]
    C2 = program.C2[np.ix_(free_idx, free_idx)]

    paired = program.paired_indices()
    pin_tol = 1e-7 * (1.0 + float(np.abs(p0).max(initial=0.0)))

    # reduce every row; drop rows that became constant (pure functions of pins)
    red: dict[int, tuple[np.ndarray, float, np.ndarray | None]] = {}
    for k, con in enumerate(program.constraints):
        q_full = con.q if con.Q is None else con.q + con.Q @ p0
        q = q_full[free_idx]
        r = con.r + float(con.q @ p0)
        Q = None
        if con.Q is not None:
            r += 0.5 * float(p0 @ (con.Q @ p0))
            Qr = con.Q[np.ix_(free_idx, free_idx)]
            if np.any(Qr):
                Q = Qr
        if Q is None and not np.any(q):
            if r > pin_tol:
                raise _PinInfeasible(k, r)
            continue
        red[k] = (q, r, Q)

    eq_rows: list[np.ndarray] = []
    eq_rhs: list[float] = []
    pair_orig: list[tuple[int, int]] = []
    for i, j in program.equality_pairs:
        if i not in red:
            continue
        q, r, _ = red[i]
        eq_rows.append(q)
        eq_rhs.append(r)
        pair_orig.append((i, j))

    nf = free_idx.size
    ineq_orig = [k for k in red if k not in paired]
    G = np.zeros((len(ineq_orig), nf))
    rvec = np.zeros(len(ineq_orig))
    quads: list[tuple[int, np.ndarray]] = []
    for row, k in enumerate(ineq_orig):
        q, r, Q = red[k]
        G[row] = q
        rvec[row] = r
        if Q is not None:
            quads.append((row, Q))

    A = np.array(eq_rows).reshape(len(eq_rows), nf)
    b = np.array(eq_rhs)
    return _Reduced(c0, c1, C2, _Rows(G, rvec, quads), A, b, ineq_orig, pair_orig,
                    free_idx, p0)


class _PinInfeasible(Exception):
    def __init__(self, row: int, violation: float) -> None:
        super().__init__(f"constraint {row} violated by {violation:.3e} at the pinned point")
        self.row = row
        self.violation = violation


# ---------------------------------------------------------------------------
# symmetric indefinite factorization with inertia control
# ---------------------------------------------------------------------------


class _KktFactor:
    """LDL' factorization of [[M, A'], [A, -delta_d I]] with inertia checks.

    A factorization is accepted when it shows exactly ``n_eq`` negative
    eigenvalues and none at zero, which certifies a descent-producing system.
    When the exact matrix fails the test, ``alt`` (a convexified model) is
    tried next, and only then progressively larger diagonal shifts.
    """

    def __init__(self, M: np.ndarray, A: np.ndarray,
                 alt: np.ndarray | None = None) -> None:
        n, p = M.shape[0], A.shape[0]
        self.n, self.p = n, p
        if self._try(M, A, 0.0):
            return
        if alt is not None and self._try(alt, A, 0.0):
            return
        base = M if alt is None else alt
        shift = 1e-8
        for _ in range(16):
            if self._try(base, A, shift):
                return
            shift *= 100.0
        raise np.linalg.LinAlgError("could not correct KKT inertia")

    def _try(self, M: np.ndarray, A: np.ndarray, shift: float) -> bool:
        n, p = self.n, self.p
        K = np.zeros((n + p, n + p))
        K[:n, :n] = M
        if p:
            K[n:, :n] = A
            K[:n, n:] = A.T
        idx = np.arange(n + p)
        K[idx[:n], idx[:n]] += _STATIC_REG + shift
        K[idx[n:], idx[n:]] -= _STATIC_REG
        lu, d, perm = scipy.linalg.ldl(K)
        neg, zero = _inertia(d)
        if zero == 0 and neg == p:
            self._L = lu[perm]
            self._d = d
            self._perm = perm
            return True
        return False

    def solve(self, rhs1: np.ndarray, rhs2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        rhs = np.concatenate([rhs1, rhs2])
        c = rhs[self._perm]
        y = scipy.linalg.solve_triangular(self._L, c, lower=True, unit_diagonal=True)
        z = _block_diag_solve(self._d, y)
        u = scipy.linalg.solve_triangular(self._L.T, z, lower=False, unit_diagonal=True)
        x = np.empty_like(u)
        x[self._perm] = u
        return x[: self.n], x[self.n:]


def _inertia(d: np.ndarray) -> tuple[int, int]:
    """(negative, zero) eigenvalue counts of an LDL' block-diagonal factor.

    Pivots are classified by sign alone: the static regularization keeps every
    legitimate pivot away from zero, and barrier matrices mix pivot magnitudes
    across many orders, so any relative threshold misreads one end or the
    other.  Residual-scale singularity is handled by the direction cap
    downstream instead.
    """
    n = d.shape[0]
    neg = zero = 0
    i = 0
    tiny = 1e-30
    while i < n:
        if i + 1 < n and d[i + 1, i] != 0.0:
            a, bb, c = d[i, i], d[i + 1, i], d[i + 1, i + 1]
            tr, det = a + c, a * c - bb * bb
            disc = max(tr * tr / 4.0 - det, 0.0) ** 0.5
            for ev in (tr / 2.0 + disc, tr / 2.0 - disc):
                if ev < -tiny:
                    neg += 1
                elif ev <= tiny:
                    zero += 1
            i += 2
        else:
            ev = d[i, i]
            if ev < -tiny:
                neg += 1
            elif ev <= tiny:
                zero += 1
            i += 1
    return neg, zero


def _block_diag_solve(d: np.ndarray, y: np.ndarray) -> np.ndarray:
    n = d.shape[0]
    z = np.empty_like(y)
    i = 0
    while i < n:
        if i + 1 < n and d[i + 1, i] != 0.0:
            a, bb, c = d[i, i], d[i + 1, i], d[i + 1, i + 1]
            det = a * c - bb * bb
            z[i] = (c * y[i] - bb * y[i + 1]) / det
            z[i + 1] = (-bb * y[i] + a * y[i + 1]) / det
            i += 2
        else:
            z[i] = y[i] / d[i, i]
            i += 1
    return z


# ---------------------------------------------------------------------------
# Mehrotra predictor-corrector iteration
# ---------------------------------------------------------------------------


def _max_step(x: np.ndarray, dx: np.ndarray, tau: float) -> float:
    neg = dx < 0
    if not np.any(neg):
        return 1.0
    return min(1.0, tau * float(np.min(-x[neg] / dx[neg])))


@dataclass
class _IpmResult:
    w: np.ndarray
    lam: np.ndarray
    nu: np.ndarray
    status: SolveStatus
    iterations: int


def _initial_point(red: _Reduced, warm: np.ndarray | None) -> np.ndarray:
    n = red.c1.size
    if warm is not None:
        return np.asarray(warm, dtype=float).copy()
    if red.A.shape[0]:
        w, *_ = np.linalg.lstsq(red.A, -red.b, rcond=None)
        return w
    return np.zeros(n)


def _ipm(red: _Reduced, w0: np.ndarray, tol: float, max_iter: int) -> _IpmResult:
    ineq, A, b = red.ineq, red.A, red.b
    n, m, p = red.c1.size, ineq.m, red.A.shape[0]
    w = w0.copy()
    g = ineq.values(w)
    s = np.maximum(1.0, -g) if m else np.zeros(0)
    lam = np.ones(m)
    nu = np.zeros(p)

    status = SolveStatus.MAX_ITERATIONS
    it = 0
    for it in range(1, max_iter + 1):
        g = ineq.values(w)
        J = ineq.jacobian(w)
        grad_f = red.C2 @ w + red.c1
        jtlam = J.T @ lam if m else np.zeros(n)
        atnu = A.T @ nu if p else np.zeros(n)
        r_d = grad_f + jtlam + atnu
        r_e = A @ w + b if p else np.zeros(0)
        fval = red.c0 + float(red.c1 @ w) + 0.5 * float(w @ (red.C2 @ w))

        stat_scale = 1.0 + _inf(grad_f) + _inf(jtlam) + _inf(atnu)
        comp = _inf(lam * g) if m else 0.0
        feas = max(float(np.max(g, initial=0.0)), _inf(r_e))
        if (_inf(r_d) <= tol * stat_scale
                and comp <= tol * (1.0 + abs(fval))
                and feas <= tol * (1.0 + _inf(w))):
            status = SolveStatus.OPTIMAL
            break
        if fval < _HUGE_OBJECTIVE or (_inf(w) > _HUGE_PRIMAL and fval < 0.0):
            status = SolveStatus.UNBOUNDED
            break
        if _inf(w) > _HUGE_PRIMAL:
            break  # iterates diverged without objective collapse
        if not (np.isfinite(fval) and np.all(np.isfinite(w)) and np.all(np.isfinite(lam))):
            break
        if m and (_inf(lam) > 1e14 or float(np.min(s)) < 1e-250):
            break  # diverging multipliers; leave the verdict to certification

        H = red.C2 + ineq.weighted_hessian(lam) if ineq.quads else red.C2
        JTS = (J.T * (lam / s)) @ J if m else 0.0
        M = H + JTS
        alt = None
        if ineq.quads:
            Hc = red.C2 + ineq.weighted_hessian(lam, convex=True)
            if not np.array_equal(Hc, H):
                alt = Hc + JTS
        try:
            fac = _KktFactor(M, A, alt)
        except np.linalg.LinAlgError:
            break

        if m == 0:
            dw, dnu = fac.solve(-r_d, -r_e)
            w = w + dw
            nu = nu + dnu
            continue

        r_g = g + s
        mu = float(s @ lam) / m

        def _direction(f: _KktFactor) -> tuple[np.ndarray, ...]:
            # predictor (sigma = 0)
            rc = s * lam
            rhs = -r_d - J.T @ ((lam * r_g - rc) / s)
            dwa, _ = f.solve(rhs, -r_e)
            dsa = -r_g - J @ dwa
            dla = (-rc - lam * dsa) / s
            apa = _max_step(s, dsa, 1.0)
            ada = _max_step(lam, dla, 1.0)
            mu_aff = float((s + apa * dsa) @ (lam + ada * dla)) / m
            sig = min(1.0, max((max(mu_aff, 0.0) / mu) ** 3, 1e-10))
            # per-row centering target, capped at a multiple of the row's own
            # product: with complementarity pairs of very different scales an
            # average-mu target would yank the small rows violently upward
            target = np.minimum(sig * mu, np.maximum(10.0 * s * lam, 1e-4 * sig * mu))
            # corrector with complementarity and constraint-curvature terms;
            # the affine increments enter scaled by their own step lengths so
            # a clipped predictor cannot poison the corrector
            rc = s * lam - target + (apa * dsa) * (ada * dla)
            rgc = r_g + ineq.curvature(apa * dwa) if ineq.quads else r_g
            rhs = -r_d - J.T @ ((lam * rgc - rc) / s)
            dw_c, dnu_c = f.solve(rhs, -r_e)
            ds_c = -rgc - J @ dw_c
            dl_c = (-rc - lam * ds_c) / s
            return dw_c, ds_c, dl_c, dnu_c

        dw, ds, dl, dnu = _direction(fac)

        # a direction far beyond the iterate scale signals an effectively
        # singular system (regularization can mask rank loss from the inertia
        # test); retry on the convexified model, then cap whatever remains
        cap = 1e4 * (1.0 + _inf(w))
        if _inf(dw) > cap and alt is not None:
            try:
                dw2, ds2, dl2, dnu2 = _direction(_KktFactor(alt, A))
            except np.linalg.LinAlgError:
                pass
            else:
                if _inf(dw2) < _inf(dw):
                    dw, ds, dl, dnu = dw2, ds2, dl2, dnu2
        big = _inf(dw)
        if big > cap:
            t = cap / big
            dw, ds, dl, dnu = t * dw, t * ds, t * dl, t * dnu

        a_p = _max_step(s, ds, _FRACTION_TO_BOUNDARY)
        a_d = _max_step(lam, dl, _FRACTION_TO_BOUNDARY)
        w = w + a_p * dw
        s = s + a_p * ds
        lam = lam + a_d * dl
        nu = nu + a_d * dnu

    return _IpmResult(w, lam, nu, status, it)


def _inf(x: np.ndarray) -> float:
    return float(np.abs(x).max()) if x.size else 0.0


# ---------------------------------------------------------------------------
# infeasibility certification
# ---------------------------------------------------------------------------


def _certify_infeasible(red: _Reduced, tol: float, max_iter: int) -> bool:
    """Minimize the worst constraint violation; True when it stays positive."""
    n, m, p = red.c1.size, red.ineq.m, red.A.shape[0]
    if p:
        w0, res, *_ = np.linalg.lstsq(red.A, -red.b, rcond=None)
        if _inf(red.A @ w0 + red.b) > 1e-6 * (1.0 + _inf(red.b)):
            return True
    else:
        w0 = np.zeros(n)
    if m == 0:
        return False

    # variables [w; t], minimize t subject to g_i(w) <= t, t >= -10
    G = np.hstack([red.ineq.G, -np.ones((m, 1))])
    r = red.ineq.r.copy()
    quads = [(i, _pad(Q)) for i, Q in red.ineq.quads]
    G = np.vstack([G, np.zeros((1, n + 1))])
    G[-1, -1] = -1.0
    r = np.append(r, -10.0)
    A = np.hstack([red.A, np.zeros((p, 1))]) if p else np.zeros((0, n + 1))
    phase1 = _Reduced(
        c0=0.0, c1=_unit(n + 1), C2=np.zeros((n + 1, n + 1)),
        ineq=_Rows(G, r, quads), A=A, b=red.b,
        ineq_orig=[], pair_orig=[], free_idx=np.arange(n + 1),
        base_point=np.zeros(n + 1),
    )
    t0 = float(np.max(red.ineq.values(w0), initial=0.0)) + 1.0
    out = _ipm(phase1, np.append(w0, t0), tol, max_iter)
    if out.status is not SolveStatus.OPTIMAL:
        return False
    t_star = out.w[-1]
    return t_star > 1e-6 * (1.0 + abs(t_star))


def _pad(Q: np.ndarray) -> np.ndarray:
    n = Q.shape[0]
    out = np.zeros((n + 1, n + 1))
    out[:n, :n] = Q
    return out


def _unit(n: int) -> np.ndarray:
    e = np.zeros(n)
    e[-1] = 1.0
    return e


# ---------------------------------------------------------------------------
# public entry point
# ---------------------------------------------------------------------------


def solve(program: ConvexProgram, *, tol: float = 1e-8, max_iter: int = 200,
          warm_start: np.ndarray | None = None) -> Solution:
    """Solve the program, honoring any pinned upper block.

    Returns the full-length primal (pins included) and one dual per constraint
    in the original list.  Statuses: ``OPTIMAL`` on scaled KKT satisfaction,
    ``INFEASIBLE`` when a violation-minimizing phase certifies a positive
    violation floor, ``UNBOUNDED`` on objective/iterate blow-up, otherwise
    ``MAX_ITERATIONS``.
    """
    try:
        red = _reduce(program)
    except _PinInfeasible:
        v = program.with_fixed_upper(program.fixed_upper).fixed_upper
        point = np.zeros(program.n)
        if v is not None:
            point[program.upper_slice] = v
        duals = np.zeros(program.n_constraints)
        return Solution(point, duals, program.objective_value(point),
                        SolveStatus.INFEASIBLE,
                        kkt_residual(program, point, duals), 0)

    if red.free_idx.size == 0:
        point = red.base_point
        duals = np.zeros(program.n_constraints)
        vals = program.constraint_values(point)
        feasible = not vals.size or float(vals.max()) <= 1e-7 * (1.0 + _inf(point))
        return Solution(point, duals, program.objective_value(point),
                        SolveStatus.OPTIMAL if feasible else SolveStatus.INFEASIBLE,
                        kkt_residual(program, point, duals), 0)

    w0 = _initial_point(red, None if warm_start is None
                        else np.asarray(warm_start, dtype=float)[red.free_idx])
    out = _ipm(red, w0, tol, max_iter)

    status = out.status
    if status in (SolveStatus.MAX_ITERATIONS, SolveStatus.UNBOUNDED):
        feas_now = max(float(np.max(red.ineq.values(out.w), initial=0.0)),
                       _inf(red.A @ out.w + red.b) if red.A.shape[0] else 0.0)
        if status is SolveStatus.MAX_ITERATIONS or feas_now > 1e-6:
            if _certify_infeasible(red, tol, max_iter):
                status = SolveStatus.INFEASIBLE

    point = red.expand(out.w)
    duals = np.zeros(program.n_constraints)
    for row, orig in enumerate(red.ineq_orig):
        duals[orig] = max(out.lam[row], 0.0)
    for row, (i, j) in enumerate(red.pair_orig):
        nu = out.nu[row]
        duals[i] = max(nu, 0.0)
        duals[j] = max(-nu, 0.0)

    return Solution(
        primal=point,
        duals=duals,
        objective=program.objective_value(point),
        status=status,
        kkt_residuals=kkt_residual(program, point, duals),
        iterations=out.iterations,
    )
