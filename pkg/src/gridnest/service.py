"""HTTP facade for the toolkit: grid problems in, solve reports out.

The service owns all orchestration — building the hierarchy, dispatching to
the chosen coordination method, and flattening the numeric results into plain
JSON-friendly types — so that clients (the bundled CLI, notebooks, other
services) stay thin.
"""

from __future__ import annotations

import time
from typing import Literal

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import __version__
from .baselines import AdmmConfig, solve_admm, solve_benders, solve_centralized
from .coordinator import CoordinationConfig, CoordinationResult, HierarchyNode
from .coordinator import solve_nested
from .grids import GridFileError, build_hierarchy, parse_grid_data
from .problems import case1_bilevel_tree, case1_tree
from .program import ProgramError, SolveStatus

Method = Literal["centralized", "nested", "benders", "admm"]

BUILTIN_PROBLEMS = {
    "case1": case1_tree,
    "case1-bilevel": case1_bilevel_tree,
}


class SolveRequest(BaseModel):
    """One problem, one method, one set of knobs."""

    method: Method = "nested"
    problem: str | None = Field(
        default=None, description="built-in problem name (case1, case1-bilevel)")
    grid: dict | None = Field(
        default=None, description="inline grid file content (parsed JSON)")
    epsilon: float = Field(default=1e-6, gt=0.0)
    max_outer: int | None = Field(
        default=None, ge=1,
        description="iteration budget; methods fall back to their own default")
    penalty: float | None = Field(
        default=None, ge=0.0,
        description="boundary-mismatch price for the elastic relaxation")
    anti_cycling: bool = False
    rho: float = Field(default=3.0, gt=0.0, description="consensus proximal weight")


class CompareRequest(SolveRequest):
    methods: list[Method] = Field(default=["centralized", "nested"], min_length=1)


class TraceRow(BaseModel):
    k: int
    l_norm_change: float
    upper_obj: float
    lower_bound_obj: float | None
    sum_o: float
    inner_iters: int
    flags: list[str] = []


class NodeSummary(BaseModel):
    level: int
    index: int
    objective: float
    status: str
    point: list[float]
    outer_iterations: int | None = None
    consensus_rounds: int | None = None


class SolveResponse(BaseModel):
    method: str
    status: str
    converged: bool
    objective: float | None
    boundary_values: dict[str, list[float]]
    per_node: dict[str, NodeSummary]
    outer_iterations: int
    inner_iterations: int
    max_slack: float = 0.0
    flags: list[str] = []
    trace: list[TraceRow] = []
    elapsed_seconds: float


class CompareResponse(BaseModel):
    results: dict[str, SolveResponse]
    reference: str | None
    objective_deltas: dict[str, float | None]


class HealthResponse(BaseModel):
    status: str
    version: str


def _node_summaries(per_node: dict[str, dict]) -> dict[str, NodeSummary]:
    out: dict[str, NodeSummary] = {}
    for label, rec in sorted(per_node.items()):
        out[label] = NodeSummary(
            level=int(rec["level"]), index=int(rec["index"]),
            objective=float(rec["objective"]), status=str(rec["status"]),
            point=[float(v) for v in np.asarray(rec["point"]).ravel()],
            outer_iterations=rec.get("outer_iterations"),
            consensus_rounds=rec.get("consensus_rounds"))
    return out


def _boundary_lists(boundary: dict[str, np.ndarray]) -> dict[str, list[float]]:
    return {label: [float(v) for v in np.asarray(vec).ravel()]
            for label, vec in sorted(boundary.items())}


def _trace_rows(result: CoordinationResult) -> list[TraceRow]:
    return [TraceRow(k=r.k, l_norm_change=float(r.l_norm_change),
                     upper_obj=float(r.upper_obj),
                     lower_bound_obj=(None if r.lower_bound_obj is None
                                      else float(r.lower_bound_obj)),
                     sum_o=float(r.sum_o), inner_iters=int(r.inner_iters),
                     flags=list(r.flags))
            for r in result.trace.records]


def build_tree(req: SolveRequest) -> HierarchyNode:
    if (req.problem is None) == (req.grid is None):
        raise HTTPException(
            status_code=422,
            detail="exactly one of 'problem' and 'grid' must be given")
    if req.problem is not None:
        maker = BUILTIN_PROBLEMS.get(req.problem)
        if maker is None:
            known = ", ".join(sorted(BUILTIN_PROBLEMS))
            raise HTTPException(
                status_code=422,
                detail=f"unknown problem {req.problem!r}; built-ins: {known}")
        return maker()
    try:
        return build_hierarchy(parse_grid_data(req.grid))
    except GridFileError as err:
        raise HTTPException(status_code=422, detail=str(err)) from err


def _coordination_config(req: SolveRequest) -> CoordinationConfig:
    return CoordinationConfig(
        epsilon=req.epsilon,
        max_outer=req.max_outer if req.max_outer is not None else 100,
        c_ply=req.penalty, anti_cycling=req.anti_cycling)


def run_solve(req: SolveRequest) -> SolveResponse:
    tree = build_tree(req)
    t0 = time.perf_counter()
    try:
        if req.method == "centralized":
            cent = solve_centralized(tree)
            return SolveResponse(
                method=req.method, status=cent.status.value,
                converged=cent.status is SolveStatus.OPTIMAL,
                objective=float(cent.objective),
                boundary_values=_boundary_lists(cent.boundary_values),
                per_node=_node_summaries(cent.per_node),
                outer_iterations=1,
                inner_iterations=int(cent.solution.iterations),
                elapsed_seconds=time.perf_counter() - t0)
        if req.method == "admm":
            admm = solve_admm(tree, AdmmConfig(
                rho=req.rho,
                max_iter=req.max_outer if req.max_outer is not None else 500))
            return SolveResponse(
                method=req.method,
                status="converged" if admm.converged else "max_iterations",
                converged=admm.converged,
                objective=(None if admm.objective is None
                           else float(admm.objective)),
                boundary_values=_boundary_lists(admm.boundary_values),
                per_node=_node_summaries(admm.per_node),
                outer_iterations=int(admm.iterations),
                inner_iterations=int(admm.total_solves),
                flags=list(admm.flags),
                elapsed_seconds=time.perf_counter() - t0)
        config = _coordination_config(req)
        solver = solve_benders if req.method == "benders" else solve_nested
        result = solver(tree, config)
        return SolveResponse(
            method=req.method,
            status="converged" if result.converged else "max_iterations",
            converged=result.converged,
            objective=(None if result.objective is None
                       else float(result.objective)),
            boundary_values=_boundary_lists(result.boundary_values),
            per_node=_node_summaries(result.per_node),
            outer_iterations=int(result.outer_iterations),
            inner_iterations=int(result.inner_iterations),
            max_slack=float(result.max_slack), flags=list(result.flags),
            trace=_trace_rows(result),
            elapsed_seconds=time.perf_counter() - t0)
    except (ProgramError, ValueError) as err:
        raise HTTPException(status_code=422, detail=str(err)) from err


def create_app() -> FastAPI:
    app = FastAPI(title="gridnest", version=__version__)

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", version=__version__)

    @app.post("/solve", response_model=SolveResponse)
    def solve_endpoint(req: SolveRequest) -> SolveResponse:
        return run_solve(req)

    @app.post("/compare", response_model=CompareResponse)
    def compare_endpoint(req: CompareRequest) -> CompareResponse:
        results: dict[str, SolveResponse] = {}
        for method in dict.fromkeys(req.methods):  # keep order, drop repeats
            single = req.model_copy(update={"method": method})
            results[method] = run_solve(SolveRequest(
                **single.model_dump(exclude={"methods"})))
        reference = "centralized" if "centralized" in results else None
        deltas: dict[str, float | None] = {}
        if reference is not None:
            ref_obj = results[reference].objective
            for method, res in results.items():
                deltas[method] = (None if res.objective is None or ref_obj is None
                                  else float(res.objective - ref_obj))
        return CompareResponse(results=results, reference=reference,
                               objective_deltas=deltas)

    return app


app = create_app()
