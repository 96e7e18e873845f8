"""Nested decomposition toolkit for hierarchical convex optimization."""

from .program import (
    ConstraintKind,
    ConvexProgram,
    KktResiduals,
    ProgramBuilder,
    ProgramError,
    QuadraticConstraint,
    Solution,
    SolveStatus,
    kkt_residual,
)
from .solver import solve

__all__ = [
    "ConstraintKind",
    "ConvexProgram",
    "KktResiduals",
    "ProgramBuilder",
    "ProgramError",
    "QuadraticConstraint",
    "Solution",
    "SolveStatus",
    "kkt_residual",
    "solve",
]

__version__ = "0.1.0"
