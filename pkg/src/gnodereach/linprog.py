"""Small dense linear programs for star-set queries.

Every bound, feasibility and membership question asked of a star set is a
tiny dense LP.  Problems are posed in the canonical form

    minimize    c @ x
    subject to  A @ x <= b,   lb <= x <= ub

and solved with the HiGHS dual simplex shipped with scipy.  Box-only problems
(no inequality rows) are answered in closed form.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

LP_TOL = 1e-9
PIVOT_TOL = 1e-10

_HIGHS_OPTIONS = {
    "primal_feasibility_tolerance": LP_TOL,
    "dual_feasibility_tolerance": LP_TOL,
}


class LpError(RuntimeError):
    """Raised when the solver cannot produce a trustworthy answer."""


class LpStatus(str, enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"


@dataclass(frozen=True)
class LpProblem:
    c: np.ndarray
    A: np.ndarray
    b: np.ndarray
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float).ravel()
        m = c.size
        if m < 1:
            raise ValueError("LP needs at least one variable")
        A = np.asarray(self.A, dtype=float).reshape(-1, m)
        b = np.asarray(self.b, dtype=float).ravel()
        if A.shape[0] != b.size:
            raise ValueError(f"A has {A.shape[0]} rows but b has {b.size} entries")
        lb = np.full(m, -np.inf) if self.lb is None else np.asarray(self.lb, dtype=float).ravel()
        ub = np.full(m, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float).ravel()
        if lb.size != m or ub.size != m:
            raise ValueError("variable bounds must match the objective length")
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "lb", lb)
        object.__setattr__(self, "ub", ub)

    @property
    def n_vars(self) -> int:
        return self.c.size


@dataclass(frozen=True)
class LpOutcome:
    status: LpStatus
    value: float
    x: np.ndarray | None

    @property
    def optimal(self) -> bool:
        return self.status is LpStatus.OPTIMAL


def _box_only(p: LpProblem) -> LpOutcome:
    if np.any(p.lb > p.ub):
        return LpOutcome(LpStatus.INFEASIBLE, np.inf, None)
    x = np.where(p.c > 0, p.lb, np.where(p.c < 0, p.ub, np.clip(0.0, p.lb, p.ub)))
    if not np.all(np.isfinite(x)):
        return LpOutcome(LpStatus.UNBOUNDED, -np.inf, None)
    return LpOutcome(LpStatus.OPTIMAL, float(p.c @ x), x)


WITNESS_TOL = 1e-7


def _witness_error(p: LpProblem, x: np.ndarray) -> str | None:
    scale = 1.0 + np.max(np.abs(x), initial=0.0)
    if p.A.shape[0]:
        row_scale = 1.0 + np.abs(p.b) + np.abs(p.A) @ np.abs(x)
        viol = np.max((p.A @ x - p.b) / row_scale)
        if viol > WITNESS_TOL:
            return f"solver witness violates a constraint by {viol:.3e} (relative)"
    if np.any(x < p.lb - WITNESS_TOL * scale) or np.any(x > p.ub + WITNESS_TOL * scale):
        return "solver witness violates a variable bound"
    return None


def lp_solve(p: LpProblem) -> LpOutcome:
    if not (np.all(np.isfinite(p.c)) and np.all(np.isfinite(p.A)) and np.all(np.isfinite(p.b))):
        raise LpError("non-finite LP data")
    if p.A.shape[0] == 0:
        return _box_only(p)

    bounds = np.column_stack([p.lb, p.ub])
    problem = None
    # dual simplex first; the interior-point path is the fallback for
    # solver failures and for witnesses that miss the feasibility check
    for method in ("highs-ds", "highs-ipm"):
        res = linprog(p.c, A_ub=p.A, b_ub=p.b, bounds=bounds, method=method, options=_HIGHS_OPTIONS)
        if res.status == 2:
            return LpOutcome(LpStatus.INFEASIBLE, np.inf, None)
        if res.status == 3:
            return LpOutcome(LpStatus.UNBOUNDED, -np.inf, None)
        if res.status != 0:
            problem = f"LP solver failed (status {res.status}): {res.message}"
            continue
        x = np.asarray(res.x, dtype=float)
        problem = _witness_error(p, x)
        if problem is None:
            return LpOutcome(LpStatus.OPTIMAL, float(p.c @ x), x)
    raise LpError(problem)


def is_feasible(A, b, lb=None, ub=None) -> bool:
    A = np.asarray(A, dtype=float)
    m = A.shape[1] if A.ndim == 2 else np.asarray(lb).size
    out = lp_solve(LpProblem(np.zeros(m), A.reshape(-1, m), b, lb, ub))
    return out.optimal
