import itertools

import numpy as np
import pytest
from scipy.integrate import solve_ivp


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def enumerate_vertices(A, b, lb, ub, tol=1e-9):
    """Brute-force vertices of {x | A x <= b, lb <= x <= ub} (small problems only)."""
    m = A.shape[1]
    rows = [A]
    rhs = [b]
    rows.append(np.eye(m))
    rhs.append(ub)
    rows.append(-np.eye(m))
    rhs.append(-lb)
    G = np.vstack(rows)
    h = np.concatenate(rhs)
    verts = []
    for idx in itertools.combinations(range(G.shape[0]), m):
        M = G[list(idx)]
        if abs(np.linalg.det(M)) < 1e-12:
            continue
        x = np.linalg.solve(M, h[list(idx)])
        if np.all(G @ x <= h + tol * (1 + np.abs(h))):
            verts.append(x)
    return np.array(verts)


def rk45(f, z0, t_f, t_eval=None):
    sol = solve_ivp(lambda t, z: f(z), (0.0, t_f), np.asarray(z0, dtype=float), method="RK45",
                    rtol=1e-10, atol=1e-10, t_eval=t_eval)
    assert sol.status == 0
    return sol


# -- acceptance reporting --------------------------------------------------------

ACCEPTANCE_RESULTS = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance criterion; prints PASS/FAIL in the terminal summary."""
    def record(label, passed, detail=""):
        ACCEPTANCE_RESULTS[label] = (bool(passed), detail)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for label, (passed, detail) in ACCEPTANCE_RESULTS.items():
        line = f"{'PASS' if passed else 'FAIL'}  {label}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
