"""Set representations: boxes, star sets, zonotopes and halfspaces.

All sets are immutable.  A star set is the affine image of a bounded
polyhedral predicate,

    { c + V @ alpha  |  P @ alpha <= d,  pred_lb <= alpha <= pred_ub },

and a zonotope is the affine image of the unit cube.  Operations that can
only be answered by optimisation (bounds, membership, emptiness) go through
:mod:`gnodereach.linprog`.
"""

from __future__ import annotations

import numpy as np

from .linprog import LpError, LpProblem, LpStatus, lp_solve

MEMBERSHIP_TOL = 1e-8


class EmptySetError(ValueError):
    """An operation needed a nonempty set."""


class UnboundedSetError(ValueError):
    """An operation needed a bounded set."""


def _frozen(a, ndim):
    a = np.array(a, dtype=float, ndmin=ndim)
    a.setflags(write=False)
    return a


class EmptySet:
    """The empty set.  Returned by intersections that leave nothing behind."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "EMPTY"

    def __bool__(self):
        return False


EMPTY = EmptySet()


class Box:
    def __init__(self, lower, upper):
        lower = _frozen(lower, 1).ravel()
        upper = _frozen(upper, 1).ravel()
        if lower.size == 0 or lower.size != upper.size:
            raise ValueError("box bounds must be nonempty vectors of equal length")
        if np.any(lower > upper):
            raise ValueError("box lower bound exceeds upper bound")
        self.lower = lower
        self.upper = upper

    @classmethod
    def around(cls, center, radius):
        center = np.asarray(center, dtype=float).ravel()
        radius = np.broadcast_to(np.asarray(radius, dtype=float), center.shape)
        return cls(center - radius, center + radius)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def radius(self) -> np.ndarray:
        return 0.5 * (self.upper - self.lower)

    def contains(self, x, tol=MEMBERSHIP_TOL) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def to_star(self) -> "Star":
        return Star.from_box(self.lower, self.upper)

    def to_zonotope(self) -> "Zonotope":
        r = self.radius
        keep = r > 0
        return Zonotope(self.center, np.diag(r)[:, keep])

    def vertices(self) -> np.ndarray:
        n = self.dim
        signs = ((np.arange(2 ** n)[:, None] >> np.arange(n)) & 1).astype(bool)
        return np.where(signs, self.upper, self.lower)

    def __repr__(self):
        return f"Box(lower={self.lower.tolist()}, upper={self.upper.tolist()})"


class Halfspace:
    """The region {x | normal @ x <= offset}."""

    def __init__(self, normal, offset):
        normal = _frozen(normal, 1).ravel()
        if not np.any(normal):
            raise ValueError("halfspace normal must be nonzero")
        self.normal = normal
        self.offset = float(offset)

    @property
    def dim(self) -> int:
        return self.normal.size

    def contains(self, x, tol=0.0) -> bool:
        return bool(self.normal @ np.asarray(x, dtype=float) <= self.offset + tol)

    def __repr__(self):
        return f"Halfspace(normal={self.normal.tolist()}, offset={self.offset})"


class Star:
    def __init__(self, center, basis, P=None, d=None, pred_lb=None, pred_ub=None):
        center = _frozen(center, 1).ravel()
        basis = np.array(basis, dtype=float, ndmin=2)
        if basis.shape[0] != center.size:
            if basis.size == 0:
                basis = np.zeros((center.size, 0))
            else:
                raise ValueError(f"basis has {basis.shape[0]} rows, center has {center.size}")
        m = basis.shape[1]
        if P is None:
            P = np.zeros((0, m))
            d = np.zeros(0)
        d = np.array(d, dtype=float).ravel()
        P = np.array(P, dtype=float).reshape(d.size if m == 0 else -1, m)
        if P.shape[0] != d.size:
            raise ValueError("constraint matrix rows must match constraint vector length")
        if (pred_lb is None) != (pred_ub is None):
            raise ValueError("predicate bounds come in pairs")
        self.center = center
        self.basis = _frozen(basis, 2)
        self.P = _frozen(P, 2)
        self.d = _frozen(d, 1)
        if pred_lb is not None:
            pred_lb = _frozen(pred_lb, 1).ravel()
            pred_ub = _frozen(pred_ub, 1).ravel()
            if pred_lb.size != m or pred_ub.size != m:
                raise ValueError("predicate bounds must have one entry per predicate variable")
        self.pred_lb = pred_lb
        self.pred_ub = pred_ub
        self._bounds_cache = {}

    # -- constructors -----------------------------------------------------

    @classmethod
    def from_box(cls, lower, upper) -> "Star":
        """Box star with one predicate variable per non-degenerate coordinate."""
        box = Box(lower, upper)
        r = box.radius
        keep = np.flatnonzero(r > 0)
        if keep.size == 0:
            return cls.point(box.center)
        V = np.zeros((box.dim, keep.size))
        V[keep, np.arange(keep.size)] = r[keep]
        ones = np.ones(keep.size)
        return cls(box.center, V, pred_lb=-ones, pred_ub=ones)

    @classmethod
    def point(cls, x) -> "Star":
        # one pinned predicate variable keeps every LP well-formed
        x = np.asarray(x, dtype=float).ravel()
        return cls(x, np.zeros((x.size, 1)), pred_lb=np.zeros(1), pred_ub=np.zeros(1))

    # -- basic properties -------------------------------------------------

    @property
    def dim(self) -> int:
        return self.center.size

    @property
    def n_pred(self) -> int:
        return self.basis.shape[1]

    @property
    def has_pred_bounds(self) -> bool:
        return self.pred_lb is not None

    def __repr__(self):
        return f"Star(dim={self.dim}, n_pred={self.n_pred}, n_constraints={self.P.shape[0]})"

    def evaluate(self, alpha) -> np.ndarray:
        alpha = np.asarray(alpha, dtype=float)
        return self.center + alpha @ self.basis.T if alpha.ndim == 2 else self.center + self.basis @ alpha

    def _var_bounds(self):
        if self.pred_lb is None:
            return np.full(self.n_pred, -np.inf), np.full(self.n_pred, np.inf)
        return self.pred_lb, self.pred_ub

    # -- LP-backed queries -------------------------------------------------

    def _optimize(self, direction) -> float:
        """min over the predicate of direction @ alpha."""
        lb, ub = self._var_bounds()
        if self.P.shape[0] == 0:
            if not np.all(np.isfinite(np.where(direction != 0, lb, 0.0))) or \
                    not np.all(np.isfinite(np.where(direction != 0, ub, 0.0))):
                raise UnboundedSetError("star predicate is unbounded")
            return float(np.sum(np.minimum(direction * lb, direction * ub)))
        out = lp_solve(LpProblem(direction, self.P, self.d, lb, ub))
        if out.status is LpStatus.INFEASIBLE:
            raise EmptySetError("star predicate is infeasible")
        if out.status is LpStatus.UNBOUNDED:
            raise UnboundedSetError("star predicate is unbounded")
        return out.value

    def support_point(self, direction) -> np.ndarray:
        """A point of the set maximizing direction @ x."""
        direction = np.asarray(direction, dtype=float)
        lb, ub = self._var_bounds()
        obj = -(self.basis.T @ direction)
        if self.P.shape[0] == 0:
            alpha = np.where(obj > 0, lb, np.where(obj < 0, ub, 0.5 * (lb + ub)))
        else:
            out = lp_solve(LpProblem(obj, self.P, self.d, lb, ub))
            if out.status is LpStatus.INFEASIBLE:
                raise EmptySetError("star predicate is infeasible")
            if out.status is LpStatus.UNBOUNDED:
                raise UnboundedSetError("star predicate is unbounded")
            alpha = out.x
        return self.evaluate(alpha)

    def bounds(self, dim: int) -> tuple[float, float]:
        if not 0 <= dim < self.dim:
            raise IndexError(f"dimension {dim} out of range for a {self.dim}-D star")
        if dim in self._bounds_cache:
            return self._bounds_cache[dim]
        row = self.basis[dim]
        if not np.any(row):
            if self.P.shape[0] and self.is_empty():
                raise EmptySetError("star predicate is infeasible")
            lo = hi = float(self.center[dim])
        else:
            lo = float(self.center[dim]) + self._optimize(row)
            hi = float(self.center[dim]) - self._optimize(-row)
        hi = max(lo, hi)
        self._bounds_cache[dim] = (lo, hi)
        return lo, hi

    def box_bounds(self) -> Box:
        lo, hi = zip(*(self.bounds(i) for i in range(self.dim))) if self.dim else ((), ())
        return Box(np.array(lo), np.array(hi))

    def estimate_bounds(self) -> Box:
        """Outer box from the predicate bounds alone (no LP)."""
        lb, ub = self.predicate_box()
        mid = 0.5 * (lb + ub)
        rad = 0.5 * (ub - lb)
        c = self.center + self.basis @ mid
        r = np.abs(self.basis) @ rad
        return Box(c - r, c + r)

    def predicate_box(self) -> tuple[np.ndarray, np.ndarray]:
        """Bounds on each predicate variable: stored ones, else computed by LP."""
        if self.pred_lb is not None:
            return self.pred_lb, self.pred_ub
        return self.tight_predicate_box()

    def tight_predicate_box(self) -> tuple[np.ndarray, np.ndarray]:
        m = self.n_pred
        if self.P.shape[0] == 0:
            lb, ub = self._var_bounds()
            if not (np.all(np.isfinite(lb)) and np.all(np.isfinite(ub))):
                raise UnboundedSetError("star predicate is unbounded")
            return lb, ub
        lo = np.empty(m)
        hi = np.empty(m)
        for j in range(m):
            e = np.zeros(m)
            e[j] = 1.0
            lo[j] = self._optimize(e)
            hi[j] = -self._optimize(-e)
        return lo, np.maximum(lo, hi)

    def is_empty(self) -> bool:
        if self.P.shape[0] == 0:
            lb, ub = self._var_bounds()
            return bool(np.any(lb > ub))
        lb, ub = self._var_bounds()
        out = lp_solve(LpProblem(np.zeros(self.n_pred), self.P, self.d, lb, ub))
        return out.status is LpStatus.INFEASIBLE

    def contains(self, x, tol=MEMBERSHIP_TOL) -> bool:
        x = np.asarray(x, dtype=float).ravel()
        if x.size != self.dim:
            raise ValueError(f"point has dimension {x.size}, star has {self.dim}")
        scale = max(1.0, float(np.max(np.abs(x))), float(np.max(np.abs(self.center), initial=0.0)))
        rhs = x - self.center
        m = self.n_pred
        if m == 0:
            return bool(np.max(np.abs(rhs), initial=0.0) <= tol * scale)
        lb, ub = self._var_bounds()
        # minimize a common slack s on every residual
        k = self.P.shape[0]
        ones_n = np.ones((self.dim, 1))
        A = np.vstack([
            np.hstack([self.basis, -ones_n]),
            np.hstack([-self.basis, -ones_n]),
            np.hstack([self.P, -np.ones((k, 1))]),
        ])
        b = np.concatenate([rhs, -rhs, self.d])
        c = np.zeros(m + 1)
        c[-1] = 1.0
        out = lp_solve(LpProblem(c, A, b, np.append(lb, 0.0), np.append(ub, np.inf)))
        if not out.optimal:
            return False
        return out.value <= tol * scale

    # -- set operations ---------------------------------------------------

    def affine_map(self, W, b=None) -> "Star":
        W = np.array(W, dtype=float, ndmin=2)
        if W.shape[1] != self.dim:
            raise ValueError(f"map expects dimension {W.shape[1]}, star has {self.dim}")
        c = W @ self.center
        if b is not None:
            c = c + np.asarray(b, dtype=float).ravel()
        return Star(c, W @ self.basis, self.P, self.d, self.pred_lb, self.pred_ub)

    def translate(self, v) -> "Star":
        return Star(self.center + np.asarray(v, dtype=float), self.basis, self.P, self.d,
                    self.pred_lb, self.pred_ub)

    def add_constraint(self, row, rhs) -> "Star":
        row = np.asarray(row, dtype=float).reshape(1, self.n_pred)
        return Star(self.center, self.basis, np.vstack([self.P, row]),
                    np.append(self.d, rhs), self.pred_lb, self.pred_ub)

    def intersect_halfspace(self, h: Halfspace):
        if h.dim != self.dim:
            raise ValueError(f"halfspace has dimension {h.dim}, star has {self.dim}")
        row = h.normal @ self.basis
        rhs = h.offset - h.normal @ self.center
        if not np.any(row):
            if rhs >= 0:
                return self
            return EMPTY
        out = self.add_constraint(row, rhs)
        return EMPTY if out.is_empty() else out

    def to_zonotope(self) -> "Zonotope":
        if self.is_empty():
            raise EmptySetError("cannot enclose an empty star")
        if self.P.shape[0] == 0:
            lb, ub = self.predicate_box()
        else:
            lb, ub = self.tight_predicate_box()
        mid = 0.5 * (lb + ub)
        rad = 0.5 * (ub - lb)
        G = self.basis * rad
        keep = np.any(G != 0, axis=0)
        return Zonotope(self.center + self.basis @ mid, G[:, keep])

    # -- sampling ----------------------------------------------------------

    def sample(self, n: int, rng: np.random.Generator, boundary_fraction=0.0) -> np.ndarray:
        """Draw points from the set (uniform over the predicate, optionally
        biased toward predicate-box vertices)."""
        return self.evaluate(self.sample_predicate(n, rng, boundary_fraction))

    def sample_predicate(self, n: int, rng: np.random.Generator, boundary_fraction=0.0) -> np.ndarray:
        m = self.n_pred
        if m == 0:
            return np.zeros((n, 0))
        lb, ub = self.tight_predicate_box() if self.P.shape[0] else self.predicate_box()
        n_vertex = int(round(n * boundary_fraction))
        out = []
        if n_vertex:
            corners = np.where(rng.random((4 * n_vertex, m)) < 0.5, lb, ub)
            ok = self._feasible_rows(corners)
            out.append(corners[ok][:n_vertex])
        need = n - sum(len(o) for o in out)
        tries = 0
        while need > 0 and tries < 50:
            cand = lb + (ub - lb) * rng.random((max(4 * need, 64), m))
            cand = cand[self._feasible_rows(cand)][:need]
            out.append(cand)
            need -= len(cand)
            tries += 1
        if need > 0:
            out.append(self._hit_and_run(need, rng, lb, ub))
        return np.vstack(out)[:n]

    def _feasible_rows(self, alphas, tol=0.0):
        if self.P.shape[0] == 0:
            return np.ones(len(alphas), dtype=bool)
        return np.all(alphas @ self.P.T <= self.d + tol, axis=1)

    def _hit_and_run(self, n, rng, lb, ub):
        m = self.n_pred
        # Chebyshev-like interior start: maximize the slack t of every constraint
        k = self.P.shape[0]
        norms = np.linalg.norm(self.P, axis=1)
        A = np.vstack([np.hstack([self.P, norms[:, None]])])
        c = np.zeros(m + 1)
        c[-1] = -1.0
        out = lp_solve(LpProblem(c, A, self.d, np.append(lb, 0.0),
                                 np.append(ub, max(1.0, float(np.max(ub - lb))))))
        if not out.optimal:
            raise EmptySetError("cannot sample an empty star")
        x = out.x[:m]
        pts = []
        Pk = self.P if k else np.zeros((0, m))
        for _ in range(n * 5):
            u = rng.normal(size=m)
            u /= np.linalg.norm(u)
            t_lo, t_hi = -np.inf, np.inf
            with np.errstate(divide="ignore", invalid="ignore"):
                for lo_b, hi_b, xi, ui in zip(lb, ub, x, u):
                    if ui > 0:
                        t_lo, t_hi = max(t_lo, (lo_b - xi) / ui), min(t_hi, (hi_b - xi) / ui)
                    elif ui < 0:
                        t_lo, t_hi = max(t_lo, (hi_b - xi) / ui), min(t_hi, (lo_b - xi) / ui)
                pu = Pk @ u
                slack = self.d - Pk @ x
                pos = pu > 1e-14
                neg = pu < -1e-14
                if np.any(pos):
                    t_hi = min(t_hi, np.min(slack[pos] / pu[pos]))
                if np.any(neg):
                    t_lo = max(t_lo, np.max(slack[neg] / pu[neg]))
            if t_hi > t_lo:
                x = x + (t_lo + (t_hi - t_lo) * rng.random()) * u
            pts.append(x.copy())
        return np.array(pts[4::5][:n])


class Zonotope:
    def __init__(self, center, generators=None):
        center = _frozen(center, 1).ravel()
        if generators is None:
            generators = np.zeros((center.size, 0))
        G = np.array(generators, dtype=float, ndmin=2)
        if G.size == 0:
            G = np.zeros((center.size, 0))
        if G.shape[0] != center.size:
            raise ValueError(f"generators have {G.shape[0]} rows, center has {center.size}")
        self.center = center
        self.generators = _frozen(G, 2)

    @property
    def dim(self) -> int:
        return self.center.size

    @property
    def n_gen(self) -> int:
        return self.generators.shape[1]

    def __repr__(self):
        return f"Zonotope(dim={self.dim}, n_gen={self.n_gen})"

    def affine_map(self, W, b=None) -> "Zonotope":
        W = np.array(W, dtype=float, ndmin=2)
        if W.shape[1] != self.dim:
            raise ValueError(f"map expects dimension {W.shape[1]}, zonotope has {self.dim}")
        c = W @ self.center
        if b is not None:
            c = c + np.asarray(b, dtype=float).ravel()
        return Zonotope(c, W @ self.generators)

    def translate(self, v) -> "Zonotope":
        return Zonotope(self.center + np.asarray(v, dtype=float), self.generators)

    def minkowski_sum(self, other: "Zonotope") -> "Zonotope":
        if other.dim != self.dim:
            raise ValueError("Minkowski sum of zonotopes with different dimensions")
        return Zonotope(self.center + other.center, np.hstack([self.generators, other.generators]))

    def interval_hull(self) -> Box:
        r = np.sum(np.abs(self.generators), axis=1)
        return Box(self.center - r, self.center + r)

    def order_reduce(self, max_order: float) -> "Zonotope":
        """Girard boxing: keep the largest generators, box the rest."""
        if max_order < 1:
            raise ValueError("max_order must be at least 1")
        n = self.dim
        limit = int(np.floor(n * max_order))
        if self.n_gen <= limit:
            return self
        n_keep = max(limit - n, 0)
        norms = np.linalg.norm(self.generators, axis=0)
        order = np.argsort(-norms, kind="stable")
        kept = self.generators[:, np.sort(order[:n_keep])]
        boxed = np.sum(np.abs(self.generators[:, order[n_keep:]]), axis=1)
        box_gens = np.diag(boxed)[:, boxed > 0]
        return Zonotope(self.center, np.hstack([kept, box_gens]))

    def to_star(self) -> Star:
        g = self.n_gen
        ones = np.ones(g)
        return Star(self.center, self.generators, pred_lb=-ones, pred_ub=ones)

    def contains(self, x, tol=MEMBERSHIP_TOL) -> bool:
        return self.to_star().contains(x, tol)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        beta = rng.uniform(-1.0, 1.0, size=(n, self.n_gen))
        return self.center + beta @ self.generators.T


# -- free-function spellings ------------------------------------------------

def star_affine_map(S: Star, W, b=None) -> Star:
    return S.affine_map(W, b)


def star_intersect_halfspace(S: Star, H: Halfspace):
    return S.intersect_halfspace(H)


def star_bounds(S: Star, dim: int) -> tuple[float, float]:
    return S.bounds(dim)


def star_to_zonotope(S: Star) -> Zonotope:
    return S.to_zonotope()


def zonotope_to_star(Z: Zonotope) -> Star:
    return Z.to_star()


def star_contains_point(S: Star, x) -> bool:
    return S.contains(x)


def zono_interval_hull(Z: Zonotope) -> Box:
    return Z.interval_hull()


def zono_order_reduce(Z: Zonotope, max_order: float) -> Zonotope:
    return Z.order_reduce(max_order)


def as_star(s) -> Star:
    if isinstance(s, Star):
        return s
    if isinstance(s, Zonotope):
        return s.to_star()
    if isinstance(s, Box):
        return s.to_star()
    raise TypeError(f"cannot convert {type(s).__name__} to a star")


def contains(s, x, tol=MEMBERSHIP_TOL) -> bool:
    return s.contains(x, tol)


def outer_box(s) -> Box:
    """Cheap enclosing box of any set type."""
    if isinstance(s, Zonotope):
        return s.interval_hull()
    if isinstance(s, Box):
        return s
    return s.estimate_bounds()


# -- JSON ------------------------------------------------------------------

def set_to_json(s) -> dict:
    if isinstance(s, Star):
        out = {
            "type": "star",
            "center": s.center.tolist(),
            "basis": s.basis.tolist(),
            "P": s.P.tolist(),
            "d": s.d.tolist(),
        }
        if s.pred_lb is not None:
            out["pred_lb"] = s.pred_lb.tolist()
            out["pred_ub"] = s.pred_ub.tolist()
        return out
    if isinstance(s, Zonotope):
        return {"type": "zonotope", "center": s.center.tolist(), "generators": s.generators.tolist()}
    if isinstance(s, Box):
        return {"type": "box", "lower": s.lower.tolist(), "upper": s.upper.tolist()}
    if s is EMPTY:
        return {"type": "empty"}
    raise TypeError(f"cannot serialize {type(s).__name__}")


def set_from_json(doc: dict):
    kind = doc.get("type")
    if kind == "star":
        n = len(doc["center"])
        basis = np.array(doc["basis"], dtype=float).reshape(n, -1)
        m = basis.shape[1]
        P = np.array(doc.get("P", []), dtype=float).reshape(-1, m)
        return Star(doc["center"], basis, P, doc.get("d", []), doc.get("pred_lb"), doc.get("pred_ub"))
    if kind == "zonotope":
        n = len(doc["center"])
        return Zonotope(doc["center"], np.array(doc["generators"], dtype=float).reshape(n, -1))
    if kind == "box":
        return Box(doc["lower"], doc["upper"])
    if kind == "empty":
        return EMPTY
    raise ValueError(f"unknown set type {kind!r}")


__all__ = [
    "Box", "Star", "Zonotope", "Halfspace", "EmptySet", "EMPTY", "MEMBERSHIP_TOL",
    "EmptySetError", "UnboundedSetError", "LpError",
    "star_affine_map", "star_intersect_halfspace", "star_bounds", "star_to_zonotope",
    "zonotope_to_star", "star_contains_point", "zono_interval_hull", "zono_order_reduce",
    "as_star", "contains", "outer_box", "set_to_json", "set_from_json",
]
