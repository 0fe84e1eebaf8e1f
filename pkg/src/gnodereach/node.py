"""Reachability of neural ODE blocks  z' = g(z).

``g`` is a stack of fully-connected layers, optionally wrapped as
``g(z) = K z + E net(z)`` so that known kinematics (a skip term ``K``) and an
output embedding ``E`` can be expressed without extra neurons.

Linear dynamics collapse to ``z' = A z + c`` and are propagated exactly on
star sets ("direct" method); time-interval sets are the interpolation hull
of consecutive step sets bloated by a second-order Taylor remainder.
Nonlinear dynamics use fixed-step conservative linearization on zonotopes:
linearize at the set center, enclose the Lagrange remainder by interval
arithmetic over a candidate box, and accept the step once the candidate box
contains the resulting enclosure.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .geometry import Box, Star, Zonotope, as_star, set_to_json
from .layers import SMOOTH_FUNCS, Activation, FcLayer

log = logging.getLogger(__name__)

DEFAULT_MAX_ORDER = 20
MAX_REFINEMENTS = 10
ENLARGE_FACTOR = 1.5
ENLARGE_FLOOR = 1e-8


class NumericError(ArithmeticError):
    pass


class StepSizeError(RuntimeError):
    """The a-posteriori enclosure check kept failing; retry with a smaller step."""


class OutputMode(str, enum.Enum):
    FINAL_SET = "final_set"
    FLOWPIPE = "flowpipe"


@dataclass(frozen=True)
class TimeConfig:
    t_f: float = 1.0
    step: float | None = None
    output_mode: OutputMode = OutputMode.FINAL_SET

    def __post_init__(self):
        if not self.t_f > 0:
            raise ValueError("t_f must be positive")
        step = self.t_f / 100.0 if self.step is None else float(self.step)
        if not step > 0:
            raise ValueError("step must be positive")
        if step > self.t_f * (1 + 1e-12):
            raise ValueError("step must not exceed t_f")
        object.__setattr__(self, "t_f", float(self.t_f))
        object.__setattr__(self, "step", min(step, float(self.t_f)))
        object.__setattr__(self, "output_mode", OutputMode(self.output_mode))

    def grid(self) -> np.ndarray:
        """Step boundaries 0 = t_0 < ... < t_N = t_f."""
        n = max(1, int(math.ceil(self.t_f / self.step - 1e-9)))
        ts = np.minimum(np.arange(n + 1) * self.step, self.t_f)
        ts[-1] = self.t_f
        return ts


@dataclass(frozen=True)
class NodeDynamics:
    layers: tuple
    skip: np.ndarray | None = None
    out_map: np.ndarray | None = None

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("NODE dynamics need at least one layer")
        for k, (a, b) in enumerate(zip(layers, layers[1:])):
            if a.out_dim != b.in_dim:
                raise ValueError(f"dynamics layer {k + 1} expects {b.in_dim} inputs, "
                                 f"layer {k} produces {a.out_dim}")
        for k, lay in enumerate(layers):
            if not lay.activation.smooth:
                raise ValueError(f"dynamics layer {k}: {lay.activation.value} is not continuously "
                                 "differentiable and is not allowed inside a NODE")
        n = layers[0].in_dim
        out = layers[-1].out_dim
        E = None
        if self.out_map is not None:
            E = np.array(self.out_map, dtype=float, ndmin=2)
            if E.shape != (n, out):
                raise ValueError(f"out_map must have shape {(n, out)}, got {E.shape}")
            E.setflags(write=False)
        elif out != n:
            raise ValueError(f"NODE dynamics map {n} states to {out} derivatives")
        K = None
        if self.skip is not None:
            K = np.array(self.skip, dtype=float, ndmin=2)
            if K.shape != (n, n):
                raise ValueError(f"skip must have shape {(n, n)}, got {K.shape}")
            K.setflags(write=False)
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "skip", K)
        object.__setattr__(self, "out_map", E)

    @property
    def dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def is_linear(self) -> bool:
        return all(l.activation.is_identity or len(l.active_neurons()) == 0 for l in self.layers)

    def __call__(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        x = z
        for lay in self.layers:
            x = lay.evaluate(x)
        out = x if self.out_map is None else x @ self.out_map.T
        if self.skip is not None:
            out = out + z @ self.skip.T
        return out


@dataclass(frozen=True)
class LinearOdeForm:
    A: np.ndarray
    c: np.ndarray

    @property
    def dim(self) -> int:
        return self.c.size

    def __call__(self, z):
        return np.asarray(z, dtype=float) @ self.A.T + self.c


@dataclass
class Flowpipe:
    """Reach sets of one NODE layer.

    In flowpipe mode ``times``/``sets`` hold time-interval enclosures that tile
    [0, t_f].  In final-set mode they hold the single point-in-time set at
    t_f.  ``final`` is always the point-in-time set at t_f.
    """

    times: list
    sets: list
    final: object
    mode: OutputMode
    enclosure_checks: list = field(default_factory=list)
    method: str = ""

    def __len__(self):
        return len(self.sets)

    def set_at(self, t: float):
        """Index of the step whose interval contains time t."""
        for k, (lo, hi) in enumerate(self.times):
            if lo - 1e-12 <= t <= hi + 1e-12:
                return k
        raise ValueError(f"time {t} outside the flowpipe")


def flowpipe_to_json(fp: Flowpipe) -> list:
    return [{"t_lo": float(lo), "t_hi": float(hi), "set": set_to_json(s)} for (lo, hi), s in zip(fp.times, fp.sets)]


# -- linear dynamics -----------------------------------------------------------

def collapse_linear(dyn: NodeDynamics) -> LinearOdeForm:
    if not dyn.is_linear:
        raise ValueError("collapse_linear needs dynamics whose activations are all linear")
    M = np.eye(dyn.dim)
    v = np.zeros(dyn.dim)
    for lay in dyn.layers:
        M = lay.W @ M
        v = lay.W @ v + lay.b
    if dyn.out_map is not None:
        M = dyn.out_map @ M
        v = dyn.out_map @ v
    if dyn.skip is not None:
        M = M + dyn.skip
    return LinearOdeForm(M, v)


def matrix_exponential(A, t: float = 1.0) -> np.ndarray:
    A = np.array(A, dtype=float, ndmin=2)
    if A.shape[0] != A.shape[1]:
        raise ValueError("matrix exponential needs a square matrix")
    if not (np.all(np.isfinite(A)) and math.isfinite(t)):
        raise NumericError("non-finite matrix entries")
    return expm(A * t)


def _discretize(A, c, h):
    """Return e^{Ah} and (int_0^h e^{As} ds) @ c."""
    n = A.shape[0]
    aug = np.zeros((n + 1, n + 1))
    aug[:n, :n] = A
    aug[:n, n] = c
    E = matrix_exponential(aug, h)
    return E[:n, :n], E[:n, n]


def _integral_abs(A, h):
    """int_0^h e^{|A| s} ds, an entrywise bound on |int_0^h e^{A s} ds|-type terms."""
    n = A.shape[0]
    aug = np.zeros((2 * n, 2 * n))
    aug[:n, :n] = np.abs(A)
    aug[:n, n:] = np.eye(n)
    return matrix_exponential(aug, h)[:n, n:]


def _rho(a: float, h: float) -> float:
    """e^{ah} - 1 - ah."""
    x = a * h
    return math.expm1(x) - x


def _rho_over_a(a: float, h: float) -> float:
    """(e^{ah} - 1 - ah) / a, continuous at a = 0."""
    x = a * h
    if x < 1e-5:
        return h * (x / 2.0 + x * x / 6.0 + x ** 3 / 24.0)
    return h * (math.expm1(x) - x) / x


def interpolation_bloat(A, y_max: float, drift_norm: float, h: float) -> float:
    """Radius (inf-norm) bounding how far y(t), t in [0, h], strays from the
    chord between y(0) and y(h) for y' = A y + u, |y(0)| <= y_max, |u| = drift_norm.
    """
    a = float(np.max(np.sum(np.abs(A), axis=1))) if A.size else 0.0
    return 2.0 * (_rho(a, h) * y_max + _rho_over_a(a, h) * drift_norm)


def _interval_star(S: Star, Phi, g, bloat) -> Star:
    """Star enclosing { x + tau ((Phi - I) x + g) | x in S, tau in [0,1] } + box(bloat)."""
    n, m = S.dim, S.n_pred
    lb, ub = S.predicate_box()
    mid = 0.5 * (lb + ub)
    rad = 0.5 * (ub - lb)
    D = Phi - np.eye(n)
    c = S.center + 0.5 * (D @ S.center + g)
    V = S.basis + 0.5 * D @ S.basis
    w_mid = D @ (S.center + S.basis @ mid) + g
    cross = 0.5 * (D @ S.basis) * rad
    keep = np.any(np.abs(cross) > 0, axis=0)
    cols = [0.5 * w_mid[:, None], cross[:, keep]]
    if np.any(bloat > 0):
        bl = np.broadcast_to(bloat, (n,))
        cols.append(np.diag(bl)[:, bl > 0])
    extra = np.hstack(cols)
    k = extra.shape[1]
    basis = np.hstack([V, extra])
    P = np.hstack([S.P, np.zeros((S.P.shape[0], k))])
    return Star(c, basis, P, S.d, np.append(lb, -np.ones(k)), np.append(ub, np.ones(k)))


def linear_reach(form: LinearOdeForm, S0, tc: TimeConfig) -> Flowpipe:
    A = np.asarray(form.A, dtype=float)
    c = np.asarray(form.c, dtype=float)
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(c))):
        raise NumericError("non-finite linear dynamics")
    S0 = as_star(S0)
    if S0.dim != form.dim:
        raise ValueError(f"initial set has dimension {S0.dim}, dynamics have {form.dim}")

    if tc.output_mode is OutputMode.FINAL_SET:
        Phi, g = _discretize(A, c, tc.t_f)
        final = S0.affine_map(Phi, g)
        return Flowpipe([(tc.t_f, tc.t_f)], [final], final, tc.output_mode, method="direct")

    ts = tc.grid()
    times, sets = [], []
    S = S0
    cache = {}
    for t_lo, t_hi in zip(ts[:-1], ts[1:]):
        h = float(t_hi - t_lo)
        key = round(h, 15)
        if key not in cache:
            cache[key] = _discretize(A, c, h)
        Phi, g = cache[key]
        # shift to the box center so the Taylor bloat scales with the set radius
        box = S.estimate_bounds()
        xc = box.center
        y_max = float(np.max(box.radius, initial=0.0))
        drift = float(np.max(np.abs(A @ xc + c), initial=0.0))
        bloat = interpolation_bloat(A, y_max, drift, h)
        times.append((float(t_lo), float(t_hi)))
        sets.append(_interval_star(S, Phi, g, bloat))
        S = S.affine_map(Phi, g)
    return Flowpipe(times, sets, S, tc.output_mode, method="direct")


# -- Jacobians -----------------------------------------------------------------

@dataclass(frozen=True)
class IntervalMatrix:
    lower: np.ndarray
    upper: np.ndarray

    @property
    def mid(self):
        return 0.5 * (self.lower + self.upper)

    @property
    def rad(self):
        return 0.5 * (self.upper - self.lower)

    def contains(self, M, tol=1e-12) -> bool:
        M = np.asarray(M, dtype=float)
        return bool(np.all(M >= self.lower - tol) and np.all(M <= self.upper + tol))


def network_jacobian(dyn: NodeDynamics, z) -> np.ndarray:
    z = np.asarray(z, dtype=float).ravel()
    J = np.eye(dyn.dim)
    x = z
    for lay in dyn.layers:
        pre = lay.W @ x + lay.b
        if lay.activation.is_identity:
            deriv = np.ones_like(pre)
            x = pre
        else:
            f, fp = SMOOTH_FUNCS[lay.activation]
            deriv = fp(pre)
            x = f(pre)
            if lay.passthrough:
                idx = list(lay.passthrough)
                deriv[idx] = 1.0
                x[idx] = pre[idx]
        J = deriv[:, None] * (lay.W @ J)
    if dyn.out_map is not None:
        J = dyn.out_map @ J
    if dyn.skip is not None:
        J = J + dyn.skip
    return J


def _deriv_range(act: Activation, lo, hi):
    """Range of act' over [lo, hi] for the bell-shaped tanh/sigmoid derivatives."""
    fp = SMOOTH_FUNCS[act][1]
    dlo, dhi = fp(lo), fp(hi)
    dmin = np.minimum(dlo, dhi)
    dmax = np.where((lo <= 0) & (hi >= 0), fp(0.0), np.maximum(dlo, dhi))
    return dmin, dmax


def _imul(am, ar, bm, br):
    """Product of intervals in midpoint-radius form."""
    return am * bm, np.abs(am) * br + ar * np.abs(bm) + ar * br


def interval_jacobian(dyn: NodeDynamics, box: Box) -> IntervalMatrix:
    xm = box.center.astype(float)
    xr = box.radius.astype(float)
    Jm = np.eye(dyn.dim)
    Jr = np.zeros((dyn.dim, dyn.dim))
    for lay in dyn.layers:
        pm = lay.W @ xm + lay.b
        pr = np.abs(lay.W) @ xr
        lo, hi = pm - pr, pm + pr
        WJm = lay.W @ Jm
        WJr = np.abs(lay.W) @ Jr
        if lay.activation.is_identity:
            dm, dr = np.ones_like(pm), np.zeros_like(pm)
            xm, xr = pm, pr
        else:
            f = SMOOTH_FUNCS[lay.activation][0]
            dmin, dmax = _deriv_range(lay.activation, lo, hi)
            dm, dr = 0.5 * (dmin + dmax), 0.5 * (dmax - dmin)
            ylo, yhi = f(lo), f(hi)
            ym, yr = 0.5 * (ylo + yhi), 0.5 * (yhi - ylo)
            if lay.passthrough:
                idx = list(lay.passthrough)
                dm[idx], dr[idx] = 1.0, 0.0
                ym[idx], yr[idx] = pm[idx], pr[idx]
            xm, xr = ym, yr
        Jm, Jr = _imul(dm[:, None], dr[:, None], WJm, WJr)
    if dyn.out_map is not None:
        Jm, Jr = dyn.out_map @ Jm, np.abs(dyn.out_map) @ Jr
    if dyn.skip is not None:
        Jm = Jm + dyn.skip
    # cover round-off in the floating-point interval arithmetic
    Jr = Jr + 1e-14 * (np.abs(Jm) + 1.0)
    return IntervalMatrix(Jm - Jr, Jm + Jr)


# -- nonlinear dynamics ----------------------------------------------------------

def _linear_interval_zono(G, Phi, drift_term, bloat):
    """Zonotope enclosing { y + tau ((Phi - I) y + drift_term) | y in <0, G>, tau in [0,1] }."""
    n = G.shape[0]
    D = Phi - np.eye(n)
    DG = D @ G
    cols = [G + 0.5 * DG, 0.5 * drift_term[:, None], 0.5 * DG]
    if bloat > 0:
        cols.append(bloat * np.eye(n))
    return Zonotope(0.5 * drift_term, np.hstack(cols))


def _enlarge(box: Box) -> Box:
    return Box.around(box.center, ENLARGE_FACTOR * box.radius + ENLARGE_FLOOR)


def _box_inside(inner: Box, outer: Box) -> bool:
    margin = 1e-12 * (1.0 + np.abs(outer.center))
    return bool(np.all(inner.lower > outer.lower + margin) and np.all(inner.upper < outer.upper - margin))


def _hull(a: Box, b: Box) -> Box:
    return Box(np.minimum(a.lower, b.lower), np.maximum(a.upper, b.upper))


def _nonlinear_step(dyn: NodeDynamics, R: Zonotope, h: float):
    z_star = R.center
    f_star = dyn(z_star)
    J = network_jacobian(dyn, z_star)
    if not (np.all(np.isfinite(f_star)) and np.all(np.isfinite(J))):
        raise NumericError("non-finite dynamics at the linearization point")
    G = R.generators
    y_max = float(np.max(np.sum(np.abs(G), axis=1), initial=0.0))
    Gamma_abs = _integral_abs(J, h)

    def enclose(u):
        Phi, g = _discretize(J, u, h)
        bloat = interpolation_bloat(J, y_max, float(np.max(np.abs(u))), h)
        return Phi, g, _linear_interval_zono(G, Phi, g, bloat)

    Phi, g, lin = enclose(f_star)
    omega = _enlarge(lin.translate(z_star).interval_hull())
    for attempt in range(MAX_REFINEMENTS + 1):
        JI = interval_jacobian(dyn, omega)
        dJm = JI.mid - J
        dJr = JI.rad
        vm = omega.center - z_star
        vr = omega.radius
        em = dJm @ vm
        er = np.abs(dJm) @ vr + dJr @ np.abs(vm) + dJr @ vr
        u = f_star + em
        Phi, g, lin = enclose(u)
        err_rad = Gamma_abs @ er
        err = Zonotope(np.zeros(R.dim), np.diag(err_rad)[:, err_rad > 0])
        interval_set = lin.minkowski_sum(err).translate(z_star)
        hull = interval_set.interval_hull()
        if _box_inside(hull, omega):
            point = Zonotope(z_star + g, np.hstack([Phi @ G, err.generators]))
            return point, interval_set, attempt
        omega = _enlarge(_hull(omega, hull))
    raise StepSizeError(
        f"enclosure check failed after {MAX_REFINEMENTS} refinements at step size {h}; "
        "use a smaller step")


def nonlinear_reach(dyn: NodeDynamics, Z0, tc: TimeConfig, max_order: float = DEFAULT_MAX_ORDER) -> Flowpipe:
    if isinstance(Z0, Star):
        Z0 = Z0.to_zonotope()
    elif isinstance(Z0, Box):
        Z0 = Z0.to_zonotope()
    if Z0.dim != dyn.dim:
        raise ValueError(f"initial set has dimension {Z0.dim}, dynamics have {dyn.dim}")
    ts = tc.grid()
    R = Z0
    times, sets, checks = [], [], []
    for t_lo, t_hi in zip(ts[:-1], ts[1:]):
        h = float(t_hi - t_lo)
        try:
            R_next, omega, refinements = _nonlinear_step(dyn, R, h)
        except StepSizeError as exc:
            raise StepSizeError(f"{exc} (t = {t_lo:.6g})") from None
        if not (np.all(np.isfinite(R_next.center)) and np.all(np.isfinite(R_next.generators))):
            raise NumericError(f"reach set became non-finite at t = {t_hi:.6g}")
        checks.append(True)
        if tc.output_mode is OutputMode.FLOWPIPE:
            times.append((float(t_lo), float(t_hi)))
            sets.append(omega.order_reduce(max_order))
        R = R_next.order_reduce(max_order)
    if tc.output_mode is OutputMode.FINAL_SET:
        times, sets = [(tc.t_f, tc.t_f)], [R]
    return Flowpipe(times, sets, R, tc.output_mode, checks, method="zono_f")


def node_reach(dyn: NodeDynamics, S0, tc: TimeConfig, max_order: float = DEFAULT_MAX_ORDER) -> Flowpipe:
    """Pick the direct star method for linear dynamics, zonotopes otherwise."""
    if dyn.is_linear:
        return linear_reach(collapse_linear(dyn), as_star(S0), tc)
    return nonlinear_reach(dyn, S0, tc, max_order)


__all__ = [
    "OutputMode", "TimeConfig", "NodeDynamics", "LinearOdeForm", "Flowpipe", "IntervalMatrix",
    "collapse_linear", "matrix_exponential", "linear_reach", "nonlinear_reach", "node_reach",
    "network_jacobian", "interval_jacobian", "interpolation_bloat",
    "NumericError", "StepSizeError", "DEFAULT_MAX_ORDER",
]
