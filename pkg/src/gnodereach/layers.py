"""Star-set reachability of fully-connected layers.

A layer computes ``y = act(W @ x + b)``.  The affine part maps a star
exactly; the activation is then processed neuron by neuron in ascending
index order.  ``approx_star`` keeps a single star by relaxing each unstable
neuron with one fresh predicate variable; ``exact_star`` splits on the sign of
piecewise-linear neurons and returns a list of stars whose union is the exact
image.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import EMPTY, Halfspace, Star

log = logging.getLogger(__name__)

DEFAULT_BRANCH_CAP = 10_000

# Relative padding applied to LP bounds and relaxation offsets so that
# floating-point round-off never cuts a true output point.
_PAD = 1e-10


class Activation(str, enum.Enum):
    LINEAR = "linear"
    RELU = "relu"
    LEAKY_RELU = "leaky_relu"
    TANH = "tanh"
    SIGMOID = "sigmoid"
    SATLIN = "satlin"
    # evaluated on logits: argmax-preserving, so reach and simulation both stop before it
    SOFTMAX = "softmax"

    @property
    def piecewise_linear(self) -> bool:
        return self in (Activation.LINEAR, Activation.RELU, Activation.LEAKY_RELU,
                        Activation.SATLIN, Activation.SOFTMAX)

    @property
    def smooth(self) -> bool:
        return self in (Activation.LINEAR, Activation.TANH, Activation.SIGMOID, Activation.SOFTMAX)

    @property
    def is_identity(self) -> bool:
        return self in (Activation.LINEAR, Activation.SOFTMAX)


class ReachMode(str, enum.Enum):
    APPROX_STAR = "approx_star"
    EXACT_STAR = "exact_star"

    @classmethod
    def parse(cls, value) -> "ReachMode":
        if isinstance(value, cls):
            return value
        value = str(value).replace("-", "_")
        aliases = {"approx": cls.APPROX_STAR, "exact": cls.EXACT_STAR}
        return aliases.get(value) or cls(value)


class UnsupportedModeError(ValueError):
    pass


class BranchLimitError(RuntimeError):
    pass


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def _tanh_prime(x):
    t = np.tanh(x)
    return 1.0 - t * t


def _sigmoid_prime(x):
    s = sigmoid(x)
    return s * (1.0 - s)


SMOOTH_FUNCS = {
    Activation.TANH: (np.tanh, _tanh_prime),
    Activation.SIGMOID: (sigmoid, _sigmoid_prime),
}


def apply_activation(act: Activation, x, slope: float = 0.01):
    x = np.asarray(x, dtype=float)
    if act.is_identity:
        return x
    if act is Activation.RELU:
        return np.maximum(x, 0.0)
    if act is Activation.LEAKY_RELU:
        return np.where(x >= 0, x, slope * x)
    if act is Activation.SATLIN:
        return np.clip(x, 0.0, 1.0)
    if act is Activation.TANH:
        return np.tanh(x)
    if act is Activation.SIGMOID:
        return sigmoid(x)
    raise ValueError(f"unknown activation {act}")


def activation_derivative(act: Activation, x):
    x = np.asarray(x, dtype=float)
    if act.is_identity:
        return np.ones_like(x)
    if act in SMOOTH_FUNCS:
        return SMOOTH_FUNCS[act][1](x)
    raise ValueError(f"{act.value} is not differentiable everywhere")


@dataclass(frozen=True)
class FcLayer:
    """Fully-connected layer ``act(W @ x + b)``.

    ``passthrough`` lists output neurons that skip the activation; unrolled
    closed loops use it to carry plant states through controller layers.
    """

    W: np.ndarray
    b: np.ndarray
    activation: Activation = Activation.LINEAR
    slope: float = 0.01
    passthrough: tuple = field(default=())

    def __post_init__(self):
        W = np.array(self.W, dtype=float, ndmin=2)
        b = np.array(self.b, dtype=float).ravel()
        if W.shape[0] != b.size:
            raise ValueError(f"W has {W.shape[0]} rows but b has {b.size} entries")
        act = Activation(self.activation)
        if act is Activation.LEAKY_RELU and not 0 < self.slope < 1:
            raise ValueError("leaky_relu slope must lie in (0, 1)")
        pt = tuple(sorted(int(i) for i in self.passthrough))
        if any(i < 0 or i >= b.size for i in pt):
            raise ValueError("passthrough index out of range")
        W.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "activation", act)
        object.__setattr__(self, "passthrough", pt)

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]

    def active_neurons(self) -> np.ndarray:
        if self.activation.is_identity:
            return np.zeros(0, dtype=int)
        mask = np.ones(self.out_dim, dtype=bool)
        mask[list(self.passthrough)] = False
        return np.flatnonzero(mask)

    def evaluate(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        pre = x @ self.W.T + self.b
        if self.activation.is_identity:
            return pre
        out = apply_activation(self.activation, pre, self.slope)
        if self.passthrough:
            idx = list(self.passthrough)
            out[..., idx] = pre[..., idx]
        return out


# -- single-neuron steps ------------------------------------------------------

def _pad(lo, hi):
    p = _PAD * (1.0 + max(abs(lo), abs(hi)))
    return lo - p, hi + p


def _new_variable(S: Star, i: int, rows_old, rows_new, rhs, var_lb, var_ub) -> Star:
    """Rewrite dimension ``i`` onto a fresh predicate variable.

    ``rows_old`` (k x m) and ``rows_new`` (k,) give constraints
    ``rows_old @ alpha + rows_new * a_new <= rhs``.
    """
    n, m = S.dim, S.n_pred
    V = np.zeros((n, m + 1))
    V[:, :m] = S.basis
    V[i, :] = 0.0
    V[i, m] = 1.0
    c = S.center.copy()
    c[i] = 0.0
    rows = np.hstack([np.atleast_2d(rows_old), np.asarray(rows_new, dtype=float).reshape(-1, 1)])
    P = np.vstack([np.hstack([S.P, np.zeros((S.P.shape[0], 1))]), rows])
    d = np.concatenate([S.d, np.asarray(rhs, dtype=float).ravel()])
    if S.has_pred_bounds:
        lb = np.append(S.pred_lb, var_lb)
        ub = np.append(S.pred_ub, var_ub)
        return Star(c, V, P, d, lb, ub)
    extra = np.zeros((2, m + 1))
    extra[0, m], extra[1, m] = -1.0, 1.0
    return Star(c, V, np.vstack([P, extra]), np.concatenate([d, [-var_lb, var_ub]]))


def _scale_dim(S: Star, i: int, factor: float, shift: float = 0.0) -> Star:
    V = S.basis.copy()
    c = S.center.copy()
    V[i] *= factor
    c[i] = c[i] * factor + shift
    return Star(c, V, S.P, S.d, S.pred_lb, S.pred_ub)


def _graph_hull_step(S: Star, i: int, xs, ys) -> Star:
    """Relax neuron i by the convex hull of a piecewise-linear graph.

    ``xs``/``ys`` are the graph's breakpoints on [lo, hi]; the hull of these
    points equals the hull of the graph.  Each hull edge becomes one linear
    constraint between the old coordinate x_i and the new variable.
    """
    pts = sorted(set(zip(map(float, xs), map(float, ys))))
    hull = _convex_hull_2d(pts)
    vi, ci = S.basis[i], S.center[i]
    rows_old, rows_new, rhs = [], [], []
    k = len(hull)
    for j in range(k):
        (x1, y1), (x2, y2) = hull[j], hull[(j + 1) % k]
        # counter-clockwise hull: interior lies left of each edge
        # edge normal (a, b) with a x + b y <= e
        a, b = (y2 - y1), -(x2 - x1)
        e = a * x1 + b * y1
        scale = max(abs(a), abs(b))
        if scale == 0:
            continue
        a, b, e = a / scale, b / scale, e / scale
        e += _PAD * (1.0 + abs(e))
        # x = vi @ alpha + ci
        rows_old.append(a * vi)
        rows_new.append(b)
        rhs.append(e - a * ci)
    y_lo, y_hi = min(p[1] for p in pts), max(p[1] for p in pts)
    return _new_variable(S, i, np.array(rows_old), rows_new, rhs, y_lo, y_hi)


def _convex_hull_2d(points):
    """Andrew's monotone chain, counter-clockwise, collinear points dropped."""
    pts = sorted(points)
    if len(pts) <= 2:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def relu_step_approx(S: Star, i: int, lo: float, hi: float) -> Star:
    if lo > hi:
        raise ValueError(f"neuron {i}: lower bound {lo} exceeds upper bound {hi}")
    if lo >= 0:
        return S
    if hi <= 0:
        return _scale_dim(S, i, 0.0)
    return _graph_hull_step(S, i, [lo, 0.0, hi], [0.0, 0.0, hi])


def leaky_relu_step_approx(S: Star, i: int, lo: float, hi: float, slope: float) -> Star:
    if lo > hi:
        raise ValueError(f"neuron {i}: lower bound {lo} exceeds upper bound {hi}")
    if lo >= 0:
        return S
    if hi <= 0:
        return _scale_dim(S, i, slope)
    return _graph_hull_step(S, i, [lo, 0.0, hi], [slope * lo, 0.0, hi])


def satlin_step_approx(S: Star, i: int, lo: float, hi: float) -> Star:
    if lo > hi:
        raise ValueError(f"neuron {i}: lower bound {lo} exceeds upper bound {hi}")
    if hi <= 0:
        return _scale_dim(S, i, 0.0)
    if lo >= 1:
        return _scale_dim(S, i, 0.0, 1.0)
    if lo >= 0 and hi <= 1:
        return S
    xs = [lo] + [k for k in (0.0, 1.0) if lo < k < hi] + [hi]
    return _graph_hull_step(S, i, xs, np.clip(xs, 0.0, 1.0))


def smooth_step_approx(S: Star, i: int, act, lo: float, hi: float) -> Star:
    """Relax a tanh/sigmoid neuron with secant and tangent lines.

    Both functions are convex below 0 and concave above.  On a one-sided
    interval the secant bounds one side and the endpoint tangents the other;
    across 0 two parallel lines with the smaller endpoint slope enclose the
    graph (the derivative is smallest at the endpoints).
    """
    act = Activation(act)
    f, fp = SMOOTH_FUNCS[act]
    if lo > hi:
        raise ValueError(f"neuron {i}: lower bound {lo} exceeds upper bound {hi}")
    flo, fhi = float(f(lo)), float(f(hi))
    if lo == hi:
        return _scale_dim(S, i, 0.0, flo)
    vi, ci = S.basis[i], S.center[i]
    if hi - lo <= 1e-9 * (1.0 + abs(lo)):
        pad = _PAD * (1.0 + abs(fhi))
        return _new_variable(S, i, np.zeros((0, S.n_pred)), [], [], flo - pad, fhi + pad)

    # constraints in the form  s*x - y <= e  (y below)  or  -s*x + y <= e (y above)
    lines_below, lines_above = [], []  # (slope, intercept) for y >= / y <= line
    secant = (fhi - flo) / (hi - lo)
    sec = (secant, flo - secant * lo)
    tan_lo = (float(fp(lo)), flo - float(fp(lo)) * lo)
    tan_hi = (float(fp(hi)), fhi - float(fp(hi)) * hi)
    if hi <= 0:
        lines_above.append(sec)
        lines_below += [tan_lo, tan_hi]
    elif lo >= 0:
        lines_below.append(sec)
        lines_above += [tan_lo, tan_hi]
    else:
        lam = min(float(fp(lo)), float(fp(hi)))
        lines_below.append((lam, flo - lam * lo))
        lines_above.append((lam, fhi - lam * hi))

    rows_old, rows_new, rhs = [], [], []
    for s, q in lines_below:
        # y >= s x + q  ->  s*(v@a) - y <= -q - s*c
        e = -q - s * ci
        rows_old.append(s * vi)
        rows_new.append(-1.0)
        rhs.append(e + _PAD * (1.0 + abs(q) + abs(s * ci)))
    for s, q in lines_above:
        # y <= s x + q  ->  -s*(v@a) + y <= q + s*c
        e = q + s * ci
        rows_old.append(-s * vi)
        rows_new.append(1.0)
        rhs.append(e + _PAD * (1.0 + abs(q) + abs(s * ci)))
    pad = _PAD * (1.0 + abs(flo) + abs(fhi))
    return _new_variable(S, i, np.array(rows_old), rows_new, rhs, flo - pad, fhi + pad)


# -- exact splitting -----------------------------------------------------------

def _split_dim(S: Star, i: int, threshold: float):
    """Return (part with x_i <= threshold, part with x_i >= threshold)."""
    e = np.zeros(S.dim)
    e[i] = 1.0
    below = S.intersect_halfspace(Halfspace(e, threshold))
    above = S.intersect_halfspace(Halfspace(-e, -threshold))
    return below, above


def _exact_step(S: Star, i: int, layer: FcLayer) -> list:
    est = S.estimate_bounds()
    lo_est, hi_est = est.lower[i], est.upper[i]
    act = layer.activation
    if act in (Activation.RELU, Activation.LEAKY_RELU):
        neg_factor = 0.0 if act is Activation.RELU else layer.slope
        if lo_est >= 0:
            return [S]
        if hi_est <= 0:
            return [_scale_dim(S, i, neg_factor)]
        lo, hi = S.bounds(i)
        if lo >= 0:
            return [S]
        if hi <= 0:
            return [_scale_dim(S, i, neg_factor)]
        below, above = _split_dim(S, i, 0.0)
        out = []
        if above is not EMPTY:
            out.append(above)
        if below is not EMPTY:
            out.append(_scale_dim(below, i, neg_factor))
        return out
    if act is Activation.SATLIN:
        lo, hi = S.bounds(i)
        pieces = []
        rest = S
        if lo < 0 < hi or hi <= 0:
            below, rest = _split_dim(S, i, 0.0) if lo < 0 < hi else (S, EMPTY)
            if below is not EMPTY:
                pieces.append(_scale_dim(below, i, 0.0))
        if rest is EMPTY:
            return pieces
        lo_r, hi_r = rest.bounds(i)
        if lo_r < 1 < hi_r:
            mid, top = _split_dim(rest, i, 1.0)
        elif hi_r <= 1:
            mid, top = rest, EMPTY
        else:
            mid, top = EMPTY, rest
        if mid is not EMPTY:
            pieces.append(mid)
        if top is not EMPTY:
            pieces.append(_scale_dim(top, i, 0.0, 1.0))
        return pieces
    raise UnsupportedModeError(f"exact_star does not support {act.value} activations")


# -- layer reach ---------------------------------------------------------------

def _approx_layer(Y: Star, layer: FcLayer, neurons) -> Star:
    act = layer.activation
    est = Y.estimate_bounds()
    # Relaxing one neuron never shrinks the projection onto the other
    # coordinates, so bounds taken on the affine image equal the bounds a
    # sequential recomputation would produce.
    bounds = {}
    for i in neurons:
        lo, hi = est.lower[i], est.upper[i]
        stable = (act in (Activation.RELU, Activation.LEAKY_RELU) and (lo >= 0 or hi <= 0)) or \
                 (act is Activation.SATLIN and (hi <= 0 or lo >= 1 or (lo >= 0 and hi <= 1)))
        if not stable:
            lo, hi = _pad(*(Y.bounds(i) if Y.P.shape[0] else (lo, hi)))
        bounds[i] = (lo, hi)
    S = Y
    for i in neurons:
        lo, hi = bounds[i]
        if act is Activation.RELU:
            S = relu_step_approx(S, i, lo, hi)
        elif act is Activation.LEAKY_RELU:
            S = leaky_relu_step_approx(S, i, lo, hi, layer.slope)
        elif act is Activation.SATLIN:
            S = satlin_step_approx(S, i, lo, hi)
        else:
            S = smooth_step_approx(S, i, act, lo, hi)
    return S


def fc_reach(layer: FcLayer, S, mode=ReachMode.APPROX_STAR, branch_cap: int = DEFAULT_BRANCH_CAP) -> list:
    mode = ReachMode.parse(mode)
    if S is EMPTY or S is None:
        return []
    if S.dim != layer.in_dim:
        raise ValueError(f"layer expects input dimension {layer.in_dim}, got {S.dim}")
    if mode is ReachMode.EXACT_STAR and not layer.activation.piecewise_linear:
        raise UnsupportedModeError(
            f"exact_star requires a piecewise-linear activation, got {layer.activation.value}")
    Y = S.affine_map(layer.W, layer.b)
    neurons = layer.active_neurons()
    if neurons.size == 0:
        return [Y]
    if mode is ReachMode.APPROX_STAR:
        return [_approx_layer(Y, layer, neurons)]

    stars = [Y]
    for i in neurons:
        nxt = []
        for s in stars:
            nxt.extend(_exact_step(s, int(i), layer))
            if len(nxt) > branch_cap:
                raise BranchLimitError(
                    f"exact_star produced more than {branch_cap} stars at neuron {i}")
        stars = nxt
    return stars


__all__ = [
    "Activation", "ReachMode", "FcLayer", "fc_reach", "relu_step_approx",
    "leaky_relu_step_approx", "satlin_step_approx", "smooth_step_approx",
    "apply_activation", "activation_derivative", "sigmoid",
    "UnsupportedModeError", "BranchLimitError", "DEFAULT_BRANCH_CAP",
]
