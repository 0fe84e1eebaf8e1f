"""Safety and classification-robustness checks on top of reach results.

Verdicts are three-valued: a reach set proves ``holds``; only a simulated
counterexample proves ``violated``; everything else is ``unknown``.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .geometry import EMPTY, Box, Halfspace, Star, as_star
from .gnode import GnodeModel, ReachResult, reach, simulate
from .layers import ReachMode
from .linprog import LpProblem, LpStatus, lp_solve
from .node import OutputMode


class Verdict(str, enum.Enum):
    HOLDS = "holds"
    VIOLATED = "violated"
    UNKNOWN = "unknown"
    MISCLASSIFIED = "misclassified"


@dataclass
class Witness:
    input: np.ndarray
    output: np.ndarray
    time: float | None = None

    def to_json(self) -> dict:
        return {"input": [float(v) for v in self.input], "output": [float(v) for v in self.output],
                "time": None if self.time is None else float(self.time)}


@dataclass
class SpecResult:
    verdict: Verdict
    witness: Witness | None = None
    bounds: list | None = None
    details: dict = field(default_factory=dict)
    times: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "verdict": self.verdict.value,
            "witness": None if self.witness is None else self.witness.to_json(),
            "bounds": self.bounds,
            "details": self.details,
            "times": self.times,
        }


# -- robustness -----------------------------------------------------------------

@dataclass(frozen=True)
class RobustnessQuery:
    model: GnodeModel
    nominal: np.ndarray
    epsilon: float
    mask: tuple | None = None
    label: int | None = None
    pixel_range: tuple | None = (0.0, 255.0)

    def __post_init__(self):
        z = np.asarray(self.nominal, dtype=float).ravel()
        if z.size != self.model.in_dim:
            raise ValueError(f"nominal input has {z.size} entries, model expects {self.model.in_dim}")
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be non-negative")
        if self.mask is not None:
            mask = tuple(int(i) for i in self.mask)
            if any(i < 0 or i >= z.size for i in mask):
                raise ValueError("mask index outside the input dimension")
            object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "nominal", z)

    def input_box(self) -> Box:
        z = self.nominal
        r = np.zeros_like(z)
        if self.mask is None:
            r[:] = self.epsilon
        else:
            r[list(self.mask)] = self.epsilon
        lo, hi = z - r, z + r
        if self.pixel_range is not None:
            lo = np.clip(lo, *self.pixel_range)
            hi = np.clip(hi, *self.pixel_range)
            lo = np.minimum(lo, z)
            hi = np.maximum(hi, z)
        return Box(lo, hi)


def _class_bounds(sets) -> tuple[np.ndarray, np.ndarray]:
    lo = np.full(sets[0].dim, np.inf)
    hi = np.full(sets[0].dim, -np.inf)
    for s in sets:
        b = s.box_bounds()
        lo = np.minimum(lo, b.lower)
        hi = np.maximum(hi, b.upper)
    return lo, hi


def _margin_lp(S: Star, pred: int, j: int) -> float:
    """min over S of y_pred - y_j."""
    row = S.basis[pred] - S.basis[j]
    base = S.center[pred] - S.center[j]
    lb, ub = S._var_bounds()
    out = lp_solve(LpProblem(row, S.P, S.d, lb, ub))
    if out.status is LpStatus.INFEASIBLE:
        return np.inf
    if out.status is LpStatus.UNBOUNDED:
        return -np.inf
    return float(base + out.value)


def _reach_candidates(result: ReachResult, model: GnodeModel, pred: int) -> list:
    """Inputs maximising each rival class on the output stars.

    Only meaningful when the output predicate extends the input predicate,
    i.e. no nonlinear NODE replaced the variables along the way.
    """
    R0 = result.input_set
    m0 = R0.n_pred
    if model.has_nonlinear_node:
        return []
    cands = []
    for S in result.output_sets:
        if S.n_pred < m0:
            continue
        lb, ub = S._var_bounds()
        for j in range(S.dim):
            if j == pred:
                continue
            out = lp_solve(LpProblem(S.basis[pred] - S.basis[j], S.P, S.d, lb, ub))
            if out.optimal:
                cands.append(R0.evaluate(out.x[:m0]))
    return cands


def check_robustness(q: RobustnessQuery, mode=ReachMode.APPROX_STAR, budget: int = 200,
                     seed: int = 0) -> SpecResult:
    t0 = time.perf_counter()
    model = q.model
    if model.out_dim < 2:
        raise ValueError("robustness needs at least two output classes")
    y_nom = simulate(model, q.nominal, n_samples=0).output
    pred = int(np.argmax(y_nom))
    details = {"predicted": pred, "epsilon": float(q.epsilon)}
    if q.label is not None and pred != int(q.label):
        details["label"] = int(q.label)
        return SpecResult(Verdict.MISCLASSIFIED, None, None, details,
                          {"total": time.perf_counter() - t0})

    box = q.input_box()
    R0 = Star.from_box(box.lower, box.upper)
    result = reach(model, R0, mode)
    t_reach = time.perf_counter() - t0
    lo, hi = _class_bounds(result.output_sets)
    bounds = [[float(a), float(b)] for a, b in zip(lo, hi)]
    rivals = [j for j in range(lo.size) if j != pred]
    separated = all(lo[pred] > hi[j] for j in rivals)
    if not separated:
        # per-branch difference LPs are tighter than comparing boxes
        separated = all(_margin_lp(S, pred, j) > 0 for S in result.output_sets for j in rivals)
        details["refined"] = True
    times = {"reach": t_reach}
    if separated:
        times["total"] = time.perf_counter() - t0
        return SpecResult(Verdict.HOLDS, None, bounds, details, times)

    def violates(y):
        return int(np.argmax(y)) != pred

    candidates = _reach_candidates(result, model, pred)
    w = falsify(model, R0, violates, budget=budget, seed=seed, candidates=candidates)
    times["total"] = time.perf_counter() - t0
    if w is not None:
        return SpecResult(Verdict.VIOLATED, w, bounds, details, times)
    return SpecResult(Verdict.UNKNOWN, None, bounds, details, times)


# -- falsification --------------------------------------------------------------

def _sample_inputs(R0: Star, n: int, rng: np.random.Generator, boundary_fraction: float) -> np.ndarray:
    return R0.sample(n, rng, boundary_fraction=boundary_fraction)


def falsify(model: GnodeModel, R0, spec, budget: int = 1000, seed: int = 0,
            boundary_fraction: float = 0.3, candidates=(), layer="output") -> Witness | None:
    """Search for an input whose simulation violates ``spec``.

    ``spec`` is either a Halfspace (the unsafe region, tested on the outputs
    of ``layer`` including every sampled time of flowpipe NODEs) or a
    predicate ``violates(output) -> bool`` on the final output.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    R0 = as_star(R0)
    rng = np.random.default_rng(seed)
    pts = [np.asarray(c, dtype=float) for c in candidates]
    pts = [np.clip(p, *_box_of(R0)) for p in pts]
    pts = [p for p in pts if R0.contains(p)]
    n_rand = max(0, budget - len(pts))
    if n_rand:
        pts.extend(_sample_inputs(R0, n_rand, rng, boundary_fraction))
    for x in pts[:budget]:
        w = _check_point(model, x, spec, layer)
        if w is not None:
            return w
    return None


def _box_of(S: Star):
    b = S.estimate_bounds()
    return b.lower, b.upper


def _check_point(model: GnodeModel, x, spec, layer) -> Witness | None:
    if isinstance(spec, Halfspace):
        return _halfspace_witness(model, x, spec, layer)
    y = simulate(model, x, n_samples=0).output
    return Witness(np.asarray(x, dtype=float), y) if spec(y) else None


def _layer_index(model: GnodeModel, layer) -> int:
    return len(model.layers) - 1 if layer == "output" else int(layer)


def _halfspace_witness(model: GnodeModel, x, h: Halfspace, layer) -> Witness | None:
    k = _layer_index(model, layer)
    sim = simulate(model, x, n_samples=101, dense=True)
    # trajectory-valued outputs when a flowpipe NODE sits at or before layer k
    fp_layers = [i for i, lay in enumerate(model.layers[:k + 1])
                 if hasattr(lay, "time") and lay.time.output_mode is OutputMode.FLOWPIPE]
    if fp_layers:
        i = fp_layers[-1]
        tr = sim.trajectories[i]

        def value(t):
            z = tr.sol.sol(t)
            return float(h.normal @ model.forward(z, i + 1, k + 1) - h.offset)

        vals = np.array([value(t) for t in tr.t])
        bad = np.flatnonzero(vals <= 0)
        if bad.size:
            j = int(bad[0])
            t_cross = float(tr.t[j])
            if j > 0 and vals[j] < 0:
                t_cross = brentq(value, tr.t[j - 1], tr.t[j], xtol=1e-12)
            y = model.forward(tr.sol.sol(t_cross), i + 1, k + 1)
            return Witness(np.asarray(x, dtype=float), np.asarray(y), t_cross)
        return None
    y = sim.layer_outputs[k]
    return Witness(np.asarray(x, dtype=float), y) if h.contains(y) else None


# -- safety ---------------------------------------------------------------------

def check_safety(result: ReachResult, unsafe: Halfspace, over="output", model: GnodeModel | None = None,
                 budget: int = 1000, seed: int = 0) -> SpecResult:
    """Unsafe region {x | a @ x <= b} against the sets of one layer (all time steps)."""
    t0 = time.perf_counter()
    sets = result.sets_at(over)
    k = len(result.layer_sets) - 1 if over == "output" else int(over)
    tags = result.layer_times[k]
    if sets and unsafe.dim != sets[0].dim:
        raise ValueError(f"unsafe region has dimension {unsafe.dim}, sets have {sets[0].dim}")
    hits = []
    for s, tag in zip(sets, tags):
        if s.intersect_halfspace(unsafe) is not EMPTY:
            hits.append(None if tag is None else [float(tag[0]), float(tag[1])])
    details = {"n_sets": len(sets), "n_intersecting": len(hits)}
    if not hits:
        return SpecResult(Verdict.HOLDS, None, None, details, {"total": time.perf_counter() - t0})
    details["intersecting_times"] = hits
    if model is not None:
        w = falsify(model, result.input_set, unsafe, budget=budget, seed=seed, layer=over)
        if w is not None:
            return SpecResult(Verdict.VIOLATED, w, None, details, {"total": time.perf_counter() - t0})
    return SpecResult(Verdict.UNKNOWN, None, None, details, {"total": time.perf_counter() - t0})


__all__ = [
    "Verdict", "Witness", "SpecResult", "RobustnessQuery", "check_robustness", "check_safety", "falsify",
]
