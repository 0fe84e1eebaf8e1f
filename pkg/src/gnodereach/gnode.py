"""General neural ODE models: layer sequences mixing FC layers and NODE blocks.

``reach`` walks the layers in order, propagating every set in the current
list through the next layer (FC layers on stars, NODE layers through the
direct or zonotope method), which is the layer-by-layer construction of the
output reachable set.  ``simulate`` is the concrete counterpart used as the
soundness oracle.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .geometry import Box, Star, Zonotope, as_star, outer_box
from .layers import DEFAULT_BRANCH_CAP, Activation, FcLayer, ReachMode, fc_reach
from .node import DEFAULT_MAX_ORDER, Flowpipe, NodeDynamics, OutputMode, TimeConfig, node_reach

log = logging.getLogger(__name__)

SIM_RTOL = 1e-10
SIM_ATOL = 1e-10


class ReachError(RuntimeError):
    def __init__(self, layer_index: int, cause: Exception):
        self.layer_index = layer_index
        self.cause = cause
        super().__init__(f"layer {layer_index}: {type(cause).__name__}: {cause}")


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class NodeLayer:
    dynamics: NodeDynamics
    time: TimeConfig = field(default_factory=TimeConfig)

    @property
    def in_dim(self) -> int:
        return self.dynamics.dim

    @property
    def out_dim(self) -> int:
        return self.dynamics.dim


class GnodeModel:
    """Ordered FC and NODE layers with a checked dimension chain.

    A model without NODE layers is allowed (plain networks, closed-loop
    controllers); ``is_gnode`` reports whether it satisfies the GNODE layer
    counts.
    """

    def __init__(self, layers, name: str = "model"):
        layers = tuple(layers)
        if not layers:
            raise ValueError("a model needs at least one layer")
        for k, lay in enumerate(layers):
            if not isinstance(lay, (FcLayer, NodeLayer)):
                raise TypeError(f"layer {k} is a {type(lay).__name__}, expected FcLayer or NodeLayer")
        for k in range(1, len(layers)):
            if layers[k].in_dim != layers[k - 1].out_dim:
                raise ValueError(f"layer {k} expects {layers[k].in_dim} inputs but layer {k - 1} "
                                 f"produces {layers[k - 1].out_dim}")
        self.layers = layers
        self.name = name

    def __len__(self):
        return len(self.layers)

    def __repr__(self):
        return f"GnodeModel({self.name!r}, N={len(self)}, N_O={self.n_node}, N_D={self.n_fc})"

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def n_node(self) -> int:
        return sum(isinstance(l, NodeLayer) for l in self.layers)

    @property
    def n_fc(self) -> int:
        return len(self.layers) - self.n_node

    @property
    def is_gnode(self) -> bool:
        n = len(self.layers)
        return 1 <= self.n_node <= n and 0 <= self.n_fc < n

    @property
    def has_nonlinear_node(self) -> bool:
        return any(isinstance(l, NodeLayer) and not l.dynamics.is_linear for l in self.layers)

    def forward(self, x, start: int = 0, stop: int | None = None) -> np.ndarray:
        """Evaluate layers[start:stop] on x (NODEs integrated to their t_f)."""
        x = np.asarray(x, dtype=float)
        for lay in self.layers[start:stop]:
            if isinstance(lay, FcLayer):
                x = lay.evaluate(x)
            else:
                if x.ndim == 2:
                    x = np.array([_integrate(lay, xi).y[:, -1] for xi in x])
                else:
                    x = _integrate(lay, x).y[:, -1]
        return x


@dataclass
class ReachResult:
    input_set: Star
    layer_sets: list
    layer_times: list
    flowpipes: dict
    wall_times: list
    methods: list
    mode: ReachMode

    @property
    def output_sets(self) -> list:
        return self.layer_sets[-1]

    def sets_at(self, layer: int | str = "output") -> list:
        return self.output_sets if layer == "output" else self.layer_sets[int(layer)]

    def output_box(self, exact: bool = True) -> Box:
        return union_box(self.output_sets, exact)

    def contains(self, y, layer="output") -> bool:
        return any(s.contains(y) for s in self.sets_at(layer))


def union_box(sets, exact: bool = True) -> Box:
    boxes = [(s.box_bounds() if exact and isinstance(s, Star) else outer_box(s)) for s in sets]
    return Box(np.min([b.lower for b in boxes], axis=0), np.max([b.upper for b in boxes], axis=0))


def reach(model: GnodeModel, R0, mode=ReachMode.APPROX_STAR, branch_cap: int = DEFAULT_BRANCH_CAP,
          max_order: float = DEFAULT_MAX_ORDER) -> ReachResult:
    mode = ReachMode.parse(mode)
    R0 = as_star(R0)
    if R0.dim != model.in_dim:
        raise ValueError(f"input set has dimension {R0.dim}, model expects {model.in_dim}")
    items = [(R0, None)]
    layer_sets, layer_times, walls, methods = [], [], [], []
    flowpipes = {}
    for k, lay in enumerate(model.layers):
        t0 = time.perf_counter()
        nxt = []
        try:
            if isinstance(lay, FcLayer):
                for s, tag in items:
                    nxt.extend((o, tag) for o in fc_reach(lay, s, mode, branch_cap))
                    if len(nxt) > branch_cap:
                        raise RuntimeError(f"more than {branch_cap} sets after layer {k}")
                methods.append(mode.value)
            else:
                fps = []
                for s, tag in items:
                    fp = node_reach(lay.dynamics, s, lay.time, max_order)
                    fps.append(fp)
                    if lay.time.output_mode is OutputMode.FINAL_SET:
                        nxt.append((as_star(fp.final), tag))
                    else:
                        nxt.extend((as_star(st), t) for st, t in zip(fp.sets, fp.times))
                flowpipes[k] = fps
                methods.append(fps[0].method if fps else "")
        except Exception as exc:  # noqa: BLE001 - re-raised with the layer index
            raise ReachError(k, exc) from exc
        items = nxt
        layer_sets.append([s for s, _ in items])
        layer_times.append([t for _, t in items])
        walls.append(time.perf_counter() - t0)
        log.debug("layer %d (%s): %d sets in %.3fs", k, methods[-1], len(items), walls[-1])
    return ReachResult(R0, layer_sets, layer_times, flowpipes, walls, methods, mode)


# -- simulation ----------------------------------------------------------------

def _integrate(lay: NodeLayer, z0, t_eval=None, dense=False):
    dyn = lay.dynamics
    sol = solve_ivp(lambda t, z: dyn(z), (0.0, lay.time.t_f), np.asarray(z0, dtype=float),
                    method="RK45", rtol=SIM_RTOL, atol=SIM_ATOL, t_eval=t_eval, dense_output=dense)
    if sol.status != 0:
        raise SimulationError(f"integration failed: {sol.message}")
    return sol


@dataclass
class Trajectory:
    layer_index: int
    t: np.ndarray
    z: np.ndarray  # (len(t), n)
    sol: object = None

    def at(self, t):
        return self.sol.sol(t).T if self.sol is not None else None


@dataclass
class SimResult:
    output: np.ndarray
    layer_outputs: list
    trajectories: dict


def simulate(model: GnodeModel, x0, n_samples: int = 21, dense: bool = False) -> SimResult:
    """Concrete evaluation: FC layers exactly, NODEs by RK45 at 1e-10 tolerances.

    Each NODE trajectory is recorded at the solver's own steps plus
    ``n_samples`` evenly spaced times.
    """
    x = np.asarray(x0, dtype=float).ravel()
    if not np.all(np.isfinite(x)):
        raise ValueError("initial point must be finite")
    if x.size != model.in_dim:
        raise ValueError(f"point has dimension {x.size}, model expects {model.in_dim}")
    outs, trajs = [], {}
    for k, lay in enumerate(model.layers):
        if isinstance(lay, FcLayer):
            x = lay.evaluate(x)
        else:
            sol = _integrate(lay, x, dense=True)
            grid = np.linspace(0.0, lay.time.t_f, n_samples) if n_samples else np.zeros(0)
            ts = np.union1d(sol.t, grid)
            zs = sol.sol(ts).T
            zs[-1] = sol.y[:, -1]
            zs[0] = x
            trajs[k] = Trajectory(k, ts, zs, sol if dense else None)
            x = sol.y[:, -1].copy()
        outs.append(x)
    return SimResult(x, outs, trajs)


def simulate_batch(model: GnodeModel, X, n_samples: int = 21) -> list:
    return [simulate(model, x, n_samples) for x in np.atleast_2d(X)]


# -- closed loops ------------------------------------------------------------------

@dataclass(frozen=True)
class NncsSpec:
    """Controller + plant feedback loop.

    The plant state is laid out as ``[x; u]``: ``n_x`` physical states
    followed by the controller outputs, which the plant dynamics must hold
    constant over each control period.  The controller reads
    ``ctrl_matrix @ x + ctrl_offset``.
    """

    controller: GnodeModel
    plant: NodeDynamics
    period: TimeConfig
    cp: int
    ctrl_matrix: np.ndarray
    ctrl_offset: np.ndarray | None = None

    def __post_init__(self):
        if self.cp < 1:
            raise ValueError("cp must be at least 1")
        if self.controller.n_node:
            raise ValueError("the controller must consist of NN layers only")
        M = np.array(self.ctrl_matrix, dtype=float, ndmin=2)
        n_u = self.controller.out_dim
        n_x = self.plant.dim - n_u
        if n_x < 1:
            raise ValueError("plant state must include the controller outputs plus at least one state")
        if M.shape != (self.controller.in_dim, n_x):
            raise ValueError(f"ctrl_matrix must have shape {(self.controller.in_dim, n_x)}, got {M.shape}")
        off = np.zeros(M.shape[0]) if self.ctrl_offset is None else np.asarray(self.ctrl_offset, dtype=float).ravel()
        if off.size != M.shape[0]:
            raise ValueError("ctrl_offset length must match the controller input dimension")
        if self.plant.is_linear:
            from .node import collapse_linear
            form = collapse_linear(self.plant)
            if np.any(form.A[n_x:]) or np.any(form.c[n_x:]):
                raise ValueError("plant dynamics must hold the control inputs constant")
        object.__setattr__(self, "ctrl_matrix", M)
        object.__setattr__(self, "ctrl_offset", off)

    @classmethod
    def from_indices(cls, controller, plant, period, cp, state_indices, ctrl_offset=None):
        n_x = plant.dim - controller.out_dim
        M = np.zeros((len(state_indices), n_x))
        M[np.arange(len(state_indices)), list(state_indices)] = 1.0
        return cls(controller, plant, period, cp, M, ctrl_offset)

    @property
    def n_x(self) -> int:
        return self.plant.dim - self.controller.out_dim

    @property
    def n_u(self) -> int:
        return self.controller.out_dim


def _selector(spec: NncsSpec, first: bool) -> FcLayer:
    n_x, n_u = spec.n_x, spec.n_u
    k = spec.ctrl_matrix.shape[0]
    n_in = n_x if first else n_x + n_u
    W = np.zeros((n_x + k, n_in))
    W[:n_x, :n_x] = np.eye(n_x)
    W[n_x:, :n_x] = spec.ctrl_matrix
    b = np.concatenate([np.zeros(n_x), spec.ctrl_offset])
    return FcLayer(W, b, Activation.LINEAR)


def _lift(spec: NncsSpec, lay: FcLayer) -> FcLayer:
    n_x = spec.n_x
    W = np.zeros((n_x + lay.out_dim, n_x + lay.in_dim))
    W[:n_x, :n_x] = np.eye(n_x)
    W[n_x:, n_x:] = lay.W
    b = np.concatenate([np.zeros(n_x), lay.b])
    pt = tuple(range(n_x)) + tuple(n_x + i for i in lay.passthrough)
    if lay.activation.is_identity:
        pt = ()
    return FcLayer(W, b, lay.activation, lay.slope, pt)


def control_step_layers(spec: NncsSpec, first: bool) -> list:
    plant_time = TimeConfig(spec.period.t_f, spec.period.step, OutputMode.FINAL_SET)
    return ([_selector(spec, first)] + [_lift(spec, l) for l in spec.controller.layers]
            + [NodeLayer(spec.plant, plant_time)])


def unroll_nncs(spec: NncsSpec, name: str = "nncs") -> GnodeModel:
    layers = []
    for k in range(spec.cp):
        layers.extend(control_step_layers(spec, first=(k == 0)))
    return GnodeModel(layers, name=f"{name}_cp{spec.cp}")


def closed_loop_reach(spec: NncsSpec, X0, mode=ReachMode.APPROX_STAR) -> list:
    """Control period by control period; returns the plant-state sets after each period."""
    sets = [as_star(X0)]
    out = []
    for k in range(spec.cp):
        step_model = GnodeModel(control_step_layers(spec, first=(k == 0)), name=f"step{k}")
        nxt = []
        for s in sets:
            nxt.extend(reach(step_model, s, mode).output_sets)
        sets = nxt
        out.append(sets)
    return out


__all__ = [
    "NodeLayer", "GnodeModel", "ReachResult", "ReachError", "SimulationError", "reach",
    "simulate", "simulate_batch", "SimResult", "Trajectory", "NncsSpec", "unroll_nncs",
    "closed_loop_reach", "control_step_layers", "union_box",
]
