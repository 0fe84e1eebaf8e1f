"""JSON formats for models, sets and specs, plus seeded benchmark fixtures.

Model weights are written as decimal strings with 17 significant digits so
every float64 survives a save/load cycle unchanged.  Documents are emitted in
one canonical layout (sorted keys, one-space indent, trailing newline), which
makes byte comparison meaningful.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .geometry import Halfspace, Star, set_from_json, set_to_json
from .gnode import GnodeModel, NncsSpec, NodeLayer, unroll_nncs
from .layers import Activation, FcLayer
from .node import NodeDynamics, OutputMode, TimeConfig

FORMAT_VERSION = 1
MODEL_SUFFIX = ".gnode.json"
SET_SUFFIX = ".set.json"
SPEC_SUFFIX = ".spec.json"


class ModelFormatError(ValueError):
    """Schema violation; ``pointer`` is a JSON pointer to the offending field."""

    def __init__(self, pointer: str, message: str):
        self.pointer = pointer
        super().__init__(f"{pointer or '/'}: {message}")


def _num(x: float) -> str:
    return format(float(x), ".17g")


def _vec(v) -> list:
    return [_num(x) for x in np.asarray(v, dtype=float).ravel()]


def _mat(M) -> list:
    return [_vec(row) for row in np.asarray(M, dtype=float)]


def canonical_dumps(doc) -> str:
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


# -- model -> document -------------------------------------------------------------

def _fc_doc(lay: FcLayer) -> dict:
    out = {"kind": "fc", "activation": lay.activation.value, "W": _mat(lay.W), "b": _vec(lay.b)}
    if lay.activation is Activation.LEAKY_RELU:
        out["slope"] = _num(lay.slope)
    if lay.passthrough:
        out["passthrough"] = [int(i) for i in lay.passthrough]
    return out


def _node_doc(lay: NodeLayer) -> dict:
    dyn = lay.dynamics
    out = {
        "kind": "node",
        "dynamics": [_fc_doc(l) for l in dyn.layers],
        "t_f": _num(lay.time.t_f),
        "step": _num(lay.time.step),
        "output_mode": lay.time.output_mode.value,
    }
    if dyn.skip is not None:
        out["skip"] = _mat(dyn.skip)
    if dyn.out_map is not None:
        out["out_map"] = _mat(dyn.out_map)
    return out


def model_to_doc(model: GnodeModel, extra_metadata: dict | None = None) -> dict:
    meta = {"name": model.name, "input_dim": model.in_dim, "output_dim": model.out_dim}
    if extra_metadata:
        meta.update(extra_metadata)
    layers = [_fc_doc(l) if isinstance(l, FcLayer) else _node_doc(l) for l in model.layers]
    return {"format_version": FORMAT_VERSION, "metadata": meta, "layers": layers}


# -- document -> model ----------------------------------------------------------------

def _get(doc: dict, key: str, ptr: str, required=True, default=None):
    if not isinstance(doc, dict):
        raise ModelFormatError(ptr, "expected an object")
    if key not in doc:
        if required:
            raise ModelFormatError(f"{ptr}/{key}", "missing required field")
        return default
    return doc[key]


def _parse_num(x, ptr: str) -> float:
    if isinstance(x, bool) or not isinstance(x, (str, int, float)):
        raise ModelFormatError(ptr, f"expected a number or decimal string, got {type(x).__name__}")
    try:
        v = float(x)
    except ValueError:
        raise ModelFormatError(ptr, f"not a number: {x!r}") from None
    if not np.isfinite(v):
        raise ModelFormatError(ptr, "non-finite value")
    return v


def _parse_vec(v, ptr: str) -> np.ndarray:
    if not isinstance(v, list):
        raise ModelFormatError(ptr, "expected an array")
    return np.array([_parse_num(x, f"{ptr}/{i}") for i, x in enumerate(v)], dtype=float)


def _parse_mat(M, ptr: str) -> np.ndarray:
    if not isinstance(M, list) or not M:
        raise ModelFormatError(ptr, "expected a non-empty array of rows")
    rows = [_parse_vec(r, f"{ptr}/{i}") for i, r in enumerate(M)]
    width = {r.size for r in rows}
    if len(width) != 1:
        raise ModelFormatError(ptr, "rows have different lengths")
    return np.vstack(rows)


def _parse_fc(doc: dict, ptr: str) -> FcLayer:
    kind = _get(doc, "kind", ptr)
    if kind != "fc":
        raise ModelFormatError(f"{ptr}/kind", f"expected 'fc', got {kind!r}")
    act_name = _get(doc, "activation", ptr)
    try:
        act = Activation(act_name)
    except ValueError:
        raise ModelFormatError(f"{ptr}/activation", f"unknown activation {act_name!r}") from None
    W = _parse_mat(_get(doc, "W", ptr), f"{ptr}/W")
    b = _parse_vec(_get(doc, "b", ptr), f"{ptr}/b")
    if W.shape[0] != b.size:
        raise ModelFormatError(f"{ptr}/b", f"W has {W.shape[0]} rows but b has {b.size} entries")
    slope = _parse_num(_get(doc, "slope", ptr, False, 0.01), f"{ptr}/slope")
    pt = _get(doc, "passthrough", ptr, False, [])
    if not isinstance(pt, list) or not all(isinstance(i, int) and 0 <= i < b.size for i in pt):
        raise ModelFormatError(f"{ptr}/passthrough", "expected neuron indices within the layer")
    return FcLayer(W, b, act, slope, tuple(pt))


def _parse_node(doc: dict, ptr: str) -> NodeLayer:
    dyn_doc = _get(doc, "dynamics", ptr)
    if not isinstance(dyn_doc, list) or not dyn_doc:
        raise ModelFormatError(f"{ptr}/dynamics", "expected a non-empty layer array")
    layers = [_parse_fc(d, f"{ptr}/dynamics/{i}") for i, d in enumerate(dyn_doc)]
    skip = _get(doc, "skip", ptr, False)
    out_map = _get(doc, "out_map", ptr, False)
    try:
        dyn = NodeDynamics(layers,
                           None if skip is None else _parse_mat(skip, f"{ptr}/skip"),
                           None if out_map is None else _parse_mat(out_map, f"{ptr}/out_map"))
    except ValueError as exc:
        raise ModelFormatError(f"{ptr}/dynamics", str(exc)) from None
    t_f = _parse_num(_get(doc, "t_f", ptr), f"{ptr}/t_f")
    step = _get(doc, "step", ptr, False)
    mode = _get(doc, "output_mode", ptr, False, "final_set")
    try:
        tc = TimeConfig(t_f, None if step is None else _parse_num(step, f"{ptr}/step"), OutputMode(mode))
    except ValueError as exc:
        raise ModelFormatError(f"{ptr}/t_f", str(exc)) from None
    return NodeLayer(dyn, tc)


def model_from_doc(doc: dict) -> GnodeModel:
    version = _get(doc, "format_version", "")
    if version != FORMAT_VERSION:
        raise ModelFormatError("/format_version", f"unsupported format version {version!r}")
    meta = _get(doc, "metadata", "", False, {})
    layer_docs = _get(doc, "layers", "")
    if not isinstance(layer_docs, list) or not layer_docs:
        raise ModelFormatError("/layers", "expected a non-empty layer array")
    layers = []
    for i, ld in enumerate(layer_docs):
        ptr = f"/layers/{i}"
        kind = _get(ld, "kind", ptr)
        if kind == "fc":
            layers.append(_parse_fc(ld, ptr))
        elif kind == "node":
            layers.append(_parse_node(ld, ptr))
        else:
            raise ModelFormatError(f"{ptr}/kind", f"unknown layer kind {kind!r}")
        if i and layers[i].in_dim != layers[i - 1].out_dim:
            raise ModelFormatError(ptr, f"layer {i} expects {layers[i].in_dim} inputs but layer {i - 1} "
                                        f"produces {layers[i - 1].out_dim}")
    model = GnodeModel(layers, name=str(meta.get("name", "model")))
    for key, val in (("input_dim", model.in_dim), ("output_dim", model.out_dim)):
        if key in meta and meta[key] != val:
            raise ModelFormatError(f"/metadata/{key}", f"declared {meta[key]}, layers give {val}")
    return model


def dumps_model(model: GnodeModel, extra_metadata: dict | None = None) -> str:
    return canonical_dumps(model_to_doc(model, extra_metadata))


def save_model(model: GnodeModel, path, extra_metadata: dict | None = None) -> None:
    Path(path).write_text(dumps_model(model, extra_metadata))


def load_model(path) -> GnodeModel:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelFormatError("", f"invalid JSON: {exc}") from None
    return model_from_doc(doc)


# -- sets and specs --------------------------------------------------------------

def save_set(s, path) -> None:
    Path(path).write_text(canonical_dumps(set_to_json(s)))


def load_set(path):
    doc = json.loads(Path(path).read_text())
    try:
        return set_from_json(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError("", f"invalid set document: {exc}") from None


def load_spec(path) -> dict:
    """Spec documents.

    ``{"type": "safety", "normal": [...], "offset": b, "over": "output"|k}`` or
    ``{"type": "robustness", "nominal": [...], "epsilon": e, "mask": [...]?,
    "label": k?, "pixel_range": [lo, hi]|null}``.
    """
    doc = json.loads(Path(path).read_text())
    kind = _get(doc, "type", "")
    if kind == "safety":
        h = Halfspace(_parse_vec(_get(doc, "normal", ""), "/normal"), _parse_num(_get(doc, "offset", ""), "/offset"))
        return {"type": "safety", "halfspace": h, "over": doc.get("over", "output")}
    if kind == "robustness":
        pr = doc.get("pixel_range", [0, 255])
        return {
            "type": "robustness",
            "nominal": _parse_vec(_get(doc, "nominal", ""), "/nominal"),
            "epsilon": _parse_num(_get(doc, "epsilon", ""), "/epsilon"),
            "mask": doc.get("mask"),
            "label": doc.get("label"),
            "pixel_range": None if pr is None else tuple(float(x) for x in pr),
        }
    raise ModelFormatError("/type", f"unknown spec type {kind!r}")


def save_spec(doc: dict, path) -> None:
    Path(path).write_text(canonical_dumps(doc))


# -- fixtures -----------------------------------------------------------------

def _glorot(rng: np.random.Generator, n_out: int, n_in: int, scale: float = 0.5) -> np.ndarray:
    lim = np.sqrt(6.0 / (n_in + n_out))
    return scale * rng.uniform(-lim, lim, size=(n_out, n_in))


def _fc(rng, n_in, n_out, act="linear", **kw) -> FcLayer:
    W = _glorot(rng, n_out, n_in)
    b = 0.5 * _glorot(rng, n_out, 1).ravel()
    return FcLayer(W, b, Activation(act), **kw)


def _chain(rng, n_in, spec) -> list:
    """spec: list of (activation, width)."""
    out = []
    for act, width in spec:
        out.append(_fc(rng, n_in, width, act))
        n_in = width
    return out


RANDOM_GNODE_SIZES = {
    # name: (input, first FC width, NODE1 hidden, NODE state, NODE2 state, output)
    "XS": (1, 2, 2, 2, 2, 1),
    "S": (2, 3, 5, 3, 3, 2),
    "M": (2, 4, 8, 4, 4, 2),
    "L": (3, 4, 8, 4, 4, 3),
    "XL": (3, 5, 10, 5, 5, 3),
    "XXL": (4, 5, 10, 5, 5, 4),
}

FIXTURE_NAMES = (
    "identity", "spiral_linear", "spiral_nonlinear", "damped_oscillator", "fpa", "cartpole",
    "acc_3rd_order", "fnode_s", "fnode_m", "fnode_l", "random_gnode",
)


def _spiral(rng, nonlinear: bool, params) -> GnodeModel:
    hidden = "tanh" if nonlinear else "linear"
    dyn = NodeDynamics(_chain(rng, 2, [(hidden, 10), ("linear", 2)]))
    tc = TimeConfig(params.get("t_f", 10.0), params.get("step"), params.get("output_mode", "flowpipe"))
    return GnodeModel([NodeLayer(dyn, tc)], name="spiral_nonlinear" if nonlinear else "spiral_linear")


def _damped_oscillator(rng, params) -> GnodeModel:
    n = 2 + int(params.get("n_aug", 0))
    head = _fc(rng, 2, n)
    dyn = NodeDynamics(_chain(rng, n, [("linear", 20), ("linear", 20), ("linear", n)]))
    tc = TimeConfig(params.get("t_f", 1.0), params.get("step"), params.get("output_mode", "final_set"))
    tail = _fc(rng, n, 2)
    return GnodeModel([head, NodeLayer(dyn, tc), tail], name=f"damped_oscillator_aug{n - 2}")


def _fpa(rng, params) -> GnodeModel:
    # continuous-time recurrent form  z' = -z + W2 tanh(W1 z + b1) + b2
    n = int(params.get("n", 5))
    dyn = NodeDynamics(_chain(rng, n, [("tanh", n), ("linear", n)]), skip=-np.eye(n))
    tc = TimeConfig(params.get("t_f", 0.5), params.get("step", 0.01), params.get("output_mode", "flowpipe"))
    return GnodeModel([NodeLayer(dyn, tc)], name="fpa")


def _cartpole(rng, params) -> GnodeModel:
    dyn = NodeDynamics(_chain(rng, 4, [("tanh", 16), ("linear", 4)]))
    tc = TimeConfig(params.get("t_f", 0.1), params.get("step", 1e-3), params.get("output_mode", "flowpipe"))
    return GnodeModel([NodeLayer(dyn, tc)], name="cartpole")


def _fnode(rng, size: str) -> GnodeModel:
    n_in = 784
    if size == "s":
        head, node_spec, n_node = [("relu", 64), ("relu", 10)], [("linear", 10)], 10
    elif size == "m":
        head, node_spec, n_node = [("relu", 64), ("relu", 32), ("linear", 16)], [("linear", 10), ("linear", 16)], 16
    else:
        head = [("relu", 64)] + [("relu", 32)] * 3 + [("linear", 16)]
        node_spec, n_node = [("linear", 10)] * 3 + [("linear", 16)], 16
    layers = _chain(rng, n_in, head)
    # inputs are raw pixels in [0, 255]; fold the 1/255 normalisation into the first layer
    first = layers[0]
    layers[0] = FcLayer(first.W / 255.0, first.b, first.activation)
    dyn = NodeDynamics(_chain(rng, n_node, node_spec))
    out = _fc(rng, n_node, 10, "softmax")
    return GnodeModel(layers + [NodeLayer(dyn, TimeConfig(1.0)), out], name=f"fnode_{size}")


def _random_gnode(rng, size: str, params) -> GnodeModel:
    if size not in RANDOM_GNODE_SIZES:
        raise ValueError(f"unknown random GNODE size {size!r}; choose from {sorted(RANDOM_GNODE_SIZES)}")
    n_in, w1, hid, n1, n2, n_out = RANDOM_GNODE_SIZES[size]
    tc = TimeConfig(params.get("t_f", 1.0), params.get("step", 0.01), params.get("output_mode", "final_set"))
    l1 = _fc(rng, n_in, w1, "tanh")
    node1 = NodeDynamics(_chain(rng, n1, [("tanh", hid), ("tanh", n1)]))
    l2 = _fc(rng, n1, n2, "tanh")
    node2 = NodeDynamics(_chain(rng, n2, [("tanh", n2)]))
    l3 = _fc(rng, n2, n_out, "tanh")
    return GnodeModel([l1, NodeLayer(node1, tc), l2, NodeLayer(node2, tc), l3], name=f"random_gnode_{size}")


# ACC plant state: [x_lead, v_lead, g_lead, x_ego, v_ego, g_ego, a_ego]
ACC_A_LEAD = -2.0
ACC_PERIOD = 0.1
ACC_V_SET = 30.0
ACC_T_GAP = 1.4
ACC_INITIAL = ([90.0, 32.0, 0.0, 10.0, 30.0, 0.0], [110.0, 32.2, 0.0, 11.0, 30.2, 0.0])


def acc_plant(rng, nonlinear: bool) -> NodeDynamics:
    """Third-order plant: kinematic chains with learned jerk  y' = g(z_acc)."""
    spec = [("tanh", 10), ("tanh", 4)] if nonlinear else [("linear", 20), ("linear", 4)]
    core = _chain(rng, 4, spec)
    first = core[0]
    # z_acc = [g_lead, g_ego, a_lead, a_ego]; a_lead is constant and folds into the bias
    W = np.zeros((first.out_dim, 7))
    W[:, 2] = first.W[:, 0]
    W[:, 5] = first.W[:, 1]
    W[:, 6] = first.W[:, 3]
    b = first.b + ACC_A_LEAD * first.W[:, 2]
    core[0] = FcLayer(W, b, first.activation)
    skip = np.zeros((7, 7))
    skip[0, 1] = skip[1, 2] = skip[3, 4] = skip[4, 5] = 1.0
    out_map = np.zeros((7, core[-1].out_dim))
    out_map[2, 0] = out_map[5, 1] = 1.0
    return NodeDynamics(core, skip=skip, out_map=out_map)


def acc_controller(rng) -> GnodeModel:
    # inputs [v_set, T_gap, v_ego, D_rel, v_rel], scaled to order one in the first layer
    layers = _chain(rng, 5, [("relu", 20), ("relu", 20), ("linear", 1)])
    scale = np.array([30.0, 1.4, 30.0, 100.0, 2.0])
    layers[0] = FcLayer(layers[0].W / scale, layers[0].b, layers[0].activation)
    return GnodeModel(layers, name="acc_controller")


def acc_nncs(rng, nonlinear: bool, cp: int) -> NncsSpec:
    plant = acc_plant(rng, nonlinear)
    ctrl = acc_controller(rng)
    M = np.zeros((5, 6))
    M[2, 4] = 1.0
    M[3, 0], M[3, 3] = 1.0, -1.0
    M[4, 1], M[4, 4] = 1.0, -1.0
    off = np.array([ACC_V_SET, ACC_T_GAP, 0.0, 0.0, 0.0])
    return NncsSpec(ctrl, plant, TimeConfig(ACC_PERIOD, ACC_PERIOD / 10), cp, M, off)


def generate_model(name: str, seed: int = 0, **params) -> GnodeModel:
    rng = np.random.default_rng(seed)
    if name == "identity":
        n = int(params.get("n", 2))
        return GnodeModel([FcLayer(np.eye(n), np.zeros(n), Activation.LINEAR)], name="identity")
    if name == "spiral_linear":
        return _spiral(rng, False, params)
    if name == "spiral_nonlinear":
        return _spiral(rng, True, params)
    if name == "damped_oscillator":
        return _damped_oscillator(rng, params)
    if name == "fpa":
        return _fpa(rng, params)
    if name == "cartpole":
        return _cartpole(rng, params)
    if name == "acc_3rd_order":
        variant = params.get("variant", "linear")
        if variant not in ("linear", "nonlinear"):
            raise ValueError(f"acc_3rd_order variant must be linear or nonlinear, got {variant!r}")
        spec = acc_nncs(rng, variant == "nonlinear", int(params.get("cp", 5)))
        return unroll_nncs(spec, name=f"acc_{variant}")
    if name in ("fnode_s", "fnode_m", "fnode_l"):
        return _fnode(rng, name[-1])
    if name == "random_gnode":
        return _random_gnode(rng, params.get("size", "XS"), params)
    raise ValueError(f"unknown fixture {name!r}; choose from {', '.join(FIXTURE_NAMES)}")


def generate_fixture(name: str, seed: int = 0, **params) -> dict:
    """Model document for a named benchmark architecture with seeded weights."""
    model = generate_model(name, seed, **params)
    recipe = {"name": name, "seed": int(seed), **{k: v for k, v in sorted(params.items())}}
    return model_to_doc(model, {"fixture": recipe})


_NOMINAL_INPUTS = {
    "spiral_linear": [2.0, 0.0],
    "spiral_nonlinear": [2.0, 0.0],
    "damped_oscillator": [-1.0, -1.0],
}


def default_input_set(name: str, delta: float = 0.01, **params) -> Star:
    """Input box (nominal point +- delta) used by the benchmarks for each fixture."""
    if name == "acc_3rd_order":
        return Star.from_box(*ACC_INITIAL)
    if name in _NOMINAL_INPUTS:
        c = np.array(_NOMINAL_INPUTS[name])
    else:
        c = np.full(generate_model(name, 0, **params).in_dim, 0.5)
    return Star.from_box(c - delta, c + delta)


__all__ = [
    "FORMAT_VERSION", "ModelFormatError", "model_to_doc", "model_from_doc", "dumps_model",
    "save_model", "load_model", "save_set", "load_set", "load_spec", "save_spec",
    "generate_model", "generate_fixture", "default_input_set", "canonical_dumps",
    "acc_plant", "acc_controller", "acc_nncs", "RANDOM_GNODE_SIZES", "FIXTURE_NAMES",
]
