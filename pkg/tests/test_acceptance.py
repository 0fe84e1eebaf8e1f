"""Acceptance suite: one test per criterion, each reported as PASS/FAIL in
the terminal summary (see ``criterion`` in conftest)."""

import json
import time

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from gnodereach.cli import (bench_damped_oscillator, bench_random_gnode, main, robustness_protocol,
                            robustness_table)
from gnodereach.geometry import Star
from gnodereach.gnode import GnodeModel, NodeLayer, reach, simulate
from gnodereach.layers import Activation, FcLayer, ReachMode
from gnodereach.model_io import RANDOM_GNODE_SIZES, default_input_set, generate_model, save_spec
from gnodereach.node import (LinearOdeForm, NodeDynamics, OutputMode, TimeConfig, collapse_linear, linear_reach,
                             network_jacobian, nonlinear_reach)
from gnodereach.verify import RobustnessQuery, Verdict, check_robustness

N_SOUNDNESS = 1000
TIMES_PER_TRAJECTORY = 10


# -- 1. soundness ------------------------------------------------------------------

SOUNDNESS_FIXTURES = [
    ("spiral_linear", {}),
    ("spiral_nonlinear", {}),
    ("damped_oscillator", {"n_aug": 0}),
    ("damped_oscillator", {"n_aug": 1}),
    ("damped_oscillator", {"n_aug": 2}),
    ("fpa", {}),
    ("random_gnode", {"size": "XS"}),
    ("acc_3rd_order", {"variant": "linear", "cp": 5}),
]


def _soundness_violations(name, params, rng):
    """Simulate N_SOUNDNESS inputs and count points outside the reach sets.

    Final-set NODEs are checked at every NODE layer output and at the model
    output; flowpipe NODEs are checked at TIMES_PER_TRAJECTORY random times
    per trajectory against the step set covering that time.
    """
    model = generate_model(name, 0, **params)
    R0 = default_input_set(name, **params)
    result = reach(model, R0)
    xs = R0.sample(N_SOUNDNESS, rng, boundary_fraction=0.3)
    checks = misses = 0
    node_idx = [k for k, l in enumerate(model.layers) if isinstance(l, NodeLayer)]
    for x in xs:
        sim = simulate(model, x, n_samples=0, dense=True)
        for k in node_idx:
            lay = model.layers[k]
            if lay.time.output_mode is OutputMode.FLOWPIPE:
                fp, = result.flowpipes[k]
                assert k == len(model) - 1, "flowpipe fixtures here end with their NODE"
                for t in rng.uniform(0.0, lay.time.t_f, TIMES_PER_TRAJECTORY):
                    z = sim.trajectories[k].sol.sol(t)
                    checks += 1
                    misses += not fp.sets[fp.set_at(t)].contains(z)
            else:
                checks += 1
                misses += not result.contains(sim.layer_outputs[k], k)
        if not isinstance(model.layers[-1], NodeLayer):
            checks += 1
            misses += not result.contains(sim.output)
    return checks, misses


def test_soundness_suite(criterion):
    label = "soundness: 8 fixtures x 1000 simulated inputs inside reach sets, < 10 min"
    criterion(label, False, "did not complete")
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    summary = []
    total_miss = 0
    for name, params in SOUNDNESS_FIXTURES:
        checks, misses = _soundness_violations(name, params, rng)
        total_miss += misses
        summary.append(f"{name}{params or ''}: {checks - misses}/{checks}")
    wall = time.perf_counter() - t0
    ok = total_miss == 0 and wall < 600
    criterion(label, ok, f"{total_miss} misses, {wall:.0f}s; " + "; ".join(summary))
    assert total_miss == 0, summary
    assert wall < 600


# -- 2. collapse identity ------------------------------------------------------------

def _random_linear_node(rng):
    n = int(rng.integers(1, 6))
    n_layers = int(rng.integers(1, 5))
    widths = [int(rng.integers(1, 5)) for _ in range(n_layers - 1)] + [n]
    layers, n_in = [], n
    for w in widths:
        layers.append(FcLayer(rng.normal(scale=0.6, size=(w, n_in)), rng.normal(scale=0.5, size=w),
                              Activation.LINEAR))
        n_in = w
    return NodeDynamics(layers)


def test_collapse_identity(criterion):
    label = "collapse identity: 50 linear NODEs, 1e-12 relative evaluation, linear_reach vs RK45 within 1e-6"
    criterion(label, False, "did not complete")
    rng = np.random.default_rng(7)
    worst_eval = worst_reach = 0.0
    for _ in range(50):
        dyn = _random_linear_node(rng)
        form = collapse_linear(dyn)
        Z = rng.normal(size=(100, dyn.dim))
        layered = dyn(Z)
        collapsed = Z @ form.A.T + form.c
        rel = np.linalg.norm(layered - collapsed, axis=1) / np.maximum(np.linalg.norm(layered, axis=1), 1e-300)
        worst_eval = max(worst_eval, float(rel.max()))
        z0 = rng.normal(size=dyn.dim)
        fp = linear_reach(form, Star.point(z0), TimeConfig(1.0))
        sol = solve_ivp(lambda t, z: dyn(z), (0.0, 1.0), z0, method="RK45", rtol=1e-10, atol=1e-10)
        worst_reach = max(worst_reach, float(np.max(np.abs(fp.final.center - sol.y[:, -1]))))
    ok = worst_eval <= 1e-12 and worst_reach <= 1e-6
    criterion(label, ok, f"max relative eval error {worst_eval:.2e}, max reach error {worst_reach:.2e}")
    assert worst_eval <= 1e-12
    assert worst_reach <= 1e-6


# -- 3 & 4. exact-star completeness and approx containment ------------------------------

def _random_relu_net(rng):
    n_layers = int(rng.integers(1, 3))
    layers, n_in = [], 2
    for _ in range(n_layers):
        w = int(rng.integers(1, 4))
        layers.append(FcLayer(rng.normal(size=(w, n_in)), rng.normal(scale=0.5, size=w), Activation.RELU))
        n_in = w
    return GnodeModel(layers, name="relu_net")


N_EXACT_SAMPLES = 10_000
EXACT_TOL = 1e-6


def _exact_check(model, R0, rng):
    """Both membership directions between the sampled true image and the exact-star union.

    Exact-star branches keep the input predicate variables, so every branch
    point c + V a is the image of the input R0(a).  Direction image->union:
    each sampled input's predicate vector lies in some branch's polytope and
    that branch maps it to the network output.  Direction union->image:
    points sampled from each branch equal the network output of their input.
    """
    res = reach(model, R0, ReachMode.EXACT_STAR)
    branches = res.output_sets
    m0 = R0.n_pred
    assert all(b.n_pred == m0 for b in branches)
    A = R0.sample_predicate(N_EXACT_SAMPLES, rng, boundary_fraction=0.1)
    X = R0.evaluate(A)
    Y = model.forward(X)
    covered = np.zeros(len(A), dtype=bool)
    for b in branches:
        scale = 1.0 + np.abs(b.d)
        inside = np.all(A @ b.P.T <= b.d + EXACT_TOL * scale, axis=1) if b.P.shape[0] else np.ones(len(A), bool)
        match = np.max(np.abs(b.evaluate(A) - Y), axis=1) <= EXACT_TOL * (1 + np.max(np.abs(Y), axis=1))
        covered |= inside & match
    miss_fwd = int((~covered).sum())
    per = max(1, N_EXACT_SAMPLES // len(branches))
    miss_back = 0
    back_samples = []
    for b in branches:
        Ab = b.sample_predicate(per, rng, boundary_fraction=0.3)
        Yb = b.evaluate(Ab)
        Xb = R0.evaluate(Ab)
        err = np.max(np.abs(model.forward(Xb) - Yb), axis=1)
        miss_back += int(np.sum(err > EXACT_TOL * (1 + np.max(np.abs(Yb), axis=1))))
        back_samples.append(Xb)
    return miss_fwd, miss_back, np.vstack(back_samples), len(branches)


def _approx_member(model, approx_layers, alpha0, x, tol=1e-7):
    """Membership of model(x) in the approx-star output, by an explicit predicate witness.

    Relaxed neurons are rewritten onto a fresh predicate variable equal to
    the neuron output, so the true activations supply values for every new
    variable.  The witness is then checked against all constraints; if it is
    not accepted the LP membership test decides.
    """
    beta = list(np.asarray(alpha0, dtype=float).ravel())
    h = np.asarray(x, dtype=float)
    for lay, S in zip(model.layers, approx_layers):
        h = lay.evaluate(h)
        m_prev = len(beta)
        beta.extend([np.nan] * (S.n_pred - m_prev))
        for j in range(m_prev, S.n_pred):
            rows = np.flatnonzero((S.basis[:, j] == 1.0) & (np.count_nonzero(S.basis, axis=1) == 1))
            if rows.size:
                beta[j] = h[rows[0]]
    S = approx_layers[-1]
    y = h
    beta = np.array(beta)
    if not np.any(np.isnan(beta)):
        scale = 1.0 + np.abs(S.d)
        ok_p = S.P.shape[0] == 0 or np.all(S.P @ beta <= S.d + tol * scale)
        lb, ub = S._var_bounds()
        ok_b = np.all(beta >= lb - tol * (1 + np.abs(lb))) and np.all(beta <= ub + tol * (1 + np.abs(ub)))
        if ok_p and ok_b and np.allclose(S.evaluate(beta), y, atol=tol, rtol=tol):
            return True
    return S.contains(y)



def _exact_instances():
    rng = np.random.default_rng(99)
    R0 = Star.from_box([-1.0, -1.0], [1.0, 1.0])
    return rng, R0, [_random_relu_net(rng) for _ in range(20)]


def test_exact_star_completeness(criterion):
    label = "exact-star completeness: 20 ReLU nets, 1e4 samples, both directions at 1e-6"
    criterion(label, False, "did not complete")
    rng, R0, nets = _exact_instances()
    fwd = back = 0
    n_branches = []
    for net in nets:
        f, b, _, nb = _exact_check(net, R0, rng)
        fwd += f
        back += b
        n_branches.append(nb)
    ok = fwd == 0 and back == 0
    criterion(label, ok, f"image->union misses {fwd}, union->image misses {back}, "
                         f"branches per net {min(n_branches)}..{max(n_branches)}")
    assert fwd == 0 and back == 0


def test_approx_contains_exact(criterion):
    label = "approx contains exact: every exact-branch sample is in the approx star (20 nets)"
    criterion(label, False, "did not complete")
    rng, R0, nets = _exact_instances()
    misses = total = 0
    for net in nets:
        _, _, Xb, _ = _exact_check(net, R0, rng)
        approx = reach(net, R0, ReachMode.APPROX_STAR)
        layers = [s for s, in approx.layer_sets]
        for x in Xb:
            alpha0 = np.linalg.solve(R0.basis, x - R0.center)
            total += 1
            misses += not _approx_member(net, layers, alpha0, x)
    ok = misses == 0
    criterion(label, ok, f"{total - misses}/{total} samples inside")
    assert misses == 0


# -- 5. nonlinear oracle -----------------------------------------------------------------

def test_neg_tanh_oracle(criterion):
    label = "nonlinear oracle: z' = -tanh(z) flowpipe contains 1000 RK45 trajectories, final width <= 3x"
    criterion(label, False, "did not complete")
    dyn = NodeDynamics([FcLayer(-np.eye(1), np.zeros(1), Activation.TANH)])
    tc = TimeConfig(1.0, 0.01, OutputMode.FLOWPIPE)
    fp = nonlinear_reach(dyn, Star.from_box([0.9], [1.1]), tc)
    z0 = np.concatenate([[0.9, 1.1], np.random.default_rng(5).uniform(0.9, 1.1, 998)])
    # the trajectories are independent scalar ODEs, integrated together
    t_eval = np.linspace(0.0, 1.0, 401)
    sol = solve_ivp(lambda t, z: -np.tanh(z), (0.0, 1.0), z0, method="RK45", rtol=1e-10, atol=1e-10,
                    t_eval=t_eval)
    misses = 0
    for k, (lo_t, hi_t) in enumerate(fp.times):
        lo, hi = fp.sets[k].interval_hull().lower[0], fp.sets[k].interval_hull().upper[0]
        cols = (t_eval >= lo_t - 1e-12) & (t_eval <= hi_t + 1e-12)
        pts = sol.y[:, cols]
        misses += int(np.sum((pts < lo) | (pts > hi)))
    fin = fp.final.interval_hull()
    reach_w = fin.upper[0] - fin.lower[0]
    oracle_w = sol.y[:, -1].max() - sol.y[:, -1].min()
    ratio = reach_w / oracle_w
    ok = misses == 0 and ratio <= 3.0
    criterion(label, ok, f"{misses} misses, width ratio {ratio:.3f}")
    assert misses == 0 and ratio <= 3.0


# -- 6. jacobian ------------------------------------------------------------------------------

def test_jacobian_finite_differences(criterion):
    label = "jacobian: network_jacobian vs central differences <= 1e-5 on 100 pairs"
    criterion(label, False, "did not complete")
    rng = np.random.default_rng(11)
    acts = [Activation.TANH, Activation.SIGMOID, Activation.LINEAR]
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 6))
        layers, n_in = [], n
        depth = int(rng.integers(1, 4))
        for d in range(depth):
            w = n if d == depth - 1 else int(rng.integers(1, 8))
            act = acts[int(rng.integers(len(acts)))]
            layers.append(FcLayer(rng.normal(size=(w, n_in)), rng.normal(scale=0.5, size=w), act))
            n_in = w
        dyn = NodeDynamics(layers)
        z = rng.normal(size=n)
        J = network_jacobian(dyn, z)
        h = 1e-6
        fd = np.column_stack([(dyn(z + h * e) - dyn(z - h * e)) / (2 * h) for e in np.eye(n)])
        worst = max(worst, float(np.max(np.abs(J - fd))))
    criterion(label, worst <= 1e-5, f"max deviation {worst:.2e}")
    assert worst <= 1e-5


# -- 7. robustness protocol ---------------------------------------------------------------------

def test_robustness_protocol(criterion):
    label = "robustness protocol: 50 images x 6 attacks on FNODE_S, table columns, monotone in eps, eps=0 holds"
    criterion(label, False, "did not complete")
    model = generate_model("fnode_s", 0)
    proto = robustness_protocol(model, seed=0, n_images=50)
    table = robustness_table({"fnode_s": proto}).splitlines()
    header = table[0].split(",")
    expected = ["name", "acc"]
    for tag in ("0.5", "1", "2", "2.55_mask80", "12.75_mask80", "25.5_mask80"):
        expected += [f"rob_{tag}", f"t_{tag}"]
    shape_ok = header == expected and len(table) == 2 and proto["verdicts"].shape == (50, 6)
    holds = np.vectorize(lambda v: v is Verdict.HOLDS)(proto["verdicts"])
    # attacks are ordered by increasing eps within each group
    mono_bad = int(np.sum(holds[:, 1:3] & ~holds[:, 0:2])) + int(np.sum(holds[:, 4:6] & ~holds[:, 3:5]))
    rng = np.random.default_rng(0)
    images = rng.uniform(0.0, 255.0, size=(50, model.in_dim))
    zero_bad = sum(check_robustness(RobustnessQuery(model, z, 0.0)).verdict is not Verdict.HOLDS for z in images)
    fractions = holds.mean(axis=0)
    ok = shape_ok and mono_bad == 0 and zero_bad == 0
    criterion(label, ok, f"rob fractions {np.round(fractions, 2).tolist()}, monotonicity breaks {mono_bad}, "
                         f"eps=0 failures {zero_bad}")
    assert shape_ok and mono_bad == 0 and zero_bad == 0


# -- 8. bench shapes ---------------------------------------------------------------------------

def test_bench_shapes(criterion):
    label = "bench shapes: damped oscillator rows n_aug 0/1/2 and random GNODE 3 x 6 grid, no enclosure failure"
    criterion(label, False, "did not complete")
    d = [r.split(",") for r in bench_damped_oscillator().splitlines()]
    grid, detail = bench_random_gnode()
    g = [r.split(",") for r in grid.splitlines()]
    ok_d = d[0][0] == "aug_dims" and [r[0] for r in d[1:]] == ["0", "1", "2"]
    ok_g = (g[0] == ["delta", "XS", "S", "M", "L", "XL", "XXL"] and [r[0] for r in g[1:]] == ["0.01", "0.02", "0.04"]
            and all(len(r) == 7 for r in g[1:]) and len(detail.splitlines()) == 1 + 3 * len(RANDOM_GNODE_SIZES))
    finite = all(np.isfinite(float(r[3])) for r in d[1:])
    ok = ok_d and ok_g and finite
    criterion(label, ok, f"damped rows {len(d) - 1}, grid {len(g) - 1}x{len(g[0]) - 1}")
    assert ok


# -- 9. determinism ------------------------------------------------------------------------------

TIMING_KEYS = {"wall_time", "timing", "times", "total_wall_time"}


def _strip_timing(doc):
    if isinstance(doc, dict):
        return {k: _strip_timing(v) for k, v in doc.items() if k not in TIMING_KEYS}
    if isinstance(doc, list):
        return [_strip_timing(v) for v in doc]
    return doc


def _strip_csv_time(text):
    rows = [r.split(",") for r in text.splitlines()]
    keep = [i for i, h in enumerate(rows[0]) if not h.startswith("t_") and h != "time_s"]
    return "\n".join(",".join(r[i] for i in keep) for r in rows)


def _run_jobs(tmp, fixtures):
    outs = {}
    for name, params in fixtures:
        mdir = tmp / name
        model = mdir / "model.gnode.json"
        argv = ["fixture", name, "--seed", "3", "--out", str(model)]
        for k, v in params.items():
            argv += ["--param", f"{k}={v}"]
        assert main(argv) == 0
        outs[f"{name}/model"] = model.read_bytes()
        c = ",".join(str(v) for v in default_input_set(name, **params).center)
        assert main(["reach", "--model", str(model), "--center", c, "--delta", "0.01", "--seed", "3",
                     "--out", str(mdir / "reach.json"), "--project", "0", "1"]) in (0,)
        outs[f"{name}/reach"] = (mdir / "reach.json").read_text()
        outs[f"{name}/proj"] = (mdir / "projection_0_1.csv").read_bytes()
        assert main(["simulate", "--model", str(model), "--center", c, "--delta", "0.01", "--samples", "3",
                     "--seed", "3", "--out", str(mdir / "sim.json")]) == 0
        outs[f"{name}/sim"] = (mdir / "sim.json").read_bytes()
    spec = tmp / "drift.spec.json"
    save_spec({"type": "robustness", "nominal": [1.0, 0.0], "epsilon": 0.6, "pixel_range": None}, spec)
    ident = tmp / "ident.gnode.json"
    assert main(["fixture", "identity", "--out", str(ident)]) == 0
    assert main(["verify", "--model", str(ident), "--spec", str(spec), "--seed", "3",
                 "--out", str(tmp / "verdict.json")]) == 3
    outs["verdict"] = (tmp / "verdict.json").read_text()
    assert main(["bench", "damped_oscillator", "--seed", "3", "--out", str(tmp / "bench.csv")]) == 0
    outs["bench"] = (tmp / "bench.csv").read_text()
    return outs


def test_determinism(criterion, tmp_path):
    label = "determinism: identical seeds give byte-identical result files modulo timing fields"
    criterion(label, False, "did not complete")
    fixtures = [("spiral_nonlinear", {}), ("damped_oscillator", {"n_aug": 1}), ("random_gnode", {"size": "S"})]
    a = _run_jobs(tmp_path / "a", fixtures)
    b = _run_jobs(tmp_path / "b", fixtures)
    diffs = []
    for key in a:
        x, y = a[key], b[key]
        if key.endswith("reach") or key == "verdict":
            x, y = json.dumps(_strip_timing(json.loads(x)), sort_keys=True), json.dumps(_strip_timing(json.loads(y)), sort_keys=True)
        elif key == "bench":
            x, y = _strip_csv_time(x), _strip_csv_time(y)
        if x != y:
            diffs.append(key)
    criterion(label, not diffs, f"{len(a)} files compared, differing: {diffs or 'none'}")
    assert not diffs
