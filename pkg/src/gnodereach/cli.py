"""Command-line front end: ``gnode-reach {reach,verify,simulate,bench,fixture}``.

Exit codes: 0 success / holds, 1 usage error, 2 engine error, 3 violated,
4 unknown, 5 nominal input misclassified.  Data goes to stdout (or --out),
diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .geometry import Box, Star, as_star, set_to_json
from .gnode import GnodeModel, NodeLayer, ReachError, reach, simulate, union_box
from .layers import FcLayer
from .model_io import (RANDOM_GNODE_SIZES, canonical_dumps, default_input_set, generate_fixture,
                       generate_model, load_model, load_set, load_spec, ModelFormatError)
from .node import TimeConfig, flowpipe_to_json
from .verify import RobustnessQuery, Verdict, check_robustness, check_safety

log = logging.getLogger("gnodereach")

EXIT_OK, EXIT_USAGE, EXIT_ENGINE, EXIT_VIOLATED, EXIT_UNKNOWN, EXIT_MISCLASSIFIED = 0, 1, 2, 3, 4, 5
VERDICT_EXIT = {
    Verdict.HOLDS: EXIT_OK,
    Verdict.VIOLATED: EXIT_VIOLATED,
    Verdict.UNKNOWN: EXIT_UNKNOWN,
    Verdict.MISCLASSIFIED: EXIT_MISCLASSIFIED,
}

PROJECTION_DIRECTIONS = 32
ROBUSTNESS_EPS_ALL = (0.5, 1.0, 2.0)
ROBUSTNESS_EPS_MASK = (2.55, 12.75, 25.5)
ROBUSTNESS_MASK_SIZE = 80
RANDOM_GNODE_DELTAS = (0.01, 0.02, 0.04)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fail(code: int, kind: str, message: str, **extra) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}) + "\n")
    return code


def _emit(text: str, out: str | None, filename: str) -> Path | None:
    if out is None:
        sys.stdout.write(text)
        return None
    path = Path(out)
    if path.suffix:  # explicit file name
        path.parent.mkdir(parents=True, exist_ok=True)
    else:
        path.mkdir(parents=True, exist_ok=True)
        path = path / filename
    path.write_text(text)
    return path


# -- job setup ----------------------------------------------------------------

def _floats(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.replace(";", ",").split(",") if v.strip()], dtype=float)
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _load_model(args) -> GnodeModel:
    if not args.model:
        raise UsageError("--model is required")
    model = load_model(args.model)
    if args.tf is None and args.step is None:
        return model
    layers = []
    for lay in model.layers:
        if isinstance(lay, NodeLayer):
            t_f = lay.time.t_f if args.tf is None else args.tf
            step = lay.time.step if args.step is None else args.step
            lay = NodeLayer(lay.dynamics, TimeConfig(t_f, min(step, t_f), lay.time.output_mode))
        layers.append(lay)
    return GnodeModel(layers, model.name)


def _input_set(args, required=True) -> Star | None:
    has_file = args.input_set is not None
    has_center = args.center is not None
    if has_file and has_center:
        raise UsageError("give either --input-set or --center/--delta, not both")
    if has_file:
        return as_star(load_set(args.input_set))
    if has_center:
        c = _floats(args.center)
        d = 0.0 if args.delta is None else args.delta
        if d < 0:
            raise UsageError("--delta must be non-negative")
        return Star.from_box(c - d, c + d)
    if args.delta is not None:
        raise UsageError("--delta needs --center")
    if required:
        raise UsageError("an input set is required (--input-set or --center/--delta)")
    return None


def _box_json(b: Box) -> dict:
    return {"lower": b.lower.tolist(), "upper": b.upper.tolist()}


def reach_to_json(model: GnodeModel, result, seed) -> dict:
    layers = []
    for k, (sets, tags) in enumerate(zip(result.layer_sets, result.layer_times)):
        lay = model.layers[k]
        entry = {
            "index": k,
            "kind": "fc" if isinstance(lay, FcLayer) else "node",
            "method": result.methods[k],
            "n_sets": len(sets),
            "box": _box_json(union_box(sets)),
            "wall_time": result.wall_times[k],
        }
        if any(t is not None for t in tags):
            entry["times"] = [None if t is None else [float(t[0]), float(t[1])] for t in tags]
        if k in result.flowpipes:
            entry["flowpipes"] = [{
                "method": fp.method,
                "mode": fp.mode.value,
                "steps": flowpipe_to_json(fp),
            } for fp in result.flowpipes[k]]
        layers.append(entry)
    return {
        "model": model.name,
        "mode": result.mode.value,
        "seed": seed,
        "input_set": set_to_json(result.input_set),
        "layers": layers,
        "output_sets": [set_to_json(s) for s in result.output_sets],
        "output_box": _box_json(union_box(result.output_sets)),
        "timing": {"total_wall_time": float(sum(result.wall_times))},
    }


def polygon_2d(S: Star, i: int, j: int, n_dirs: int = PROJECTION_DIRECTIONS) -> np.ndarray:
    """Vertices (counter-clockwise) of the projection of S onto coordinates i, j.

    Support points in ``n_dirs`` directions; exact for polygons with at most
    that many edge normals, an inner approximation otherwise.
    """
    P = np.zeros((2, S.dim))
    P[0, i] = P[1, j] = 1.0
    T = S.affine_map(P)
    pts = []
    for a in np.linspace(0.0, 2 * np.pi, n_dirs, endpoint=False):
        pts.append(T.support_point(np.array([np.cos(a), np.sin(a)])))
    pts = np.unique(np.round(np.array(pts), 12), axis=0)
    if len(pts) < 3:
        return pts
    c = pts.mean(axis=0)
    order = np.argsort(np.arctan2(pts[:, 1] - c[1], pts[:, 0] - c[0]))
    return pts[order]


def projection_csv(result, i: int, j: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["set", "t_lo", "t_hi", "vertex", f"x{i}", f"x{j}"])
    for k, (S, tag) in enumerate(zip(result.output_sets, result.layer_times[-1])):
        lo, hi = ("", "") if tag is None else (repr(float(tag[0])), repr(float(tag[1])))
        for v, p in enumerate(polygon_2d(S, i, j)):
            w.writerow([k, lo, hi, v, repr(float(p[0])), repr(float(p[1]))])
    return buf.getvalue()


# -- subcommands ------------------------------------------------------------------

def cmd_reach(args) -> int:
    model = _load_model(args)
    R0 = _input_set(args)
    result = reach(model, R0, args.mode)
    doc = reach_to_json(model, result, args.seed)
    path = _emit(canonical_dumps(doc), args.out, "reach.json")
    if args.project:
        i, j = args.project
        if not (0 <= i < model.out_dim and 0 <= j < model.out_dim) or i == j:
            raise UsageError(f"--project needs two distinct output coordinates below {model.out_dim}")
        text = projection_csv(result, i, j)
        if path is None:
            sys.stdout.write(text)
        else:
            (path.parent / f"projection_{i}_{j}.csv").write_text(text)
    return EXIT_OK


def cmd_verify(args) -> int:
    if not args.spec:
        raise UsageError("--spec is required")
    model = _load_model(args)
    spec = load_spec(args.spec)
    rng = np.random.default_rng(args.seed)
    falsify_seed = int(rng.integers(2**31))
    if spec["type"] == "robustness":
        if args.input_set is not None or args.center is not None:
            raise UsageError("robustness specs define their own input set")
        q = RobustnessQuery(model, spec["nominal"], spec["epsilon"], spec["mask"], spec["label"],
                            spec["pixel_range"])
        res = check_robustness(q, args.mode, budget=args.budget, seed=falsify_seed)
    else:
        R0 = _input_set(args)
        result = reach(model, R0, args.mode)
        res = check_safety(result, spec["halfspace"], spec["over"], model=model, budget=args.budget,
                           seed=falsify_seed)
    doc = res.to_json()
    doc["seed"] = args.seed
    _emit(canonical_dumps(doc), args.out, "verdict.json")
    return VERDICT_EXIT[res.verdict]


def cmd_simulate(args) -> int:
    model = _load_model(args)
    if args.center is not None and args.delta is None and args.input_set is None:
        points = [_floats(args.center)]
    else:
        R0 = _input_set(args)
        points = R0.sample(args.samples, np.random.default_rng(args.seed), boundary_fraction=0.3)
    runs = []
    for x in points:
        sim = simulate(model, x)
        runs.append({
            "input": [float(v) for v in x],
            "output": sim.output.tolist(),
            "trajectories": {str(k): {"t": tr.t.tolist(), "z": tr.z.tolist()} for k, tr in sim.trajectories.items()},
        })
    _emit(canonical_dumps({"model": model.name, "seed": args.seed, "runs": runs}), args.out, "simulate.json")
    return EXIT_OK


def cmd_fixture(args) -> int:
    params = {}
    for item in args.param or []:
        if "=" not in item:
            raise UsageError(f"--param expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            params[k] = int(v)
        except ValueError:
            try:
                params[k] = float(v)
            except ValueError:
                params[k] = v
    try:
        doc = generate_fixture(args.name, args.seed, **params)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None
    _emit(canonical_dumps(doc), args.out, f"{args.name}.gnode.json")
    return EXIT_OK


# -- benchmarks -----------------------------------------------------------------

def _volume(box: Box) -> float:
    return float(np.prod(box.upper - box.lower))


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def bench_damped_oscillator(seed: int = 0, delta: float = 0.01, mode="approx") -> str:
    rows = []
    for n_aug in (0, 1, 2):
        model = generate_model("damped_oscillator", seed, n_aug=n_aug)
        R0 = default_input_set("damped_oscillator", delta)
        t0 = time.perf_counter()
        result = reach(model, R0, mode)
        wall = time.perf_counter() - t0
        node_method = next(m for k, m in enumerate(result.methods) if isinstance(model.layers[k], NodeLayer))
        rows.append([n_aug, node_method, f"{wall:.4f}", repr(_volume(result.output_box())),
                     len(result.output_sets)])
    return _csv(rows, ["aug_dims", "node_method", "time_s", "box_volume", "n_sets"])


def bench_random_gnode(seed: int = 0, deltas=RANDOM_GNODE_DELTAS, mode="approx") -> tuple[str, str]:
    """Wide timing grid (rows delta, columns sizes) plus a long-form detail table."""
    sizes = list(RANDOM_GNODE_SIZES)
    grid, detail = [], []
    for delta in deltas:
        row = [delta]
        for size in sizes:
            model = generate_model("random_gnode", seed, size=size)
            R0 = default_input_set("random_gnode", delta, size=size)
            t0 = time.perf_counter()
            result = reach(model, R0, mode)
            wall = time.perf_counter() - t0
            row.append(f"{wall:.4f}")
            detail.append([size, RANDOM_GNODE_SIZES[size][0], delta, f"{wall:.4f}",
                           repr(_volume(result.output_box())), len(result.output_sets)])
        grid.append(row)
    return (_csv(grid, ["delta"] + sizes),
            _csv(detail, ["size", "input_dim", "delta", "time_s", "box_volume", "n_sets"]))


def robustness_protocol(model: GnodeModel, seed: int = 0, n_images: int = 50, eps_all=ROBUSTNESS_EPS_ALL,
                        eps_mask=ROBUSTNESS_EPS_MASK, mask_size: int = ROBUSTNESS_MASK_SIZE,
                        mode="approx", budget: int = 50, threads: int = 1) -> dict:
    """Run every (image, attack) query; returns verdict and time matrices.

    Images are seeded uniform pixel vectors in [0, 255]; the nominal label is
    the model's own prediction, so no image counts as misclassified.
    """
    rng = np.random.default_rng(seed)
    images = rng.uniform(0.0, 255.0, size=(n_images, model.in_dim))
    masks = [rng.choice(model.in_dim, size=mask_size, replace=False) for _ in range(n_images)]
    attacks = [(e, False) for e in eps_all] + [(e, True) for e in eps_mask]
    seeds = rng.integers(2**31, size=(n_images, len(attacks)))

    def run(ij):
        i, j = ij
        eps, masked = attacks[j]
        q = RobustnessQuery(model, images[i], eps, tuple(masks[i]) if masked else None)
        t0 = time.perf_counter()
        res = check_robustness(q, mode, budget=budget, seed=int(seeds[i, j]))
        return res.verdict, time.perf_counter() - t0

    jobs = [(i, j) for i in range(n_images) for j in range(len(attacks))]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outs = list(pool.map(run, jobs))
    else:
        outs = [run(ij) for ij in jobs]
    verdicts = np.empty((n_images, len(attacks)), dtype=object)
    times = np.zeros((n_images, len(attacks)))
    for (i, j), (v, t) in zip(jobs, outs):
        verdicts[i, j] = v
        times[i, j] = t
    return {"attacks": attacks, "verdicts": verdicts, "times": times}


def robustness_table(rows: dict) -> str:
    """One row per model: name, acc, then (rob, mean time per image) per attack."""
    header, body = ["name", "acc"], []
    for name, proto in rows.items():
        if len(header) == 2:
            for eps, masked in proto["attacks"]:
                tag = f"{eps:g}" + (f"_mask{ROBUSTNESS_MASK_SIZE}" if masked else "")
                header += [f"rob_{tag}", f"t_{tag}"]
        line = [name, "nan"]
        for j in range(len(proto["attacks"])):
            rob = np.mean([v is Verdict.HOLDS for v in proto["verdicts"][:, j]])
            line += [f"{rob:.4g}", f"{proto['times'][:, j].mean():.4f}"]
        body.append(line)
    return _csv(body, header)


def cmd_bench(args) -> int:
    suite = (args.suite or "").strip()
    if not suite:
        raise UsageError("a benchmark suite name is required (damped_oscillator, random_gnode, robustness)")
    if suite == "damped_oscillator":
        _emit(bench_damped_oscillator(args.seed, mode=args.mode), args.out, "damped_oscillator.csv")
    elif suite == "random_gnode":
        grid, detail = bench_random_gnode(args.seed, mode=args.mode)
        path = _emit(grid, args.out, "random_gnode.csv")
        if path is not None:
            (path.parent / "random_gnode_detail.csv").write_text(detail)
    elif suite == "robustness":
        models = {n: generate_model(n, args.seed) for n in args.models.split(",")}
        rows = {n: robustness_protocol(m, args.seed, args.images, mode=args.mode, threads=args.threads)
                for n, m in models.items()}
        _emit(robustness_table(rows), args.out, "robustness.csv")
    else:
        raise UsageError(f"unknown benchmark suite {suite!r}")
    return EXIT_OK


# -- entry point ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gnode-reach", description="Reachability analysis for general neural ODEs")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, input_set=True):
        sp.add_argument("--model", help="model file (.gnode.json)")
        if input_set:
            sp.add_argument("--input-set", help="input set file (.set.json)")
            sp.add_argument("--center", help="nominal input, comma separated")
            sp.add_argument("--delta", type=float, help="half-width of the input box around --center")
        sp.add_argument("--mode", choices=["approx", "exact"], default="approx")
        sp.add_argument("--out", help="output directory or file; stdout when omitted")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--step", type=float, help="override the NODE reach step")
        sp.add_argument("--tf", type=float, help="override the NODE final time")

    r = sub.add_parser("reach", help="compute reachable sets")
    common(r)
    r.add_argument("--project", type=int, nargs=2, metavar=("I", "J"),
                   help="also write a CSV of 2-D polygon vertices for output coordinates I, J")
    r.set_defaults(func=cmd_reach)

    v = sub.add_parser("verify", help="check a safety or robustness spec")
    common(v)
    v.add_argument("--spec", help="spec file (.spec.json)")
    v.add_argument("--budget", type=int, default=1000, help="falsification sample budget")
    v.set_defaults(func=cmd_verify)

    s = sub.add_parser("simulate", help="simulate the model from points")
    common(s)
    s.add_argument("--samples", type=int, default=10, help="points drawn from the input set")
    s.set_defaults(func=cmd_simulate)

    b = sub.add_parser("bench", help="run a benchmark suite")
    common(b, input_set=False)
    b.add_argument("suite", nargs="?", default="")
    b.add_argument("--images", type=int, default=50)
    b.add_argument("--models", default="fnode_s")
    b.set_defaults(func=cmd_bench)

    f = sub.add_parser("fixture", help="write a seeded fixture model")
    f.add_argument("name")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--param", action="append", help="key=value recipe parameter")
    f.add_argument("--out")
    f.set_defaults(func=cmd_fixture)
    return p


def _configure_logging():
    level = os.environ.get("GNODE_REACH_LOG", "WARNING").upper()
    logging.basicConfig(stream=sys.stderr, level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


VALUE_FLAGS = ("--center",)


def _join_values(argv):
    """Attach values such as ``--center -1,-1`` so argparse does not read them as flags."""
    out, it = [], iter(argv)
    for a in it:
        if a in VALUE_FLAGS:
            nxt = next(it, None)
            out.append(a if nxt is None else f"{a}={nxt}")
        else:
            out.append(a)
    return out


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(_join_values(argv))
        if not getattr(args, "command", None):
            raise UsageError("a subcommand is required: reach, verify, simulate, bench, fixture")
        if getattr(args, "threads", 1) < 1:
            raise UsageError("--threads must be at least 1")
        return args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))
    except ReachError as exc:
        return _fail(EXIT_ENGINE, type(exc.cause).__name__, str(exc.cause), layer=exc.layer_index)
    except ModelFormatError as exc:
        return _fail(EXIT_USAGE, "format", str(exc), pointer=exc.pointer)
    except (OSError, json.JSONDecodeError) as exc:
        return _fail(EXIT_USAGE, type(exc).__name__, str(exc))
    except Exception as exc:  # noqa: BLE001 - every engine failure maps to exit 2
        log.debug("engine failure", exc_info=True)
        return _fail(EXIT_ENGINE, type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
