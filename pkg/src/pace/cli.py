"""Command-line entry points: single-instance solving, bound precomputation,
Monte Carlo sweeps, and synthetic fixture generation.

Exit codes: 0 on success, 1 on solver or degeneracy failure, 2 on usage or
input errors. Solver failures emit a machine-readable error JSON.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import bench
from .core import (
    DegenerateProblemError,
    KeypointMeasurements,
    LibraryFormatError,
    MeasurementFormatError,
    ShapeLibrary,
    SolverFailureError,
    load_measurements,
    load_shape_library,
    rotation_to_quaternion,
    save_measurements,
    save_shape_library,
)
from .pruning import (
    PruneParams,
    library_content_hash,
    load_bounds,
    pairwise_bounds,
    save_bounds,
)
from .robust import (
    RobustParams,
    alternating_minimization,
    clique_pace_star,
    gnc_tls,
    irls,
    pace_hash,
)
from .solver import Estimate, pace_star

EXIT_OK = 0
EXIT_SOLVER = 1
EXIT_USAGE = 2


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _error_json(kind: str, message: str) -> None:
    print(json.dumps({"error": message, "kind": kind}))


def _estimate_json(method: str, est: Estimate) -> dict:
    R = est.pose.rotation
    doc = {
        "method": method,
        "rotation": [[float(v) for v in row] for row in R],
        "quaternion_wxyz": [float(v) for v in rotation_to_quaternion(R)],
        "translation": [float(v) for v in est.pose.translation],
        "shape_coefficients": [float(v) for v in est.shape.c],
        "inlier_mask": [bool(b) for b in est.inlier_mask],
        "iterations": int(est.iterations),
        "degenerate": bool(est.degenerate),
        "certificate": None,
        "clique": None,
        "timing": {"total_sec": float(est.solve_time)},
    }
    if est.certificate is not None:
        c = est.certificate
        doc["certificate"] = {
            "eta": float(c.eta),
            "f_sdp": float(c.f_sdp),
            "f_est": float(c.f_est),
            "is_optimal": bool(c.is_optimal),
            "degenerate_cost": bool(c.degenerate_cost),
        }
    if est.clique is not None:
        doc["clique"] = [int(v) for v in est.clique]
    if est.stage_seconds:
        prune_s = est.stage_seconds.get("bounds_seconds", 0.0) + \
            est.stage_seconds.get("clique_seconds", 0.0)
        doc["timing"]["prune_ms"] = 1000.0 * prune_s
        if "gnc_seconds" in est.stage_seconds:
            doc["timing"]["gnc_sec"] = est.stage_seconds["gnc_seconds"]
    return doc


def _solve_dispatch(args, lib: ShapeLibrary,
                    meas: KeypointMeasurements) -> Estimate:
    lam = args.lam if args.lam is not None else \
        math.sqrt(lib.num_models / lib.num_keypoints)
    epsilon = args.epsilon
    timeout_s = args.timeout_clique_ms / 1000.0
    method = args.method
    if method == "pace_star":
        return pace_star(meas, lib, lam)
    if method == "altern":
        return alternating_minimization(meas, lib, lam)
    if epsilon is None:
        raise MeasurementFormatError(f"--epsilon is required for {method}")
    robust = RobustParams(epsilon_bar=epsilon)
    if method == "gnc":
        return gnc_tls(meas, lib, lam, robust)
    if method == "irls_gm":
        return irls(meas, lib, lam, "GM", robust)
    if method == "irls_tls":
        return irls(meas, lib, lam, "TLS", robust)
    prune = PruneParams(epsilon=epsilon)
    if method == "clique_pace_star":
        return clique_pace_star(meas, lib, lam, prune,
                                clique_timeout_s=timeout_s)
    return pace_hash(meas, lib, lam, robust, prune=prune,
                     clique_timeout_s=timeout_s)


def cmd_solve(args) -> int:
    try:
        lib = load_shape_library(args.library)
        meas = load_measurements(args.measurements)
        if meas.num_keypoints != lib.num_keypoints:
            raise MeasurementFormatError(
                "measurement count does not match library keypoint count")
    except (LibraryFormatError, MeasurementFormatError) as e:
        _error_json(type(e).__name__, str(e))
        return EXIT_USAGE
    try:
        est = _solve_dispatch(args, lib, meas)
    except (DegenerateProblemError, SolverFailureError) as e:
        _error_json(type(e).__name__, str(e))
        return EXIT_SOLVER
    except MeasurementFormatError as e:
        _error_json(type(e).__name__, str(e))
        return EXIT_USAGE
    doc = _estimate_json(args.method, est)
    text = json.dumps(doc, indent=2)
    if args.out:
        Path(args.out).write_text(text)
        _log(f"estimate written to {args.out}")
    print(text)
    return EXIT_OK


def cmd_prune(args) -> int:
    try:
        lib = load_shape_library(args.library)
    except LibraryFormatError as e:
        _error_json(type(e).__name__, str(e))
        return EXIT_USAGE
    lib_hash = library_content_hash(lib)
    out = Path(args.out)
    if out.exists():
        try:
            _, cached_hash = load_bounds(out)
            if cached_hash == lib_hash:
                _log(f"cache hit: {out} is current for library hash "
                     f"{lib_hash[:12]}")
                return EXIT_OK
        except Exception:
            _log(f"existing {out} unreadable, recomputing")
    t0 = time.perf_counter()
    bounds = pairwise_bounds(lib)
    try:
        save_bounds(bounds, lib_hash, out)
    except OSError as e:
        _error_json("OSError", str(e))
        return EXIT_USAGE
    n = lib.num_keypoints
    _log(f"computed {n * (n - 1) // 2} pair bounds in "
         f"{time.perf_counter() - t0:.2f}s -> {out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    try:
        with open(args.config) as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        _error_json(type(e).__name__, f"cannot parse config: {e}")
        return EXIT_USAGE
    try:
        cfg = bench.load_sweep_config(doc)
    except bench.ConfigError as e:
        _error_json("ConfigError", str(e))
        return EXIT_USAGE
    out_dir = Path(args.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "results.csv"
    summary_path = out_dir / "summary.json"

    def progress(done, total):
        _log(f"[bench] {done}/{total} instances")

    rows = bench.run_monte_carlo(cfg, csv_path=csv_path,
                                 summary_path=summary_path,
                                 workers=args.workers, progress=progress)
    n_failed = sum(r.failed for r in rows)
    _log(f"{len(rows)} runs ({n_failed} failed) -> {csv_path}, {summary_path}")
    return EXIT_OK


def cmd_gen(args) -> int:
    mode = args.mode or ("mean_plus_variation" if args.r > 0 else "iid_models")
    try:
        params = bench.GenParams(N=args.n, K=args.k, sigma=args.sigma,
                                 variation_radius=args.r,
                                 outlier_rate=args.outlier_rate,
                                 mode=mode, seed=args.seed)
        inst = bench.generate_instance(params)
    except ValueError as e:
        _error_json("ValueError", str(e))
        return EXIT_USAGE
    out_dir = Path(args.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    save_shape_library(inst.library, out_dir / "library.json")
    save_measurements(inst.measurements, out_dir / "measurements.json")
    truth = {
        "rotation": inst.gt_pose.rotation.tolist(),
        "translation": inst.gt_pose.translation.tolist(),
        "shape_coefficients": inst.gt_shape.c.tolist(),
        "outlier_mask": inst.outlier_mask.tolist(),
        "params": {"N": params.N, "K": params.K, "sigma": params.sigma,
                   "r": params.variation_radius,
                   "outlier_rate": params.outlier_rate,
                   "mode": params.mode, "seed": params.seed},
    }
    (out_dir / "truth.json").write_text(json.dumps(truth, indent=2))
    _log(f"instance written to {out_dir}/(library|measurements|truth).json")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pace",
        description="Category-level 3D pose and shape estimation from keypoints")
    sub = parser.add_subparsers(dest="command", required=True)

    p_solve = sub.add_parser("solve", help="estimate pose and shape")
    p_solve.add_argument("--library", required=True)
    p_solve.add_argument("--measurements", required=True)
    p_solve.add_argument("--method", default="pace_star", choices=bench.METHODS)
    p_solve.add_argument("--lambda", dest="lam", type=float, default=None,
                         help="shape regularization (default sqrt(K/N))")
    p_solve.add_argument("--epsilon", type=float, default=None,
                         help="inlier noise bound for robust methods")
    p_solve.add_argument("--timeout-clique-ms", type=float, default=10000.0)
    p_solve.add_argument("--seed", type=int, default=0,
                         help="reserved for seeded methods; recorded only")
    p_solve.add_argument("--out", default=None)
    p_solve.set_defaults(func=cmd_solve)

    p_prune = sub.add_parser("prune", help="precompute pairwise hull bounds")
    p_prune.add_argument("--library", required=True)
    p_prune.add_argument("--out", required=True)
    p_prune.set_defaults(func=cmd_prune)

    p_bench = sub.add_parser("bench", help="run a Monte Carlo sweep")
    p_bench.add_argument("--config", required=True)
    p_bench.add_argument("--out", default=None, help="output directory")
    p_bench.add_argument("--workers", type=int, default=None,
                         help=f"worker processes (default ${bench.WORKERS_ENV_VAR} "
                              "or CPU count)")
    p_bench.set_defaults(func=cmd_bench)

    p_gen = sub.add_parser("gen", help="write a synthetic instance to disk")
    p_gen.add_argument("--n", type=int, required=True)
    p_gen.add_argument("--k", type=int, required=True)
    p_gen.add_argument("--sigma", type=float, default=0.01)
    p_gen.add_argument("--r", type=float, default=0.0)
    p_gen.add_argument("--outlier-rate", type=float, default=0.0)
    p_gen.add_argument("--mode", choices=("iid_models", "mean_plus_variation"),
                       default=None)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--out", default=None, help="output directory")
    p_gen.set_defaults(func=cmd_gen)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    np.seterr(all="ignore")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
