"""Synthetic instance generation, metrics, and Monte Carlo sweeps.

Instances are pure functions of their parameters and a 64-bit seed: template
keypoints are standard Gaussian draws (either independently per model or as a
mean shape plus per-model variation of a given radius), the mixture is
uniform on the unit cube then normalized, poses are uniform rotations with
cube-bounded translations, and a chosen fraction of measurements is replaced
by unstructured Gaussian points. A sweep runs a grid of (model count, outlier
rate) cells over seeded instances for each requested method, streams one CSV
row per run, and writes a per-cell median/IQR summary.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import KeypointMeasurements, Pose, ShapeCoefficients, ShapeLibrary
from .pruning import PairwiseBounds, PruneParams, library_content_hash, pairwise_bounds
from .robust import (
    RobustParams,
    alternating_minimization,
    clique_pace_star,
    gnc_tls,
    irls,
    pace_hash,
)
from .solver import Estimate, pace_star

__all__ = [
    "GenParams",
    "SyntheticInstance",
    "ResultRow",
    "SweepConfig",
    "ConfigError",
    "METHODS",
    "random_rotation",
    "rotation_error",
    "generate_outlier_free",
    "generate_robust_instance",
    "generate_instance",
    "run_monte_carlo",
    "summarize",
    "load_sweep_config",
]

METHODS = ("pace_star", "altern", "gnc", "irls_gm", "irls_tls",
           "clique_pace_star", "pace_hash")

WORKERS_ENV_VAR = "PACE_BENCH_WORKERS"


@dataclass(frozen=True)
class GenParams:
    """Parameters of one synthetic instance."""

    N: int
    K: int
    sigma: float
    variation_radius: float = 0.0
    outlier_rate: float = 0.0
    mode: str = "iid_models"           # or "mean_plus_variation"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("iid_models", "mean_plus_variation"):
            raise ValueError(f"unknown generation mode {self.mode!r}")
        if not (0.0 <= self.outlier_rate < 1.0):
            raise ValueError("outlier_rate must be in [0, 1)")


@dataclass(frozen=True)
class SyntheticInstance:
    library: ShapeLibrary
    measurements: KeypointMeasurements
    gt_pose: Pose
    gt_shape: ShapeCoefficients
    outlier_mask: np.ndarray           # (N,) bool, True where replaced
    gen_params: GenParams


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform rotation via a normalized Gaussian quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotation_error(R_hat: np.ndarray, R_gt: np.ndarray) -> float:
    """Geodesic angular distance in degrees."""
    cos_angle = (np.trace(R_gt.T @ R_hat) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(cos_angle, -1.0, 1.0))))


def generate_instance(params: GenParams) -> SyntheticInstance:
    """Deterministic instance for the given parameters and seed.

    Draw order is fixed (library, mixture, pose, noise, outliers) so that
    instances sharing a seed differ only downstream of the first differing
    parameter.
    """
    rng = np.random.default_rng(params.seed)
    N, K = params.N, params.K
    if params.mode == "iid_models":
        pts = rng.normal(size=(K, N, 3))
    else:
        mean = rng.normal(size=(N, 3))
        pts = mean[None, :, :] + params.variation_radius * rng.normal(size=(K, N, 3))
    lib = ShapeLibrary(points=pts)
    c = rng.uniform(size=K)
    c = c / c.sum()
    R = random_rotation(rng)
    t = rng.uniform(-1.0, 1.0, size=3)
    model = np.einsum("k,knd->nd", c, pts)
    y = model @ R.T + t + params.sigma * rng.normal(size=(N, 3))
    outlier_mask = np.zeros(N, dtype=bool)
    n_out = int(round(params.outlier_rate * N))
    if n_out > 0:
        idx = rng.choice(N, size=n_out, replace=False)
        y[idx] = rng.normal(size=(n_out, 3))
        outlier_mask[idx] = True
    return SyntheticInstance(
        library=lib,
        measurements=KeypointMeasurements(points=y),
        gt_pose=Pose(rotation=R, translation=t),
        gt_shape=ShapeCoefficients(c),
        outlier_mask=outlier_mask,
        gen_params=params,
    )


def generate_outlier_free(params: GenParams) -> SyntheticInstance:
    """Independent-model generation without outliers."""
    if params.mode != "iid_models":
        raise ValueError("outlier-free generation uses mode 'iid_models'")
    if params.outlier_rate != 0.0:
        raise ValueError("outlier-free generation requires outlier_rate = 0")
    return generate_instance(params)


def generate_robust_instance(params: GenParams) -> SyntheticInstance:
    """Mean-shape-plus-variation models with a fraction of replaced points."""
    if params.mode != "mean_plus_variation":
        raise ValueError("robust generation uses mode 'mean_plus_variation'")
    return generate_instance(params)


# ---------------------------------------------------------------------------
# Sweep configuration
# ---------------------------------------------------------------------------

class ConfigError(ValueError):
    """Invalid sweep configuration, carrying the offending field name."""

    def __init__(self, fld: str, msg: str):
        super().__init__(f"config field '{fld}': {msg}")
        self.field = fld


@dataclass(frozen=True)
class SweepConfig:
    methods: tuple[str, ...]
    N: int
    K_values: tuple[int, ...]
    sigma: float
    r: float
    outlier_rates: tuple[float, ...]
    seeds: tuple[int, ...]
    epsilon: float | None = None
    lam: float | None = None            # default sqrt(K / N) per cell
    mode: str | None = None
    success_rot_deg: float = 5.0
    success_trans: float = 0.1
    clique_timeout_s: float = 10.0
    gnc_max_iterations: int = 100
    gnc_mu_update_factor: float = 1.4
    gnc_cost_tolerance: float = 1e-6

    def cell_mode(self) -> str:
        if self.mode is not None:
            return self.mode
        return "mean_plus_variation" if self.r > 0 else "iid_models"

    def cell_lambda(self, K: int) -> float:
        return self.lam if self.lam is not None else math.sqrt(K / self.N)


def load_sweep_config(doc: dict) -> SweepConfig:
    """Validate a parsed config document."""
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "must be a JSON object")
    methods = doc.get("method")
    if isinstance(methods, str):
        methods = [methods]
    if not isinstance(methods, list) or not methods:
        raise ConfigError("method", "must be a method name or nonempty list")
    for m in methods:
        if m not in METHODS:
            raise ConfigError("method", f"unknown method {m!r}, "
                                        f"expected one of {list(METHODS)}")
    def _num(fld, default=None, required=False, cast=float):
        if fld not in doc:
            if required:
                raise ConfigError(fld, "is required")
            return default
        try:
            return cast(doc[fld])
        except (TypeError, ValueError):
            raise ConfigError(fld, f"expected a number, got {doc[fld]!r}")

    N = _num("N", required=True, cast=int)
    if N < 1:
        raise ConfigError("N", "must be positive")
    K_raw = doc.get("K")
    if K_raw is None:
        raise ConfigError("K", "is required")
    K_values = tuple(int(k) for k in (K_raw if isinstance(K_raw, list) else [K_raw]))
    if any(k < 1 for k in K_values):
        raise ConfigError("K", "entries must be positive")
    sigma = _num("sigma", required=True)
    r = _num("r", default=0.0)
    rates_raw = doc.get("outlier_rates", [0.0])
    if not isinstance(rates_raw, list):
        raise ConfigError("outlier_rates", "must be a list")
    rates = tuple(float(x) for x in rates_raw)
    if any(not (0.0 <= x < 1.0) for x in rates):
        raise ConfigError("outlier_rates", "entries must be in [0, 1)")
    seeds_raw = doc.get("seeds", 0)
    if isinstance(seeds_raw, int):
        seeds = tuple(range(seeds_raw))
    elif isinstance(seeds_raw, list):
        seeds = tuple(int(s) for s in seeds_raw)
    else:
        raise ConfigError("seeds", "must be a count or a list of seeds")
    epsilon = _num("epsilon", default=None)
    robust_requested = any(m != "pace_star" and m != "altern" for m in methods)
    if robust_requested and epsilon is None:
        raise ConfigError("epsilon", "is required for robust methods")
    mode = doc.get("mode")
    if mode is not None and mode not in ("iid_models", "mean_plus_variation"):
        raise ConfigError("mode", f"unknown mode {mode!r}")
    return SweepConfig(
        methods=tuple(methods),
        N=N,
        K_values=K_values,
        sigma=sigma,
        r=r,
        outlier_rates=rates,
        seeds=seeds,
        epsilon=epsilon,
        lam=_num("lambda", default=None),
        mode=mode,
        success_rot_deg=_num("success_rot_deg", default=5.0),
        success_trans=_num("success_trans", default=0.1),
        clique_timeout_s=_num("clique_timeout_ms", default=10000.0) / 1000.0,
        gnc_max_iterations=_num("gnc_max_iterations", default=100, cast=int),
        gnc_mu_update_factor=_num("gnc_mu_update_factor", default=1.4),
        gnc_cost_tolerance=_num("gnc_cost_tolerance", default=1e-6),
    )


# ---------------------------------------------------------------------------
# Monte Carlo execution
# ---------------------------------------------------------------------------

CSV_FIELDS = ("method", "N", "K", "sigma", "r", "outlier_rate", "lam",
              "epsilon", "seed", "rot_err_deg", "trans_err", "shape_err",
              "duality_gap", "clique_inlier_rate", "clique_recall",
              "iterations", "time_sec", "prune_time_sec", "gnc_time_sec",
              "failed", "error")


@dataclass
class ResultRow:
    """One solver run on one instance; metric fields are NaN on failure."""

    method: str
    N: int
    K: int
    sigma: float
    r: float
    outlier_rate: float
    lam: float
    epsilon: float | None
    seed: int
    rot_err_deg: float = float("nan")
    trans_err: float = float("nan")
    shape_err: float = float("nan")
    duality_gap: float | None = None
    clique_inlier_rate: float | None = None
    clique_recall: float | None = None
    iterations: int = 0
    time_sec: float = 0.0
    prune_time_sec: float | None = None
    gnc_time_sec: float | None = None
    failed: bool = False
    error: str = ""

    def to_csv_dict(self) -> dict:
        d = {}
        for fld in CSV_FIELDS:
            v = getattr(self, fld)
            if v is None or (isinstance(v, float) and math.isnan(v)):
                d[fld] = ""
            else:
                d[fld] = v
        return d


def _run_method(method: str, inst: SyntheticInstance, lam: float,
                cfg: SweepConfig,
                bounds: PairwiseBounds | None) -> Estimate:
    meas, lib = inst.measurements, inst.library
    if method == "pace_star":
        return pace_star(meas, lib, lam)
    if method == "altern":
        return alternating_minimization(meas, lib, lam)
    robust = RobustParams(epsilon_bar=cfg.epsilon,
                          mu_update_factor=cfg.gnc_mu_update_factor,
                          max_iterations=cfg.gnc_max_iterations,
                          cost_tolerance=cfg.gnc_cost_tolerance)
    if method == "gnc":
        return gnc_tls(meas, lib, lam, robust)
    if method == "irls_gm":
        return irls(meas, lib, lam, "GM", robust)
    if method == "irls_tls":
        return irls(meas, lib, lam, "TLS", robust)
    prune = PruneParams(epsilon=cfg.epsilon)
    if method == "clique_pace_star":
        return clique_pace_star(meas, lib, lam, prune, bounds=bounds,
                                clique_timeout_s=cfg.clique_timeout_s)
    if method == "pace_hash":
        return pace_hash(meas, lib, lam, robust, prune=prune, bounds=bounds,
                         clique_timeout_s=cfg.clique_timeout_s)
    raise ValueError(f"unknown method {method!r}")


def _metric_row(method: str, inst: SyntheticInstance, lam: float,
                cfg: SweepConfig, est: Estimate) -> ResultRow:
    p = inst.gen_params
    row = ResultRow(method=method, N=p.N, K=p.K, sigma=p.sigma,
                    r=p.variation_radius, outlier_rate=p.outlier_rate,
                    lam=lam, epsilon=cfg.epsilon, seed=p.seed)
    row.rot_err_deg = rotation_error(est.pose.rotation, inst.gt_pose.rotation)
    row.trans_err = float(np.linalg.norm(
        est.pose.translation - inst.gt_pose.translation))
    row.shape_err = float(np.linalg.norm(est.shape.c - inst.gt_shape.c))
    if est.certificate is not None:
        row.duality_gap = est.certificate.eta
    if est.clique is not None:
        inlier = ~inst.outlier_mask
        in_clique = np.zeros(p.N, dtype=bool)
        in_clique[est.clique] = True
        row.clique_inlier_rate = float(inlier[est.clique].mean())
        n_inl = int(inlier.sum())
        row.clique_recall = float((in_clique & inlier).sum() / n_inl) if n_inl else 1.0
    row.iterations = est.iterations
    row.time_sec = est.solve_time
    if est.stage_seconds:
        row.prune_time_sec = est.stage_seconds.get("bounds_seconds", 0.0) + \
            est.stage_seconds.get("clique_seconds", 0.0)
        row.gnc_time_sec = est.stage_seconds.get("gnc_seconds")
    return row


def _run_task(args: tuple) -> list[ResultRow]:
    """All requested methods on one (cell, seed) instance."""
    cfg, K, rate, seed = args
    params = GenParams(N=cfg.N, K=K, sigma=cfg.sigma,
                       variation_radius=cfg.r, outlier_rate=rate,
                       mode=cfg.cell_mode(), seed=seed)
    inst = generate_instance(params)
    lam = cfg.cell_lambda(K)
    bounds = None
    if any(m in ("clique_pace_star", "pace_hash") for m in cfg.methods):
        bounds = _bounds_memo(inst.library)
    rows = []
    for method in cfg.methods:
        try:
            est = _run_method(method, inst, lam, cfg, bounds)
            rows.append(_metric_row(method, inst, lam, cfg, est))
        except Exception as e:
            rows.append(ResultRow(method=method, N=cfg.N, K=K, sigma=cfg.sigma,
                                  r=cfg.r, outlier_rate=rate, lam=lam,
                                  epsilon=cfg.epsilon, seed=seed,
                                  failed=True, error=f"{type(e).__name__}: {e}"))
    return rows


_BOUNDS_MEMO: dict[str, PairwiseBounds] = {}


def _bounds_memo(lib: ShapeLibrary) -> PairwiseBounds:
    key = library_content_hash(lib)
    hit = _BOUNDS_MEMO.get(key)
    if hit is None:
        if len(_BOUNDS_MEMO) > 8:      # instances rarely repeat across seeds
            _BOUNDS_MEMO.clear()
        hit = _BOUNDS_MEMO[key] = pairwise_bounds(lib)
    return hit


def _worker_count(requested: int | None) -> int:
    if requested is not None:
        return max(1, requested)
    env = os.environ.get(WORKERS_ENV_VAR)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def run_monte_carlo(cfg: SweepConfig, csv_path: str | Path | None = None,
                    summary_path: str | Path | None = None,
                    workers: int | None = None,
                    progress=None) -> list[ResultRow]:
    """Run the sweep; stream rows to CSV as tasks finish; write the summary.

    Individual run failures become flagged rows and never abort the sweep.
    Output order is deterministic for a fixed config.
    """
    tasks = [(cfg, K, rate, seed)
             for K in cfg.K_values
             for rate in cfg.outlier_rates
             for seed in cfg.seeds]
    n_workers = _worker_count(workers)
    writer = None
    csv_file = None
    if csv_path is not None:
        csv_file = open(csv_path, "w", newline="")
        writer = csv.DictWriter(csv_file, fieldnames=CSV_FIELDS)
        writer.writeheader()
    all_rows: list[ResultRow] = []
    try:
        if n_workers == 1 or len(tasks) <= 1:
            iterator = map(_run_task, tasks)
            for i, rows in enumerate(iterator):
                all_rows.extend(rows)
                if writer is not None:
                    for row in rows:
                        writer.writerow(row.to_csv_dict())
                    csv_file.flush()
                if progress is not None:
                    progress(i + 1, len(tasks))
        else:
            with ProcessPoolExecutor(max_workers=n_workers) as pool:
                for i, rows in enumerate(pool.map(_run_task, tasks)):
                    all_rows.extend(rows)
                    if writer is not None:
                        for row in rows:
                            writer.writerow(row.to_csv_dict())
                        csv_file.flush()
                    if progress is not None:
                        progress(i + 1, len(tasks))
    finally:
        if csv_file is not None:
            csv_file.close()
    if summary_path is not None:
        with open(summary_path, "w") as f:
            json.dump(summarize(all_rows, cfg), f, indent=2)
    return all_rows


def _quantiles(values: list[float]) -> dict:
    if not values:
        return {"median": None, "q25": None, "q75": None}
    arr = np.asarray(values)
    return {"median": float(np.median(arr)),
            "q25": float(np.percentile(arr, 25)),
            "q75": float(np.percentile(arr, 75))}


def summarize(rows: list[ResultRow], cfg: SweepConfig) -> dict:
    """Per-cell, per-method median/IQR of each metric plus success rates."""
    cells: dict = {}
    for row in rows:
        key = (row.method, row.K, row.outlier_rate)
        cells.setdefault(key, []).append(row)
    out = []
    for (method, K, rate), group in sorted(cells.items()):
        ok = [r0 for r0 in group if not r0.failed]
        entry = {
            "method": method,
            "K": K,
            "outlier_rate": rate,
            "n_runs": len(group),
            "n_failed": len(group) - len(ok),
            "rot_err_deg": _quantiles([r0.rot_err_deg for r0 in ok]),
            "trans_err": _quantiles([r0.trans_err for r0 in ok]),
            "shape_err": _quantiles([r0.shape_err for r0 in ok]),
        }
        gaps = [r0.duality_gap for r0 in ok if r0.duality_gap is not None]
        if gaps:
            entry["duality_gap"] = _quantiles(gaps)
        cr = [r0.clique_inlier_rate for r0 in ok if r0.clique_inlier_rate is not None]
        if cr:
            entry["clique_inlier_rate_mean"] = float(np.mean(cr))
        successes = [
            (not r0.failed and r0.rot_err_deg < cfg.success_rot_deg
             and r0.trans_err < cfg.success_trans) for r0 in group]
        entry["success_rate"] = float(np.mean(successes)) if successes else None
        out.append(entry)
    return {"config": {"N": cfg.N, "sigma": cfg.sigma, "r": cfg.r,
                       "epsilon": cfg.epsilon,
                       "success_rot_deg": cfg.success_rot_deg,
                       "success_trans": cfg.success_trans},
            "cells": out}
