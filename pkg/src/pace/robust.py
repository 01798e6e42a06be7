"""Robust estimation on outlier-contaminated detections.

The truncated-least-squares robust cost is minimized by graduated
non-convexity: a surrogate parameterized by mu interpolates from a convex
relaxation to the exact truncated loss while alternating closed-form weight
updates with certifiably optimal weighted solves. Classic iteratively
reweighted least squares (Geman-McClure and hard-truncation variants) and an
alternating shape/rotation minimization serve as baselines. The full robust
pipeline prunes outliers by maximum-clique compatibility first and runs
graduated non-convexity on the survivors.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .core import (
    DegenerateProblemError,
    KeypointMeasurements,
    Pose,
    ShapeCoefficients,
    ShapeLibrary,
    center_and_weight,
)
from .pruning import (
    MaxCliqueResult,
    PairwiseBounds,
    PruneParams,
    compatibility_graph,
    maximum_clique,
    pairwise_bounds,
)
from .sdp import SdpBackend, project_to_so3
from .solver import (
    Estimate,
    build_shape_cache,
    pace_star,
    residual_norms,
    solve_shape,
    solve_translation,
)

__all__ = [
    "RobustParams",
    "GncState",
    "gnc_tls",
    "irls",
    "alternating_minimization",
    "wahba_svd",
    "clique_pace_star",
    "pace_hash",
]

MIN_INLIERS = 3
MU_FLOOR = 1e-6


@dataclass(frozen=True)
class RobustParams:
    """Truncated-loss threshold and annealing schedule.

    ``epsilon_bar`` is the residual norm beyond which a measurement stops
    contributing quadratically; it doubles as the pruning inlier bound unless
    overridden there.
    """

    epsilon_bar: float
    mu_update_factor: float = 1.4
    max_iterations: int = 100
    cost_tolerance: float = 1e-6

    def __post_init__(self):
        if not (self.epsilon_bar > 0):
            raise ValueError("epsilon_bar must be positive")
        if not (self.mu_update_factor > 1):
            raise ValueError("mu_update_factor must exceed 1")


@dataclass
class GncState:
    """Per-iteration snapshot of the annealed weight optimization."""

    omega: np.ndarray
    mu: float
    iteration: int
    cost_history: list[float] = field(default_factory=list)


def _tls_cost(w: np.ndarray, r: np.ndarray, eps: float,
              lam: float, c: np.ndarray) -> float:
    return float((w * np.minimum(r ** 2, eps ** 2)).sum() + lam * (c ** 2).sum())


def gnc_tls(meas: KeypointMeasurements, lib: ShapeLibrary, lam: float,
            params: RobustParams, backend: SdpBackend | None = None,
            record: list[GncState] | None = None) -> Estimate:
    """Graduated non-convexity with the truncated least squares loss.

    Alternates (i) a certifiably optimal weighted solve at the current weights
    with (ii) the closed-form surrogate weight update, while the annealing
    parameter mu increases geometrically. Measurements whose final weight is
    at least 0.5 form the inlier set. If fewer than three survive, the last
    estimate is returned flagged degenerate.
    """
    t0 = time.perf_counter()
    w0 = meas.weights
    active = w0 > 0
    if int(active.sum()) < MIN_INLIERS:
        raise DegenerateProblemError(
            "need at least 3 positively weighted measurements")
    eps2 = params.epsilon_bar ** 2
    est = pace_star(meas, lib, lam, backend=backend)
    r = residual_norms(meas, lib, est.pose.rotation, est.shape.c,
                       est.pose.translation)
    r2_max = float((r[active] ** 2).max())
    omega = np.where(active, 1.0, 0.0)
    if 2.0 * r2_max <= eps2:
        # every residual is already deep inside the quadratic region: the
        # plain weighted solve is a fixed point of the annealing
        est.inlier_mask = active.copy()
        est.solve_time = time.perf_counter() - t0
        return est
    mu = max(eps2 / (2.0 * r2_max - eps2), MU_FLOOR)
    cost = _tls_cost(w0, r, params.epsilon_bar, lam, est.shape.c)
    history = [cost]
    iterations = 0
    for it in range(1, params.max_iterations + 1):
        iterations = it
        prev_omega = omega.copy()
        th_hi = (mu + 1.0) / mu * eps2
        th_lo = mu / (mu + 1.0) * eps2
        r2 = r ** 2
        omega = np.where(
            r2 >= th_hi, 0.0,
            np.where(r2 <= th_lo, 1.0,
                     params.epsilon_bar * np.sqrt(mu * (mu + 1.0)) /
                     np.maximum(r, 1e-300) - mu))
        omega = np.clip(omega, 0.0, 1.0)
        omega[~active] = 0.0
        if record is not None:
            record.append(GncState(omega=omega.copy(), mu=mu, iteration=it,
                                   cost_history=list(history)))
        if not np.any(w0 * omega > 0):
            return _flag_degenerate(est, omega, active, iterations, t0)
        est = pace_star(meas.reweighted(w0 * omega), lib, lam, backend=backend)
        r = residual_norms(meas, lib, est.pose.rotation, est.shape.c,
                           est.pose.translation)
        prev_cost, cost = cost, _tls_cost(w0, r, params.epsilon_bar, lam,
                                          est.shape.c)
        history.append(cost)
        binary = np.all((omega <= 1e-12) | (omega >= 1.0 - 1e-12))
        stable = np.allclose(omega, prev_omega, atol=1e-9)
        small_change = abs(prev_cost - cost) < params.cost_tolerance * max(1.0, abs(cost))
        if binary and (stable or small_change):
            break
        mu *= params.mu_update_factor
        if mu > 1e16:      # surrogate indistinguishable from the exact loss
            break
    inliers = (omega >= 0.5) & active
    est.inlier_mask = inliers
    est.iterations = iterations
    est.solve_time = time.perf_counter() - t0
    if int(inliers.sum()) < MIN_INLIERS:
        est.degenerate = True
    return est


def _flag_degenerate(est: Estimate, omega: np.ndarray, active: np.ndarray,
                     iterations: int, t0: float) -> Estimate:
    est.inlier_mask = (omega >= 0.5) & active
    est.iterations = iterations
    est.solve_time = time.perf_counter() - t0
    est.degenerate = True
    return est


def irls(meas: KeypointMeasurements, lib: ShapeLibrary, lam: float,
         loss: str, params: RobustParams,
         backend: SdpBackend | None = None) -> Estimate:
    """Iteratively reweighted least squares with a GM or TLS loss.

    ``loss`` selects the weight rule: Geman-McClure
    ``(eps^2 / (eps^2 + r^2))^2`` or hard truncation ``1[r^2 <= eps^2]``.
    """
    if loss not in ("GM", "TLS"):
        raise ValueError(f"unknown loss {loss!r}, expected 'GM' or 'TLS'")
    t0 = time.perf_counter()
    w0 = meas.weights
    active = w0 > 0
    if int(active.sum()) < MIN_INLIERS:
        raise DegenerateProblemError(
            "need at least 3 positively weighted measurements")
    eps = params.epsilon_bar
    eps2 = eps ** 2
    est = pace_star(meas, lib, lam, backend=backend)
    r = residual_norms(meas, lib, est.pose.rotation, est.shape.c,
                       est.pose.translation)

    def robust_cost(res, c):
        if loss == "GM":
            rho = eps2 * res ** 2 / (eps2 + res ** 2)
        else:
            rho = np.minimum(res ** 2, eps2)
        return float((w0 * rho).sum() + lam * (c ** 2).sum())

    cost = robust_cost(r, est.shape.c)
    omega = np.where(active, 1.0, 0.0)
    iterations = 0
    for it in range(1, params.max_iterations + 1):
        iterations = it
        prev_omega = omega
        r2 = r ** 2
        if loss == "GM":
            omega = (eps2 / (eps2 + r2)) ** 2
        else:
            omega = (r2 <= eps2).astype(float)
        omega[~active] = 0.0
        if not np.any(w0 * omega > 0):
            return _flag_degenerate(est, omega, active, iterations, t0)
        est = pace_star(meas.reweighted(w0 * omega), lib, lam, backend=backend)
        r = residual_norms(meas, lib, est.pose.rotation, est.shape.c,
                           est.pose.translation)
        prev_cost, cost = cost, robust_cost(r, est.shape.c)
        if np.allclose(omega, prev_omega, atol=1e-9) or \
                abs(prev_cost - cost) < params.cost_tolerance * max(1.0, abs(cost)):
            break
    inliers = (omega >= 0.5) & active
    est.inlier_mask = inliers
    est.iterations = iterations
    est.solve_time = time.perf_counter() - t0
    if int(inliers.sum()) < MIN_INLIERS:
        est.degenerate = True
    return est


def wahba_svd(a_points: np.ndarray, b_points: np.ndarray,
              weights: np.ndarray | None = None) -> np.ndarray:
    """Rotation minimizing sum_i w_i ||a_i - R b_i||^2, closed form by SVD."""
    a = np.asarray(a_points, dtype=float)
    b = np.asarray(b_points, dtype=float)
    w = np.ones(a.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    H = (w[:, None] * a).T @ b
    svals = np.linalg.svd(H, compute_uv=False)
    if svals[1] <= 1e-12 * max(1.0, svals[0]):
        raise DegenerateProblemError(
            "correlation matrix rank < 2: rotation unobservable")
    return project_to_so3(H)


def alternating_minimization(meas: KeypointMeasurements, lib: ShapeLibrary,
                             lam: float,
                             init_rotation: np.ndarray | None = None,
                             init_shape: np.ndarray | None = None,
                             max_iter: int = 1000,
                             tol: float = 1e-6) -> Estimate:
    """Local baseline: alternate the closed-form shape update with a rotation
    alignment solve until the cost stalls.

    Starts from the identity rotation by default; the shape step runs first,
    so ``init_shape`` only seeds the recorded initial cost. Monotonically
    non-increasing cost; no optimality certificate.
    """
    t0 = time.perf_counter()
    centered = center_and_weight(meas, lib)
    cache = build_shape_cache(centered, lam)
    R = np.eye(3) if init_rotation is None else np.asarray(init_rotation, float)
    K = lib.num_models
    c = np.zeros(K) if init_shape is None else np.asarray(init_shape, float)
    ybar_rows = centered.y_bar.reshape(-1, 3)

    def cost_at(Rc, cc):
        z = (Rc.T @ centered.y_matrix()).T.reshape(-1)
        return float(((centered.B_bar @ cc - z) ** 2).sum() + lam * (cc ** 2).sum())

    f_prev = cost_at(R, c) if init_shape is not None else np.inf
    iterations = 0
    for it in range(1, max_iter + 1):
        iterations = it
        shape = solve_shape(R, centered, cache)
        c = shape.c
        model_rows = (centered.B_bar @ c).reshape(-1, 3)
        R = wahba_svd(ybar_rows, model_rows)
        f = cost_at(R, c)
        if abs(f_prev - f) < tol:
            f_prev = f
            break
        f_prev = f
    t = solve_translation(R, c, centered.y_w, centered.b_w)
    return Estimate(
        pose=Pose(rotation=R, translation=t),
        shape=ShapeCoefficients(c),
        certificate=None,
        inlier_mask=meas.weights > 0,
        iterations=iterations,
        solve_time=time.perf_counter() - t0,
    )


def _prune_stage(meas: KeypointMeasurements, lib: ShapeLibrary,
                 prune: PruneParams, bounds: PairwiseBounds | None,
                 clique_timeout_s: float) -> tuple[np.ndarray, MaxCliqueResult, dict]:
    times = {}
    t0 = time.perf_counter()
    if bounds is None:
        bounds = pairwise_bounds(lib)
    times["bounds_seconds"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    graph = compatibility_graph(meas, bounds, prune)
    clique = maximum_clique(graph, timeout_s=clique_timeout_s)
    times["clique_seconds"] = time.perf_counter() - t0
    keep = np.zeros(meas.num_keypoints, dtype=bool)
    keep[list(clique.nodes)] = True
    return keep, clique, times


def clique_pace_star(meas: KeypointMeasurements, lib: ShapeLibrary, lam: float,
                     prune: PruneParams, bounds: PairwiseBounds | None = None,
                     clique_timeout_s: float = 10.0,
                     backend: SdpBackend | None = None) -> Estimate:
    """Compatibility pruning followed by the certifiable solver, no annealing."""
    t0 = time.perf_counter()
    keep, clique, times = _prune_stage(meas, lib, prune, bounds, clique_timeout_s)
    if len(clique.nodes) < MIN_INLIERS:
        raise DegenerateProblemError(
            f"maximum clique has {len(clique.nodes)} nodes, need >= 3")
    est = pace_star(meas.reweighted(meas.weights * keep), lib, lam,
                    backend=backend)
    est.inlier_mask = keep & (meas.weights > 0)
    est.clique = np.asarray(clique.nodes, dtype=int)
    est.stage_seconds = times
    est.solve_time = time.perf_counter() - t0
    return est


def pace_hash(meas: KeypointMeasurements, lib: ShapeLibrary, lam: float,
              params: RobustParams, prune: PruneParams | None = None,
              bounds: PairwiseBounds | None = None,
              clique_timeout_s: float = 10.0,
              backend: SdpBackend | None = None,
              record: list[GncState] | None = None) -> Estimate:
    """Full robust pipeline: clique pruning, then graduated non-convexity.

    Measurements outside the maximum clique are hard-zeroed before annealing;
    the returned inlier mask reflects both stages. The pruning noise bound
    defaults to the truncation threshold.
    """
    t0 = time.perf_counter()
    if prune is None:
        prune = PruneParams(epsilon=params.epsilon_bar)
    keep, clique, times = _prune_stage(meas, lib, prune, bounds, clique_timeout_s)
    if len(clique.nodes) < MIN_INLIERS:
        raise DegenerateProblemError(
            f"maximum clique has {len(clique.nodes)} nodes, need >= 3")
    t1 = time.perf_counter()
    est = gnc_tls(meas.reweighted(meas.weights * keep), lib, lam, params,
                  backend=backend, record=record)
    times["gnc_seconds"] = time.perf_counter() - t1
    est.clique = np.asarray(clique.nodes, dtype=int)
    est.stage_seconds = times
    est.solve_time = time.perf_counter() - t0
    return est
