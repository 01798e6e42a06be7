"""Graph-theoretic outlier pruning for category-level keypoint detections.

Two detections can only both be inliers if their mutual distance is
consistent with the distance between the corresponding keypoint convex hulls
across the model library, up to twice the inlier noise bound. The hull
distance bounds depend only on the library and are precomputed for every
keypoint pair: the upper bound is attained at a hull vertex, the lower bound
is the minimum norm over the simplex-weighted difference set, a small convex
QP. Pairs passing the test become edges of a compatibility graph whose
maximum clique is the candidate inlier set.
"""

from __future__ import annotations

import hashlib
import json
import sys
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import KeypointMeasurements, ShapeLibrary

__all__ = [
    "PruneParams",
    "PairwiseBounds",
    "CompatibilityGraph",
    "MaxCliqueResult",
    "pairwise_bounds",
    "compatibility_graph",
    "maximum_clique",
    "min_norm_in_hull",
    "library_content_hash",
    "save_bounds",
    "load_bounds",
]


@dataclass(frozen=True)
class PruneParams:
    """Inlier noise bound (meters) used by the compatibility test."""

    epsilon: float

    def __post_init__(self):
        if not (self.epsilon >= 0.0):
            raise ValueError("epsilon must be nonnegative")


@dataclass(frozen=True)
class PairwiseBounds:
    """Entrywise bounds on inter-keypoint distances over all feasible shapes."""

    b_min: np.ndarray              # (N, N) symmetric, zero diagonal
    b_max: np.ndarray              # (N, N) symmetric, zero diagonal

    def __post_init__(self):
        bmin, bmax = self.b_min, self.b_max
        if bmin.shape != bmax.shape or bmin.shape[0] != bmin.shape[1]:
            raise ValueError("bounds must be square matrices of equal shape")
        if np.any(bmin > bmax + 1e-9) or np.any(bmin < -1e-12):
            raise ValueError("bounds must satisfy 0 <= b_min <= b_max")


@dataclass(frozen=True)
class CompatibilityGraph:
    """Symmetric, loop-free adjacency over the N keypoints."""

    adjacency: np.ndarray          # (N, N) bool

    def __post_init__(self):
        a = self.adjacency
        if a.shape[0] != a.shape[1] or a.dtype != bool:
            raise ValueError("adjacency must be a square boolean matrix")
        if np.any(np.diag(a)) or not np.array_equal(a, a.T):
            raise ValueError("adjacency must be symmetric with no self-loops")

    @property
    def num_nodes(self) -> int:
        return self.adjacency.shape[0]


@dataclass(frozen=True)
class MaxCliqueResult:
    nodes: tuple[int, ...]         # sorted ascending
    exact: bool                    # false when the search timed out


# ---------------------------------------------------------------------------
# Minimum-norm point over a simplex-weighted point set
# ---------------------------------------------------------------------------

def min_norm_in_hull(point_sets: np.ndarray, tol: float = 1e-10,
                     max_iter: int = 1000) -> tuple[np.ndarray, np.ndarray]:
    """Batched min over the simplex of ||sum_k c_k p_k|| for each point set.

    ``point_sets`` has shape (m, K, 3). Uses Frank-Wolfe with away steps and
    exact line search; convergence is certified per problem by the
    Frank-Wolfe gap. Problems that fail to certify within ``max_iter`` are
    re-solved by an interior-point QP, with dense simplex sampling as the
    last resort. Returns (distances, coefficients).
    """
    dist, coeffs = _min_norm_frank_wolfe(point_sets, tol, max_iter)
    pts = np.asarray(point_sets, dtype=float)
    x = np.einsum("mk,mkd->md", coeffs, pts)
    gaps = np.einsum("md,md->m", x, x) - \
        np.einsum("mkd,md->mk", pts, x).min(axis=1)
    scale = np.maximum(1.0, np.einsum("mkd,mkd->mk", pts, pts).max(axis=1))
    for p in np.nonzero(gaps > 2.0 * tol * scale)[0]:
        try:
            d_qp, c_qp = _min_norm_qp(pts[p])
        except Exception as e:  # pragma: no cover - depends on environment
            warnings.warn(f"QP fallback failed for problem {p} ({e}); "
                          "using dense simplex sampling")
            d_qp, c_qp = _min_norm_sampled(pts[p])
        if d_qp < dist[p]:
            dist[p], coeffs[p] = d_qp, c_qp
    return dist, coeffs


def _min_norm_frank_wolfe(point_sets: np.ndarray, tol: float,
                          max_iter: int) -> tuple[np.ndarray, np.ndarray]:
    pts = np.asarray(point_sets, dtype=float)
    m, K, _ = pts.shape
    norms2 = np.einsum("mkd,mkd->mk", pts, pts)
    scale = np.maximum(1.0, norms2.max(axis=1))
    c = np.zeros((m, K))
    c[np.arange(m), norms2.argmin(axis=1)] = 1.0
    x = np.einsum("mk,mkd->md", c, pts)
    live = np.arange(m)
    converged = np.zeros(m, dtype=bool)
    for _ in range(max_iter):
        p = pts[live]
        xl = x[live]
        s = np.einsum("mkd,md->mk", p, xl)
        xx = np.einsum("md,md->m", xl, xl)
        k_fw = s.argmin(axis=1)
        gap = xx - s[np.arange(live.size), k_fw]
        done = gap <= tol * scale[live]
        if done.any():
            converged[live[done]] = True
            live = live[~done]
            if live.size == 0:
                break
            p, xl, s, xx, k_fw = p[~done], xl[~done], s[~done], xx[~done], k_fw[~done]
        cl = c[live]
        idx = np.arange(live.size)
        s_active = np.where(cl > 1e-15, s, -np.inf)
        k_aw = s_active.argmax(axis=1)
        use_fw = (xx - s[idx, k_fw]) >= (s_active[idx, k_aw] - xx)
        d = np.where(use_fw[:, None], p[idx, k_fw] - xl, xl - p[idx, k_aw])
        gamma_max = np.where(use_fw, 1.0,
                             cl[idx, k_aw] / np.maximum(1.0 - cl[idx, k_aw], 1e-300))
        dd = np.einsum("md,md->m", d, d)
        xd = np.einsum("md,md->m", xl, d)
        gamma = np.clip(np.where(dd > 0.0, -xd / np.maximum(dd, 1e-300), 0.0),
                        0.0, gamma_max)
        fw_rows = idx[use_fw]
        aw_rows = idx[~use_fw]
        cl[fw_rows] *= (1.0 - gamma[fw_rows])[:, None]
        cl[fw_rows, k_fw[fw_rows]] += gamma[fw_rows]
        cl[aw_rows] *= (1.0 + gamma[aw_rows])[:, None]
        cl[aw_rows, k_aw[aw_rows]] -= gamma[aw_rows]
        np.clip(cl, 0.0, None, out=cl)
        cl /= cl.sum(axis=1, keepdims=True)
        c[live] = cl
        x[live] = np.einsum("mk,mkd->md", cl, pts[live])
    dist = np.linalg.norm(np.einsum("mk,mkd->md", c, pts), axis=1)
    return dist, c


def _min_norm_qp(points: np.ndarray) -> tuple[float, np.ndarray]:
    """Single-problem interior-point solve, used for uncertified stragglers."""
    import cvxopt

    cvxopt.solvers.options["show_progress"] = False
    K = points.shape[0]
    P = cvxopt.matrix(2.0 * (points @ points.T))
    q = cvxopt.matrix(np.zeros(K))
    Gm = cvxopt.matrix(-np.eye(K))
    hv = cvxopt.matrix(np.zeros(K))
    Am = cvxopt.matrix(np.ones((1, K)))
    bv = cvxopt.matrix(np.ones(1))
    sol = cvxopt.solvers.qp(P, q, Gm, hv, Am, bv)
    if sol["status"] not in ("optimal", "unknown"):
        raise RuntimeError(f"QP solver status {sol['status']}")
    cc = np.clip(np.asarray(sol["x"]).ravel(), 0.0, None)
    cc /= cc.sum()
    return float(np.linalg.norm(points.T @ cc)), cc


def _min_norm_sampled(points: np.ndarray,
                      n_samples: int = 20000) -> tuple[float, np.ndarray]:
    """Last-resort dense simplex sampling; overestimates the true minimum."""
    K = points.shape[0]
    rng = np.random.default_rng(0)
    c = np.vstack([rng.dirichlet(np.ones(K), size=n_samples), np.eye(K)])
    vals = np.linalg.norm(c @ points, axis=1)
    best = int(vals.argmin())
    return float(vals[best]), c[best]


def pairwise_bounds(lib: ShapeLibrary, tol: float = 1e-10,
                    max_iter: int = 1000) -> PairwiseBounds:
    """Hull-distance bounds for every keypoint pair of the library.

    The maximum over the simplex of a norm is attained at a vertex, so the
    upper bound is a max over models. The lower bound solves the small convex
    QP per pair, batched; pairs whose first-order certificate does not reach
    ``tol`` are re-solved one by one, falling back to dense simplex sampling
    with a warning if the QP solver is unavailable.
    """
    pts = lib.points                               # (K, N, 3)
    N = lib.num_keypoints
    ii, jj = np.triu_indices(N, 1)
    diffs = np.swapaxes(pts[:, jj] - pts[:, ii], 0, 1)   # (P, K, 3)
    b_max_flat = np.linalg.norm(diffs, axis=2).max(axis=1)
    b_min_flat, _ = min_norm_in_hull(diffs, tol=tol, max_iter=max_iter)
    b_min = np.zeros((N, N))
    b_max = np.zeros((N, N))
    b_min[ii, jj] = b_min_flat
    b_max[ii, jj] = b_max_flat
    b_min += b_min.T
    b_max += b_max.T
    return PairwiseBounds(b_min=b_min, b_max=b_max)


def compatibility_graph(meas: KeypointMeasurements, bounds: PairwiseBounds,
                        params: PruneParams) -> CompatibilityGraph:
    """Edges between detection pairs that could be simultaneous inliers.

    A pair (i, j) is connected iff
    ``b_min[i,j] - 2 eps <= ||y(j) - y(i)|| <= b_max[i,j] + 2 eps``.
    Keypoints with zero weight are kept as isolated nodes.
    """
    N = meas.num_keypoints
    if bounds.b_min.shape[0] != N:
        raise ValueError("bounds size does not match measurement count")
    d = np.linalg.norm(meas.points[None, :, :] - meas.points[:, None, :], axis=2)
    two_eps = 2.0 * params.epsilon
    adj = (d >= bounds.b_min - two_eps) & (d <= bounds.b_max + two_eps)
    detected = meas.weights > 0
    adj &= detected[:, None] & detected[None, :]
    np.fill_diagonal(adj, False)
    return CompatibilityGraph(adjacency=adj)


# ---------------------------------------------------------------------------
# Exact maximum clique: bitset branch and bound with greedy coloring bounds
# ---------------------------------------------------------------------------

def _adjacency_masks(adj: np.ndarray) -> list[int]:
    return [int.from_bytes(np.packbits(adj[v], bitorder="little").tobytes(),
                           "little") for v in range(adj.shape[0])]


def _color_order(P: int, masks: list[int]) -> list[tuple[int, int]]:
    """Greedy coloring of the candidate set; color index bounds clique size."""
    out = []
    color = 0
    uncolored = P
    while uncolored:
        color += 1
        avail = uncolored
        while avail:
            v = (avail & -avail).bit_length() - 1
            avail &= avail - 1
            uncolored &= ~(1 << v)
            avail &= ~masks[v]
            out.append((v, color))
    return out


class _CliqueSearch:
    def __init__(self, masks: list[int], deadline: float | None):
        self.masks = masks
        self.deadline = deadline
        self.best: list[int] = []
        self.timed_out = False

    def expand(self, P: int, cur: list[int]) -> None:
        if self.timed_out:
            return
        if self.deadline is not None and time.perf_counter() > self.deadline:
            self.timed_out = True
            return
        for v, bound in reversed(_color_order(P, self.masks)):
            if len(cur) + bound <= len(self.best):
                return
            cur.append(v)
            newP = P & self.masks[v]
            if newP:
                self.expand(newP, cur)
            elif len(cur) > len(self.best):
                self.best = cur.copy()
            cur.pop()
            P &= ~(1 << v)

    def has_clique(self, P: int, size: int) -> bool:
        """Decision variant: does P contain a clique of the given size?"""
        if size <= 0:
            return True
        if self.deadline is not None and time.perf_counter() > self.deadline:
            self.timed_out = True
            return False
        for v, bound in reversed(_color_order(P, self.masks)):
            if bound < size:
                return False
            if self.has_clique(P & self.masks[v], size - 1):
                return True
            P &= ~(1 << v)
            if self.timed_out:
                return False
        return False


def maximum_clique(graph: CompatibilityGraph,
                   timeout_s: float = 10.0) -> MaxCliqueResult:
    """Maximum-cardinality clique, ties broken lexicographically.

    If the time budget expires the best clique found so far is returned with
    ``exact=False``.
    """
    n = graph.num_nodes
    if n == 0:
        return MaxCliqueResult(nodes=(), exact=True)
    limit = 3 * n + 200
    if sys.getrecursionlimit() < limit:
        sys.setrecursionlimit(limit)
    masks = _adjacency_masks(graph.adjacency)
    deadline = time.perf_counter() + timeout_s if timeout_s else None
    search = _CliqueSearch(masks, deadline)
    search.expand((1 << n) - 1, [])
    if search.timed_out:
        return MaxCliqueResult(nodes=tuple(sorted(search.best)), exact=False)
    size = len(search.best)
    # rebuild the lexicographically smallest clique of maximum size
    chosen: list[int] = []
    P = (1 << n) - 1
    for remaining in range(size, 0, -1):
        probe = P
        while probe:
            v = (probe & -probe).bit_length() - 1
            probe &= probe - 1
            cand = P & masks[v] & ~((1 << (v + 1)) - 1)   # neighbors above v
            if search.has_clique(cand, remaining - 1):
                chosen.append(v)
                P = cand
                break
        if search.timed_out:
            return MaxCliqueResult(nodes=tuple(sorted(search.best)), exact=False)
    return MaxCliqueResult(nodes=tuple(chosen), exact=True)


# ---------------------------------------------------------------------------
# Bounds cache
# ---------------------------------------------------------------------------

def library_content_hash(lib: ShapeLibrary) -> str:
    """Hash of the library's geometric content, stable across formatting."""
    hsh = hashlib.sha256()
    hsh.update(np.ascontiguousarray(lib.points, dtype=np.float64).tobytes())
    hsh.update("|".join(lib.keypoint_names).encode())
    return hsh.hexdigest()


def save_bounds(bounds: PairwiseBounds, lib_hash: str, path: str | Path) -> None:
    doc = {
        "library_hash": lib_hash,
        "num_keypoints": bounds.b_min.shape[0],
        "b_min": bounds.b_min.tolist(),
        "b_max": bounds.b_max.tolist(),
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def load_bounds(path: str | Path) -> tuple[PairwiseBounds, str]:
    with open(path) as f:
        doc = json.load(f)
    bounds = PairwiseBounds(b_min=np.asarray(doc["b_min"], dtype=float),
                            b_max=np.asarray(doc["b_max"], dtype=float))
    return bounds, str(doc["library_hash"])
