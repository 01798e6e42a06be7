"""Conic backend for the fixed-size rotation relaxation.

The rotation subproblem is a QCQP over the 10-vector [1, vec(R)] whose
feasible set is carved out by 16 constant symmetric matrices: one
homogenization pin plus 15 quadratic equalities characterizing SO(3)
(unit-norm columns, mutual orthogonality, right-handedness). Its semidefinite
relaxation has a single 10x10 PSD variable and is solved here in milliseconds
by an interior-point cone solver, with a first-order fallback. A rounded
rotation together with the relaxation optimum yields the relative duality gap
used as a global-optimality certificate.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .core import SolverFailureError

__all__ = [
    "SO3_CONSTRAINT_TRIPLETS",
    "so3_constraint_matrices",
    "SolverStatus",
    "SdpSolution",
    "SdpBackend",
    "ClarabelBackend",
    "ScsBackend",
    "default_backend",
    "solve_rotation_sdp",
    "round_rotation",
    "duality_gap",
    "polish_lower_bound",
    "project_to_so3",
]

DIM = 10
SVEC_DIM = DIM * (DIM + 1) // 2
_SQRT2 = np.sqrt(2.0)

# (row, col, value) with 1-based upper-triangle indexing; each matrix is
# completed symmetrically. Index 1 is the homogenization entry, indices 2..10
# are vec(R) in column-major order.
SO3_CONSTRAINT_TRIPLETS: tuple[tuple[tuple[int, int, float], ...], ...] = (
    ((1, 1, 1.0),),                                        # homogenization
    ((1, 1, 1.0), (2, 2, -1.0), (3, 3, -1.0), (4, 4, -1.0)),   # |col1| = 1
    ((1, 1, 1.0), (5, 5, -1.0), (6, 6, -1.0), (7, 7, -1.0)),   # |col2| = 1
    ((1, 1, 1.0), (8, 8, -1.0), (9, 9, -1.0), (10, 10, -1.0)),  # |col3| = 1
    ((2, 5, 1.0), (3, 6, 1.0), (4, 7, 1.0)),               # col1 . col2 = 0
    ((2, 8, 1.0), (3, 9, 1.0), (4, 10, 1.0)),              # col1 . col3 = 0
    ((5, 8, 1.0), (6, 9, 1.0), (7, 10, 1.0)),              # col2 . col3 = 0
    ((3, 7, 1.0), (4, 6, -1.0), (1, 8, -1.0)),             # col1 x col2 = col3
    ((4, 5, 1.0), (2, 7, -1.0), (1, 9, -1.0)),
    ((2, 6, 1.0), (1, 10, -1.0), (3, 5, -1.0)),
    ((6, 10, 1.0), (1, 2, -1.0), (7, 9, -1.0)),            # col2 x col3 = col1
    ((7, 8, 1.0), (5, 10, -1.0), (1, 3, -1.0)),
    ((5, 9, 1.0), (1, 4, -1.0), (6, 8, -1.0)),
    ((4, 9, 1.0), (3, 10, -1.0), (1, 5, -1.0)),            # col3 x col1 = col2
    ((2, 10, 1.0), (1, 6, -1.0), (4, 8, -1.0)),
    ((3, 8, 1.0), (2, 9, -1.0), (1, 7, -1.0)),
)


def so3_constraint_matrices() -> tuple[np.ndarray, ...]:
    """The 16 constant 10x10 symmetric constraint matrices A_0..A_15."""
    mats = []
    for triplets in SO3_CONSTRAINT_TRIPLETS:
        A = np.zeros((DIM, DIM))
        for i, j, v in triplets:
            A[i - 1, j - 1] = v
            A[j - 1, i - 1] = v
        mats.append(A)
    return tuple(mats)


def svec(S: np.ndarray) -> np.ndarray:
    """Scaled upper-triangle vectorization: svec(A) @ svec(B) == trace(A B)."""
    n = S.shape[0]
    iu = np.triu_indices(n)
    scale = np.where(iu[0] == iu[1], 1.0, _SQRT2)
    # column-major upper triangle ordering
    order = np.lexsort((iu[0], iu[1]))
    return (S[iu] * scale)[order]


def smat(x: np.ndarray, n: int = DIM) -> np.ndarray:
    """Inverse of :func:`svec`."""
    S = np.zeros((n, n))
    idx = 0
    for j in range(n):
        for i in range(j + 1):
            v = x[idx]
            if i == j:
                S[i, j] = v
            else:
                S[i, j] = S[j, i] = v / _SQRT2
            idx += 1
    return S


class SolverStatus(enum.Enum):
    OPTIMAL = "optimal"
    NEAR_OPTIMAL = "near_optimal"
    FAILED = "failed"


@dataclass(frozen=True)
class SdpSolution:
    """Primal solution of the rotation relaxation.

    ``f_sdp`` is the primal objective trace(Q X) of the returned matrix;
    ``f_lower`` is a certified lower bound on the relaxation optimum built
    from the dual multipliers, immune to the solver stopping slightly on the
    wrong side of the optimum.
    """

    X: np.ndarray                  # (10, 10) symmetric PSD
    f_sdp: float                   # trace(Q X)
    f_lower: float                 # dual-certified lower bound
    solver_status: SolverStatus
    max_eig_ratio: float           # leading / second eigenvalue of X

    def is_rank_one(self, ratio: float = 1e5) -> bool:
        return self.max_eig_ratio >= ratio


class SdpBackend:
    """Interface: minimize trace(Q X) over the fixed SO(3) relaxation."""

    name = "abstract"

    def solve(self, Q: np.ndarray) -> tuple[np.ndarray, str, np.ndarray | None]:
        """Return (x_svec, raw_status, equality_duals_or_None)."""
        raise NotImplementedError


class ClarabelBackend(SdpBackend):
    """Interior-point solve via Clarabel; the constraint structure is constant
    so everything except the objective is prebuilt."""

    name = "clarabel"

    def __init__(self):
        import clarabel  # deferred so the fallback works without it

        self._clarabel = clarabel
        rows = np.vstack([svec(A) for A in so3_constraint_matrices()])
        A_full = sparse.vstack(
            [sparse.csc_matrix(rows), -sparse.identity(SVEC_DIM, format="csc")],
            format="csc")
        b = np.zeros(16 + SVEC_DIM)
        b[0] = 1.0
        self._A = A_full
        self._b = b
        self._P = sparse.csc_matrix((SVEC_DIM, SVEC_DIM))
        self._cones = [clarabel.ZeroConeT(16), clarabel.PSDTriangleConeT(DIM)]

    def solve(self, Q: np.ndarray) -> tuple[np.ndarray, str, np.ndarray | None]:
        settings = self._clarabel.DefaultSettings()
        settings.verbose = False
        settings.tol_gap_abs = 1e-10
        settings.tol_gap_rel = 1e-10
        settings.tol_feas = 1e-10
        solver = self._clarabel.DefaultSolver(
            self._P, svec(Q), self._A, self._b, self._cones, settings)
        sol = solver.solve()
        status = str(sol.status)
        x = np.asarray(sol.x, dtype=float)
        y = np.asarray(sol.z, dtype=float)[:16]
        if status == "Solved":
            return x, SolverStatus.OPTIMAL.value, y
        if status in ("AlmostSolved", "MaxIterations", "MaxTime", "InsufficientProgress"):
            return x, SolverStatus.NEAR_OPTIMAL.value, y
        return x, SolverStatus.FAILED.value, None


class ScsBackend(SdpBackend):
    """First-order fallback via SCS (lower-triangle column-major packing)."""

    name = "scs"

    def __init__(self):
        import scs

        self._scs = scs
        il, jl = np.tril_indices(DIM)
        order = np.lexsort((il, jl))           # column-major lower triangle
        self._rows_l = il[order]
        self._cols_l = jl[order]
        self._scale = np.where(self._rows_l == self._cols_l, 1.0, _SQRT2)
        rows = np.vstack([self._pack(A) for A in so3_constraint_matrices()])
        A_full = sparse.vstack(
            [sparse.csc_matrix(rows), -sparse.identity(SVEC_DIM, format="csc")],
            format="csc")
        b = np.zeros(16 + SVEC_DIM)
        b[0] = 1.0
        self._A = A_full
        self._b = b

    def _pack(self, S: np.ndarray) -> np.ndarray:
        return S[self._rows_l, self._cols_l] * self._scale

    def _unpack_to_svec(self, x: np.ndarray) -> np.ndarray:
        S = np.zeros((DIM, DIM))
        v = x / self._scale
        S[self._rows_l, self._cols_l] = v
        S[self._cols_l, self._rows_l] = v
        return svec(S)

    def solve(self, Q: np.ndarray) -> tuple[np.ndarray, str, np.ndarray | None]:
        data = {"A": self._A, "b": self._b, "c": self._pack(Q)}
        cone = {"z": 16, "s": [DIM]}
        solver = self._scs.SCS(data, cone, verbose=False,
                               eps_abs=1e-9, eps_rel=1e-9, max_iters=50000)
        out = solver.solve()
        status = out["info"]["status"]
        x = self._unpack_to_svec(np.asarray(out["x"], dtype=float))
        y = np.asarray(out["y"], dtype=float)[:16]
        if status == "solved":
            return x, SolverStatus.OPTIMAL.value, y
        if "inaccurate" in status:
            return x, SolverStatus.NEAR_OPTIMAL.value, y
        return x, SolverStatus.FAILED.value, None


_BACKEND: SdpBackend | None = None


def default_backend() -> SdpBackend:
    """Process-wide backend, interior-point if available."""
    global _BACKEND
    if _BACKEND is None:
        try:
            _BACKEND = ClarabelBackend()
        except ImportError:
            _BACKEND = ScsBackend()
    return _BACKEND


FEAS_TOL = 1e-7


def _certified_lower_bound(Q: np.ndarray, A: tuple[np.ndarray, ...],
                           y: np.ndarray) -> float:
    """Rigorous lower bound on the relaxation optimum from dual multipliers.

    Every primal-feasible X has trace exactly 4 (homogenization entry plus
    three unit-norm column blocks), so for any y,
    trace(Q X) >= -y_0 + 4 min(0, lambda_min(Q + sum_i y_i A_i)). The
    objective is a Gram form, hence also nonnegative.
    """
    S = Q + np.einsum("i,ijk->jk", y, np.stack(A))
    lam_min = float(np.linalg.eigvalsh(S)[0])
    return max(0.0, -float(y[0]) + 4.0 * min(0.0, lam_min))


def polish_lower_bound(Q: np.ndarray, A: tuple[np.ndarray, ...],
                       r_tilde: np.ndarray) -> float:
    """Sharpened certified bound anchored at a rounded feasible solution.

    Solves the small least-squares problem (Q + sum_i y_i A_i) r = 0 for the
    multipliers; at an exact optimum this reproduces complementary slackness,
    -y_0 equals the rounded cost, and the eigenvalue correction collapses to
    the true gap. Valid (if loose) for any y, so the caller may take the max
    with the solver's own dual bound.
    """
    basis = np.stack([Ai @ r_tilde for Ai in A], axis=1)      # (10, 16)
    y, *_ = np.linalg.lstsq(basis, -Q @ r_tilde, rcond=None)
    return _certified_lower_bound(Q, A, y)


def solve_rotation_sdp(qcqp, backend: SdpBackend | None = None) -> SdpSolution:
    """Solve the relaxation of the rotation QCQP.

    Returns the primal matrix, its objective value trace(Q X), a certified
    lower bound from the duals, and a status that is downgraded if the
    returned matrix violates feasibility beyond solver tolerance.
    """
    backend = backend or default_backend()
    Q = np.asarray(qcqp.Q, dtype=float)
    x, status, y = backend.solve(Q)
    if x.size != SVEC_DIM or not np.all(np.isfinite(x)):
        return SdpSolution(X=np.eye(DIM) / DIM, f_sdp=float("nan"),
                           f_lower=float("nan"),
                           solver_status=SolverStatus.FAILED,
                           max_eig_ratio=1.0)
    X = smat(x)
    f_sdp = float(np.tensordot(Q, X))
    f_lower = f_sdp if y is None else _certified_lower_bound(Q, qcqp.A, y)
    st = SolverStatus(status)
    if st != SolverStatus.FAILED:
        res = max(abs(float(np.tensordot(A, X)) - (1.0 if i == 0 else 0.0))
                  for i, A in enumerate(qcqp.A))
        min_eig = float(np.linalg.eigvalsh(X)[0])
        if res > FEAS_TOL or min_eig < -1e-8:
            st = SolverStatus.NEAR_OPTIMAL
    evals = np.linalg.eigvalsh(X)
    ratio = float(evals[-1] / max(evals[-2], 1e-300))
    return SdpSolution(X=X, f_sdp=f_sdp, f_lower=f_lower,
                       solver_status=st, max_eig_ratio=ratio)


def project_to_so3(A: np.ndarray) -> np.ndarray:
    """Closest proper rotation to A, by SVD with determinant correction."""
    U, _, Vt = np.linalg.svd(A)
    d = np.linalg.det(U @ Vt)
    return U @ np.diag([1.0, 1.0, d]) @ Vt


def round_rotation(sol: SdpSolution) -> np.ndarray:
    """Extract a rotation from the leading eigenvector of the primal matrix.

    The eigenvector is rescaled so its homogenization entry equals 1, its tail
    is reshaped (column-major) to 3x3, and the result is projected to SO(3).
    """
    vals, vecs = np.linalg.eigh(sol.X)
    v = vecs[:, -1]
    if abs(v[0]) < 1e-6:
        raise SolverFailureError(
            "degenerate relaxation solution: homogenization entry is ~0")
    v = v / v[0]
    return project_to_so3(v[1:].reshape(3, 3, order="F"))


def _hat(w: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]],
                     [w[2], 0.0, -w[0]],
                     [-w[1], w[0], 0.0]])


def _exp_so3(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    W = _hat(w)
    if theta < 1e-12:
        return np.eye(3) + W + 0.5 * (W @ W)
    return np.eye(3) + np.sin(theta) / theta * W + \
        (1.0 - np.cos(theta)) / theta ** 2 * (W @ W)


def refine_rotation(Q: np.ndarray, R: np.ndarray, max_steps: int = 20) -> np.ndarray:
    """Local Gauss-Newton descent of [1, vec(R)]^T Q [1, vec(R)] on SO(3).

    Polishes the rounded rotation to the nearby stationary point; when the
    relaxation is tight this is the global optimum, and the refined cost
    makes the duality-gap certificate sharp. Never increases the cost.
    """
    gens = (_hat(np.array([1.0, 0, 0])), _hat(np.array([0, 1.0, 0])),
            _hat(np.array([0, 0, 1.0])))

    def lifted(Rc):
        return np.concatenate([[1.0], Rc.reshape(-1, order="F")])

    r = lifted(R)
    f = float(r @ Q @ r)
    for _ in range(max_steps):
        J = np.zeros((10, 3))
        for k, E in enumerate(gens):
            J[1:, k] = (R @ E).reshape(-1, order="F")
        grad = 2.0 * (J.T @ (Q @ r))
        H = 2.0 * (J.T @ Q @ J)
        try:
            step = np.linalg.solve(H + 1e-12 * np.eye(3), -grad)
        except np.linalg.LinAlgError:
            break
        improved = False
        for _ in range(20):
            R_new = R @ _exp_so3(step)
            r_new = lifted(R_new)
            f_new = float(r_new @ Q @ r_new)
            if f_new <= f:
                improved = f_new < f - 1e-16 * max(1.0, f)
                R, r, f = R_new, r_new, f_new
                break
            step *= 0.5
        if not improved:
            break
    return R


def duality_gap(f_sdp: float, f_est: float) -> float:
    """Relative duality gap (f_est - f_sdp) / f_est.

    Falls back to the absolute gap when f_est is too small to divide by; a
    value near zero certifies global optimality of the rounded solution.
    """
    if f_est > 1e-12:
        return (f_est - f_sdp) / f_est
    return f_est - f_sdp
