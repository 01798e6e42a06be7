"""Conic backend: constraint matrices, relaxation solve, rounding, gap."""

import numpy as np
import pytest

from pace.bench import GenParams, generate_outlier_free, random_rotation, rotation_error
from pace.core import SolverFailureError, center_and_weight
from pace.sdp import (
    ClarabelBackend,
    ScsBackend,
    SdpSolution,
    SolverStatus,
    duality_gap,
    round_rotation,
    smat,
    so3_constraint_matrices,
    solve_rotation_sdp,
    svec,
)
from pace.solver import (
    assemble_rotation_qcqp,
    build_shape_cache,
    homogeneous_rotation_vector,
    pace_star,
)


def _qcqp_from_instance(seed=0, N=30, K=4, sigma=0.01, lam=0.1):
    inst = generate_outlier_free(GenParams(N=N, K=K, sigma=sigma, seed=seed))
    cd = center_and_weight(inst.measurements, inst.library)
    cache = build_shape_cache(cd, lam)
    return assemble_rotation_qcqp(cd, cache, lam), inst


def test_constraints_vanish_on_rotations():
    A = so3_constraint_matrices()
    rng = np.random.default_rng(0)
    for _ in range(100):
        r = homogeneous_rotation_vector(random_rotation(rng))
        assert abs(r @ A[0] @ r - 1.0) < 1e-12
        for Ai in A[1:]:
            assert abs(r @ Ai @ r) < 1e-12


def test_constraints_reject_non_rotation():
    A = so3_constraint_matrices()
    r = homogeneous_rotation_vector(np.diag([1.0, 1.0, -1.0]))   # reflection
    assert max(abs(r @ Ai @ r) for Ai in A[1:]) > 0.5


def test_svec_trace_inner_product():
    rng = np.random.default_rng(1)
    S1 = rng.normal(size=(10, 10)); S1 = S1 + S1.T
    S2 = rng.normal(size=(10, 10)); S2 = S2 + S2.T
    assert abs(svec(S1) @ svec(S2) - np.trace(S1 @ S2)) < 1e-10
    assert np.allclose(smat(svec(S1)), S1)


def test_sdp_noiseless_rank_one_recovery():
    qcqp, inst = _qcqp_from_instance(seed=3, sigma=0.0, lam=0.0)
    sol = solve_rotation_sdp(qcqp)
    assert sol.solver_status != SolverStatus.FAILED
    assert sol.max_eig_ratio >= 1e6
    R = round_rotation(sol)
    assert np.radians(rotation_error(R, inst.gt_pose.rotation)) <= 1e-3


def test_sdp_noisy_duality_gap_tight():
    # the relaxation certifies optimality on moderate-noise instances
    qcqp, inst = _qcqp_from_instance(seed=4, N=100, K=10, sigma=0.01,
                                     lam=np.sqrt(0.1))
    sol = solve_rotation_sdp(qcqp)
    R = round_rotation(sol)
    r = homogeneous_rotation_vector(R)
    f_est = float(r @ qcqp.Q @ r)
    assert duality_gap(sol.f_lower, f_est) < 1e-4


def test_sdp_zero_objective():
    qcqp, _ = _qcqp_from_instance(seed=5)
    zero = type(qcqp)(Q=np.zeros((10, 10)), M=qcqp.M, h=qcqp.h, A=qcqp.A)
    sol = solve_rotation_sdp(zero)
    assert sol.solver_status != SolverStatus.FAILED
    assert abs(sol.f_sdp) < 1e-7
    assert abs(np.tensordot(qcqp.A[0], sol.X)) - 1.0 < 1e-7


def test_sdp_feasibility_residuals():
    qcqp, _ = _qcqp_from_instance(seed=6)
    sol = solve_rotation_sdp(qcqp)
    assert abs(np.tensordot(qcqp.A[0], sol.X) - 1.0) <= 1e-7
    for Ai in qcqp.A[1:]:
        assert abs(np.tensordot(Ai, sol.X)) <= 1e-7
    assert np.linalg.eigvalsh(sol.X)[0] >= -1e-8


def test_sdp_lower_bound_property():
    # the relaxation value never exceeds the cost of any feasible rotation
    rng = np.random.default_rng(7)
    qcqp, _ = _qcqp_from_instance(seed=7, N=20, K=3, sigma=0.05, lam=0.2)
    sol = solve_rotation_sdp(qcqp)
    for _ in range(300):
        r = homogeneous_rotation_vector(random_rotation(rng))
        cost = float(r @ qcqp.Q @ r)
        assert sol.f_lower <= cost + 1e-6
        assert sol.f_sdp <= cost + 1e-6


def test_rounding_exact_rank_one():
    rng = np.random.default_rng(8)
    R = random_rotation(rng)
    r = homogeneous_rotation_vector(R)
    sol = SdpSolution(X=np.outer(r, r), f_sdp=0.0, f_lower=0.0,
                      solver_status=SolverStatus.OPTIMAL, max_eig_ratio=np.inf)
    assert np.max(np.abs(round_rotation(sol) - R)) < 1e-12


def test_rounding_perturbed_rank_one():
    rng = np.random.default_rng(9)
    R = random_rotation(rng)
    r = homogeneous_rotation_vector(R)
    sol = SdpSolution(X=np.outer(r, r) + 1e-6 * np.eye(10), f_sdp=0.0,
                      f_lower=0.0, solver_status=SolverStatus.OPTIMAL,
                      max_eig_ratio=1e6)
    assert np.radians(rotation_error(round_rotation(sol), R)) < 1e-4


def test_rounding_projects_reflection():
    refl = np.diag([1.0, 1.0, -1.0])
    r = homogeneous_rotation_vector(refl)
    sol = SdpSolution(X=np.outer(r, r), f_sdp=0.0, f_lower=0.0,
                      solver_status=SolverStatus.OPTIMAL, max_eig_ratio=np.inf)
    R = round_rotation(sol)
    assert np.linalg.det(R) > 0.999999


def test_rounding_degenerate_leading_eigenvector():
    X = np.zeros((10, 10))
    X[5, 5] = 1.0
    sol = SdpSolution(X=X, f_sdp=0.0, f_lower=0.0,
                      solver_status=SolverStatus.OPTIMAL, max_eig_ratio=np.inf)
    with pytest.raises(SolverFailureError):
        round_rotation(sol)


def test_duality_gap_arithmetic():
    assert duality_gap(5.0, 5.0) == 0.0
    assert abs(duality_gap(9.9, 10.0) - 0.01) < 1e-15


def test_backends_agree():
    # interior-point and first-order backends solve the same relaxation
    qcqp, _ = _qcqp_from_instance(seed=10, N=40, K=5, sigma=0.02, lam=0.3)
    sol_ip = solve_rotation_sdp(qcqp, backend=ClarabelBackend())
    sol_fo = solve_rotation_sdp(qcqp, backend=ScsBackend())
    assert sol_ip.solver_status != SolverStatus.FAILED
    assert sol_fo.solver_status != SolverStatus.FAILED
    scale = max(1.0, abs(sol_ip.f_sdp))
    assert abs(sol_ip.f_sdp - sol_fo.f_sdp) / scale < 1e-5
    R_ip = round_rotation(sol_ip)
    R_fo = round_rotation(sol_fo)
    assert rotation_error(R_ip, R_fo) < 0.01
    # both dual bounds sit under the rounded cost
    for sol in (sol_ip, sol_fo):
        r = homogeneous_rotation_vector(round_rotation(sol))
        assert sol.f_lower <= float(r @ qcqp.Q @ r) + 1e-9


def test_pace_star_rejects_failed_backend():
    class FailingBackend:
        name = "failing"

        def solve(self, Q):
            return np.full(55, np.nan), "failed", None

    inst = generate_outlier_free(GenParams(N=10, K=2, sigma=0.0, seed=11))
    with pytest.raises(SolverFailureError):
        pace_star(inst.measurements, inst.library, 0.1,
                  backend=FailingBackend())
