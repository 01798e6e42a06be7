"""Closed-form translation/shape, QCQP assembly, and the certifiable solver."""

import numpy as np
import pytest

from pace.bench import GenParams, generate_outlier_free, random_rotation, rotation_error
from pace.core import (
    DegenerateProblemError,
    KeypointMeasurements,
    ShapeCoefficients,
    ShapeLibrary,
    center_and_weight,
)
from pace.solver import (
    assemble_rotation_qcqp,
    build_shape_cache,
    clamp_to_simplex,
    homogeneous_rotation_vector,
    pace_star,
    registration_cost,
    solve_shape,
    solve_translation,
    vec_permutation_3x3,
)


def _random_centered(seed, N=12, K=4, weighted=True):
    rng = np.random.default_rng(seed)
    lib = ShapeLibrary(points=rng.normal(size=(K, N, 3)))
    w = rng.uniform(0.2, 2.0, size=N) if weighted else None
    meas = KeypointMeasurements(points=rng.normal(size=(N, 3)), weights=w)
    return meas, lib, center_and_weight(meas, lib), rng


# ---------------------------------------------------------------------------
# translation
# ---------------------------------------------------------------------------

def test_translation_identity_case():
    b_w = np.zeros((2, 3))            # library centroid at the origin
    t = solve_translation(np.eye(3), np.array([1.0, 0.0]),
                          np.array([1.0, 2.0, 3.0]), b_w)
    assert np.allclose(t, [1.0, 2.0, 3.0])


def test_translation_generative_inversion():
    inst = generate_outlier_free(GenParams(N=15, K=3, sigma=0.0, seed=0))
    cd = center_and_weight(inst.measurements, inst.library)
    t = solve_translation(inst.gt_pose.rotation, inst.gt_shape.c, cd.y_w, cd.b_w)
    assert np.max(np.abs(t - inst.gt_pose.translation)) < 1e-9


def test_translation_zeroes_gradient():
    # finite-difference check of the full cost in t at the closed form
    meas, lib, cd, rng = _random_centered(1)
    R = random_rotation(rng)
    c = rng.normal(size=lib.num_models)
    c -= (c.sum() - 1.0) / lib.num_models
    t = solve_translation(R, c, cd.y_w, cd.b_w)
    step = 1e-6
    for d in range(3):
        e = np.zeros(3)
        e[d] = step
        up = registration_cost(meas, lib, R, c, t + e, 0.0)
        dn = registration_cost(meas, lib, R, c, t - e, 0.0)
        assert abs((up - dn) / (2 * step)) < 1e-4


# ---------------------------------------------------------------------------
# shape cache and shape solve
# ---------------------------------------------------------------------------

def test_cache_degenerate_library_closed_form():
    K, N = 4, 6
    lib = ShapeLibrary(points=np.zeros((K, N, 3)))    # B_bar = 0
    meas = KeypointMeasurements(points=np.random.default_rng(2).normal(size=(N, 3)))
    cache = build_shape_cache(center_and_weight(meas, lib), 1.0)
    assert np.allclose(cache.H_bar, 2.0 * np.eye(K))
    assert np.allclose(cache.g, np.full(K, 1.0 / K))
    assert np.allclose(cache.G, (np.eye(K) - np.full((K, K), 1.0 / K)) / 2.0)


def test_cache_large_regularizer_limit():
    _, _, cd, _ = _random_centered(3)
    cache = build_shape_cache(cd, 1e8)
    assert np.max(np.abs(cache.g - 1.0 / cd.num_models)) < 1e-6


def test_cache_invariants():
    _, _, cd, _ = _random_centered(4, K=5)
    cache = build_shape_cache(cd, 0.7)
    ones = np.ones(5)
    assert abs(ones @ cache.g - 1.0) < 1e-9
    assert np.max(np.abs(cache.G @ ones)) < 1e-9
    assert np.all(np.linalg.eigvalsh(cache.H_bar) > 0)


def test_cache_rejects_singular():
    # K > 3N makes B_bar rank deficient, so lam = 0 must be refused
    rng = np.random.default_rng(5)
    lib = ShapeLibrary(points=rng.normal(size=(20, 4, 3)))
    meas = KeypointMeasurements(points=rng.normal(size=(4, 3)))
    cd = center_and_weight(meas, lib)
    with pytest.raises(DegenerateProblemError):
        build_shape_cache(cd, 0.0)
    with pytest.raises(ValueError):
        build_shape_cache(cd, -0.1)


def test_solve_shape_single_model():
    rng = np.random.default_rng(6)
    lib = ShapeLibrary(points=rng.normal(size=(1, 8, 3)))
    meas = KeypointMeasurements(points=rng.normal(size=(8, 3)))
    cd = center_and_weight(meas, lib)
    cache = build_shape_cache(cd, 0.1)
    c = solve_shape(random_rotation(rng), cd, cache)
    assert np.allclose(c.c, [1.0])


def test_solve_shape_noiseless_recovery():
    inst = generate_outlier_free(GenParams(N=30, K=4, sigma=0.0, seed=7))
    cd = center_and_weight(inst.measurements, inst.library)
    cache = build_shape_cache(cd, 0.0)
    c = solve_shape(inst.gt_pose.rotation, cd, cache)
    assert np.max(np.abs(c.c - inst.gt_shape.c)) < 1e-6


def test_solve_shape_matches_kkt_oracle():
    # independent equality-constrained least-squares solve
    meas, lib, cd, rng = _random_centered(8, K=4)
    lam = 0.35
    cache = build_shape_cache(cd, lam)
    for _ in range(5):
        R = random_rotation(rng)
        c = solve_shape(R, cd, cache).c
        K = 4
        z = (R.T @ cd.y_matrix()).T.reshape(-1)
        kkt = np.zeros((K + 1, K + 1))
        kkt[:K, :K] = 2.0 * (cd.B_bar.T @ cd.B_bar + lam * np.eye(K))
        kkt[:K, K] = 1.0
        kkt[K, :K] = 1.0
        rhs = np.concatenate([2.0 * cd.B_bar.T @ z, [1.0]])
        sol = np.linalg.solve(kkt, rhs)
        assert np.max(np.abs(c - sol[:K])) < 1e-8
        # KKT residual of the closed form
        resid = kkt @ np.concatenate([c, [sol[K]]]) - rhs
        assert np.max(np.abs(resid)) < 1e-9
        assert abs(c.sum() - 1.0) < 1e-12


# ---------------------------------------------------------------------------
# QCQP assembly
# ---------------------------------------------------------------------------

def test_vec_permutation():
    P = vec_permutation_3x3()
    rng = np.random.default_rng(9)
    for _ in range(100):
        R = random_rotation(rng)
        assert np.array_equal(P @ R.flatten(order="F"), R.T.flatten(order="F"))


def test_qcqp_cost_matches_concentrated_residual():
    meas, lib, cd, rng = _random_centered(10, N=9, K=3)
    lam = 0.6
    cache = build_shape_cache(cd, lam)
    qcqp = assemble_rotation_qcqp(cd, cache, lam)
    assert np.max(np.abs(qcqp.Q - qcqp.Q.T)) < 1e-12
    N = meas.num_keypoints
    for _ in range(100):
        R = random_rotation(rng)
        r = homogeneous_rotation_vector(R)
        z = np.kron(np.eye(N), R.T) @ cd.y_bar
        direct = float(((qcqp.M @ z + qcqp.h) ** 2).sum())
        lifted = float(r @ qcqp.Q @ r)
        assert abs(lifted - direct) <= 1e-9 * max(1.0, direct)


def test_qcqp_substitution_consistency():
    # lifted cost equals the full objective at the per-rotation optimum
    meas, lib, cd, rng = _random_centered(11, N=14, K=5)
    lam = 0.25
    cache = build_shape_cache(cd, lam)
    qcqp = assemble_rotation_qcqp(cd, cache, lam)
    for _ in range(20):
        R = random_rotation(rng)
        c = solve_shape(R, cd, cache)
        t = solve_translation(R, c, cd.y_w, cd.b_w)
        full = registration_cost(meas, lib, R, c.c, t, lam)
        r = homogeneous_rotation_vector(R)
        lifted = float(r @ qcqp.Q @ r)
        assert abs(lifted - full) <= 1e-8 * max(1.0, abs(full))


def test_qcqp_identity_rotation_feasible():
    meas, lib, cd, _ = _random_centered(12)
    qcqp = assemble_rotation_qcqp(cd, build_shape_cache(cd, 0.1), 0.1)
    r = homogeneous_rotation_vector(np.eye(3))
    for Ai in qcqp.A[1:]:
        assert abs(r @ Ai @ r) < 1e-12


# ---------------------------------------------------------------------------
# end-to-end certifiable solver
# ---------------------------------------------------------------------------

def test_pace_star_noiseless():
    inst = generate_outlier_free(GenParams(N=30, K=4, sigma=0.0, seed=13))
    est = pace_star(inst.measurements, inst.library, 0.01)
    assert np.radians(rotation_error(est.pose.rotation,
                                     inst.gt_pose.rotation)) <= 1e-3
    assert est.certificate.eta <= 1e-6
    assert est.certificate.is_optimal


def test_pace_star_exact_recovery_unregularized():
    inst = generate_outlier_free(GenParams(N=30, K=4, sigma=0.0, seed=14))
    est = pace_star(inst.measurements, inst.library, 0.0)
    assert np.max(np.abs(est.shape.c - inst.gt_shape.c)) < 1e-6
    assert np.max(np.abs(est.pose.translation - inst.gt_pose.translation)) < 1e-6
    assert np.radians(rotation_error(est.pose.rotation,
                                     inst.gt_pose.rotation)) < 1e-4


def test_pace_star_noisy_gap():
    inst = generate_outlier_free(GenParams(N=100, K=10, sigma=0.01, seed=15))
    est = pace_star(inst.measurements, inst.library, np.sqrt(10 / 100))
    assert est.certificate.eta < 1e-4


def test_pace_star_sandwich():
    for seed in range(5):
        inst = generate_outlier_free(GenParams(N=40, K=6, sigma=0.02, seed=seed))
        est = pace_star(inst.measurements, inst.library, 0.3)
        c = est.certificate
        assert c.f_sdp <= c.f_est + 1e-8 * max(1.0, abs(c.f_est))
        assert abs(est.shape.c.sum() - 1.0) <= 1e-9


def euler_grid_rotations(step_deg: float) -> np.ndarray:
    """Dense Euler-angle covering of the rotation group, (G, 3, 3)."""
    yaw = np.radians(np.arange(0.0, 360.0, step_deg))
    pitch = np.radians(np.arange(-85.0, 90.0, step_deg))
    roll = np.radians(np.arange(0.0, 360.0, step_deg))
    a, b, g = np.meshgrid(yaw, pitch, roll, indexing="ij")
    a, b, g = a.ravel(), b.ravel(), g.ravel()
    ca, sa, cb, sb, cg, sg = np.cos(a), np.sin(a), np.cos(b), np.sin(b), np.cos(g), np.sin(g)
    R = np.empty((a.size, 3, 3))
    R[:, 0, 0] = ca * cb
    R[:, 0, 1] = ca * sb * sg - sa * cg
    R[:, 0, 2] = ca * sb * cg + sa * sg
    R[:, 1, 0] = sa * cb
    R[:, 1, 1] = sa * sb * sg + ca * cg
    R[:, 1, 2] = sa * sb * cg - ca * sg
    R[:, 2, 0] = -sb
    R[:, 2, 1] = cb * sg
    R[:, 2, 2] = cb * cg
    return R


def grid_search_costs(meas, lib, lam, rotations):
    """Full cost at the per-rotation optimal mixture and translation,
    computed from the raw data through an independent KKT solve."""
    cd = center_and_weight(meas, lib)
    K = lib.num_models
    kkt = np.zeros((K + 1, K + 1))
    kkt[:K, :K] = 2.0 * (cd.B_bar.T @ cd.B_bar + lam * np.eye(K))
    kkt[:K, K] = 1.0
    kkt[K, :K] = 1.0
    kkt_inv = np.linalg.inv(kkt)
    Ymat = cd.y_matrix()
    z = np.einsum("gji,jn->gni", rotations, Ymat).reshape(len(rotations), -1)
    rhs = np.concatenate([2.0 * z @ cd.B_bar, np.ones((len(rotations), 1))], axis=1)
    c = rhs @ kkt_inv.T[:, :K]
    t = cd.y_w[None, :] - np.einsum("gab,gb->ga", rotations, c @ cd.b_w)
    model = np.einsum("gk,knd->gnd", c, lib.points)
    pred = np.einsum("gab,gnb->gna", rotations, model) + t[:, None, :]
    resid2 = ((meas.points[None] - pred) ** 2).sum(axis=2)
    return (meas.weights[None, :] * resid2).sum(axis=1) + lam * (c ** 2).sum(axis=1)


def test_pace_star_beats_rotation_grid():
    # global optimality against a 10-degree grid with per-rotation optimal
    # mixture and translation, evaluated through the raw cost only
    inst = generate_outlier_free(GenParams(N=4, K=2, sigma=0.05, seed=16))
    lam = 0.1
    meas, lib = inst.measurements, inst.library
    est = pace_star(meas, lib, lam)
    f_ours = registration_cost(meas, lib, est.pose.rotation, est.shape.c,
                               est.pose.translation, lam)
    costs = grid_search_costs(meas, lib, lam, euler_grid_rotations(10.0))
    assert f_ours <= costs.min() + 1e-9 * max(1.0, costs.min())


def test_pace_star_equivariance():
    rng = np.random.default_rng(17)
    inst = generate_outlier_free(GenParams(N=50, K=5, sigma=0.005, seed=18))
    lam = 0.05
    est = pace_star(inst.measurements, inst.library, lam)
    R0 = random_rotation(rng)
    rotated = KeypointMeasurements(points=inst.measurements.points @ R0.T,
                                   weights=inst.measurements.weights)
    est2 = pace_star(rotated, inst.library, lam)
    assert np.radians(rotation_error(est2.pose.rotation,
                                     R0 @ est.pose.rotation)) <= 1e-3
    assert np.max(np.abs(est2.shape.c - est.shape.c)) <= 1e-6


def test_clamp_to_simplex():
    c = clamp_to_simplex(ShapeCoefficients(np.array([0.8, 0.6, -0.4])))
    assert np.all(c.c >= 0)
    assert abs(c.c.sum() - 1.0) < 1e-12
    assert np.allclose(c.c, [0.8 / 1.4, 0.6 / 1.4, 0.0])
