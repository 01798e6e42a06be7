"""Domain types and shared transforms for keypoint-based pose and shape estimation.

An object category is described by a library of K template shapes, each giving
the same N semantic 3D keypoints. A detection is a set of N noisy 3D keypoint
measurements with per-point confidence weights. All solvers consume the
weighted-centered form of the data produced by :func:`center_and_weight`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "LibraryFormatError",
    "MeasurementFormatError",
    "DegenerateProblemError",
    "SolverFailureError",
    "ShapeLibrary",
    "KeypointMeasurements",
    "Pose",
    "ShapeCoefficients",
    "CenteredData",
    "load_shape_library",
    "save_shape_library",
    "load_measurements",
    "save_measurements",
    "weighted_centroids",
    "center_and_weight",
    "rotation_to_quaternion",
]

ORTHOGONALITY_TOL = 1e-9


class LibraryFormatError(ValueError):
    """Shape library file is malformed or internally inconsistent."""


class MeasurementFormatError(ValueError):
    """Measurement file is malformed or inconsistent with the library."""


class DegenerateProblemError(RuntimeError):
    """Too few usable measurements to constrain the estimate."""


class SolverFailureError(RuntimeError):
    """A numerical backend failed to produce a usable solution."""


@dataclass(frozen=True)
class ShapeLibrary:
    """K template models of N semantic keypoints each.

    ``points[k, i]`` is keypoint i of model k, in meters. All models index
    the same keypoint identities.
    """

    points: np.ndarray                      # (K, N, 3)
    keypoint_names: tuple[str, ...] = ()
    model_names: tuple[str, ...] = ()

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 3 or pts.shape[2] != 3 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise LibraryFormatError(f"expected (K, N, 3) points, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise LibraryFormatError("library contains non-finite coordinates")
        object.__setattr__(self, "points", pts)

    @property
    def num_models(self) -> int:
        return self.points.shape[0]

    @property
    def num_keypoints(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class KeypointMeasurements:
    """N detected 3D keypoints with nonnegative confidence weights.

    Undetected keypoints carry weight 0 and are ignored by every solver.
    """

    points: np.ndarray                      # (N, 3)
    weights: np.ndarray | None = None       # (N,), defaults to ones

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise MeasurementFormatError(f"expected (N, 3) points, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise MeasurementFormatError("measurements contain non-finite coordinates")
        w = self.weights
        w = np.ones(pts.shape[0]) if w is None else np.asarray(w, dtype=float)
        if w.shape != (pts.shape[0],):
            raise MeasurementFormatError("weights length does not match points")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise MeasurementFormatError("weights must be finite and nonnegative")
        if not np.any(w > 0):
            raise MeasurementFormatError("at least one weight must be positive")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def num_keypoints(self) -> int:
        return self.points.shape[0]

    def reweighted(self, weights: np.ndarray) -> "KeypointMeasurements":
        """Same points with a replacement weight vector."""
        return KeypointMeasurements(self.points, np.asarray(weights, dtype=float))


@dataclass(frozen=True)
class Pose:
    """Rigid transform: proper rotation plus translation."""

    rotation: np.ndarray                    # (3, 3), R^T R = I, det = +1
    translation: np.ndarray                 # (3,)

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError("pose expects a 3x3 rotation and a 3-vector translation")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHOGONALITY_TOL:
            raise ValueError("rotation is not orthogonal within 1e-9")
        if abs(np.linalg.det(R) - 1.0) > ORTHOGONALITY_TOL:
            raise ValueError("rotation determinant is not +1 within 1e-9")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)


@dataclass(frozen=True)
class ShapeCoefficients:
    """Mixture coefficients over the template models, constrained to sum to 1.

    Entries may be negative: the solvers optimize over the affine hull of the
    model set, not the simplex.
    """

    c: np.ndarray                           # (K,)

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float)
        if c.ndim != 1 or c.size < 1:
            raise ValueError("shape coefficients must be a nonempty vector")
        if abs(float(c.sum()) - 1.0) > ORTHOGONALITY_TOL:
            raise ValueError(f"shape coefficients must sum to 1, got {c.sum()!r}")
        object.__setattr__(self, "c", c)


@dataclass(frozen=True)
class CenteredData:
    """Weighted-centered measurements and library, plus the centroids.

    ``y_bar`` stacks sqrt(w_i) * (y(i) - y_w) into a 3N-vector; column k of
    ``B_bar`` stacks sqrt(w_i) * (b_k(i) - b_{k,w}). ``y_w`` and ``b_w`` are
    the weighted centroids needed to undo the centering.
    """

    y_bar: np.ndarray                       # (3N,)
    B_bar: np.ndarray                       # (3N, K)
    y_w: np.ndarray                         # (3,)
    b_w: np.ndarray                         # (K, 3)
    sqrt_w: np.ndarray = field(repr=False, default=None)  # (N,)

    @property
    def num_keypoints(self) -> int:
        return self.y_bar.size // 3

    @property
    def num_models(self) -> int:
        return self.B_bar.shape[1]

    def y_matrix(self) -> np.ndarray:
        """Centered measurements as a 3xN matrix with y_bar(i) in column i."""
        return self.y_bar.reshape(-1, 3).T


def weighted_centroids(meas: KeypointMeasurements,
                       lib: ShapeLibrary) -> tuple[np.ndarray, np.ndarray]:
    """Weighted centroids of the measurements and of each library model.

    Returns ``(y_w, b_w)`` where ``y_w = sum_i w_i y(i) / sum_i w_i`` and
    ``b_w[k]`` is the matching centroid of model k.
    """
    _check_sizes(meas, lib)
    w = meas.weights
    wsum = float(w.sum())
    if wsum <= 0.0:
        raise MeasurementFormatError("all measurement weights are zero")
    y_w = (w[:, None] * meas.points).sum(axis=0) / wsum
    b_w = (w[None, :, None] * lib.points).sum(axis=1) / wsum
    return y_w, b_w


def center_and_weight(meas: KeypointMeasurements, lib: ShapeLibrary) -> CenteredData:
    """Remove the weighted centroids and fold sqrt-weights into the data.

    After this transform the translation is eliminated: the registration cost
    at the optimal translation equals the squared residual between ``y_bar``
    and the rotated model combination built from ``B_bar``.
    """
    y_w, b_w = weighted_centroids(meas, lib)
    sw = np.sqrt(meas.weights)
    y_bar = (sw[:, None] * (meas.points - y_w)).reshape(-1)
    centered = lib.points - b_w[:, None, :]             # (K, N, 3)
    B_bar = (sw[None, :, None] * centered).reshape(lib.num_models, -1).T
    return CenteredData(y_bar=y_bar, B_bar=B_bar, y_w=y_w, b_w=b_w, sqrt_w=sw)


def _check_sizes(meas: KeypointMeasurements, lib: ShapeLibrary) -> None:
    if meas.num_keypoints != lib.num_keypoints:
        raise MeasurementFormatError(
            f"measurement count {meas.num_keypoints} does not match "
            f"library keypoint count {lib.num_keypoints}")


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def load_shape_library(path: str | Path) -> ShapeLibrary:
    """Load a shape library from its JSON schema.

    Expected layout::

        {"keypoint_names": ["...", ...],
         "models": [{"name": "...", "points": [[x, y, z], ...]}, ...]}
    """
    try:
        with open(path) as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise LibraryFormatError(f"cannot parse shape library {path}: {e}") from e
    if not isinstance(doc, dict) or "models" not in doc:
        raise LibraryFormatError(f"{path}: missing 'models'")
    models = doc["models"]
    if not isinstance(models, list) or not models:
        raise LibraryFormatError(f"{path}: 'models' must be a nonempty list")
    names = []
    rows = []
    n_expected = None
    for m in models:
        pts = np.asarray(m.get("points", []), dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise LibraryFormatError(
                f"{path}: model {m.get('name', '?')} points must be Nx3")
        if n_expected is None:
            n_expected = pts.shape[0]
        elif pts.shape[0] != n_expected:
            raise LibraryFormatError(
                f"{path}: inconsistent keypoint count: model "
                f"{m.get('name', '?')} has {pts.shape[0]}, expected {n_expected}")
        rows.append(pts)
        names.append(str(m.get("name", f"model_{len(names)}")))
    kp_names = tuple(str(s) for s in doc.get("keypoint_names", []))
    if kp_names and len(kp_names) != n_expected:
        raise LibraryFormatError(f"{path}: keypoint_names length mismatch")
    return ShapeLibrary(points=np.stack(rows), keypoint_names=kp_names,
                        model_names=tuple(names))


def save_shape_library(lib: ShapeLibrary, path: str | Path) -> None:
    names = lib.model_names or tuple(f"model_{k}" for k in range(lib.num_models))
    doc = {
        "keypoint_names": list(lib.keypoint_names) or
                          [f"kp_{i}" for i in range(lib.num_keypoints)],
        "models": [{"name": names[k], "points": lib.points[k].tolist()}
                   for k in range(lib.num_models)],
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def load_measurements(path: str | Path) -> KeypointMeasurements:
    """Load measurements: ``{"points": [[x,y,z],...], "weights": [...]?, "mask": [...]?}``.

    Omitted weights default to 1; keypoints masked out (mask false) get
    weight 0.
    """
    try:
        with open(path) as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise MeasurementFormatError(f"cannot parse measurements {path}: {e}") from e
    if not isinstance(doc, dict) or "points" not in doc:
        raise MeasurementFormatError(f"{path}: missing 'points'")
    pts = np.asarray(doc["points"], dtype=float)
    n = pts.shape[0] if pts.ndim == 2 else 0
    w = np.asarray(doc["weights"], dtype=float) if "weights" in doc else np.ones(n)
    if "mask" in doc:
        mask = np.asarray(doc["mask"], dtype=bool)
        if mask.shape != (n,):
            raise MeasurementFormatError(f"{path}: mask length mismatch")
        w = np.where(mask, w, 0.0)
    return KeypointMeasurements(points=pts, weights=w)


def save_measurements(meas: KeypointMeasurements, path: str | Path) -> None:
    doc = {"points": meas.points.tolist(), "weights": meas.weights.tolist()}
    with open(path, "w") as f:
        json.dump(doc, f)


def rotation_to_quaternion(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) for a proper rotation matrix."""
    R = np.asarray(R, dtype=float)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(R[i, i] - R[j, j] - R[k, k] + 1.0) * 2.0
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)
