"""Rotations, unit-sphere helpers, spherical grids and the angular error metric.

Conventions: quaternions are ``(w, x, y, z)`` arrays, rotation matrices map
sensor-frame vectors into the world frame (``v_world = R @ v_sensor``) and
angles are radians everywhere except at the metric boundary
(:func:`angular_error` returns degrees).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidInputError

FRAMES = ("sensor", "world")
DEFAULT_GRID_SIZE = 13744
GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


@dataclass(frozen=True)
class UnitVector3:
    """A direction on the unit sphere tagged with the frame it lives in."""

    xyz: np.ndarray
    frame: str = "sensor"

    def __post_init__(self):
        v = np.asarray(self.xyz, dtype=float).reshape(3)
        if self.frame not in FRAMES:
            raise InvalidInputError(f"unknown frame {self.frame!r}")
        if abs(np.linalg.norm(v) - 1.0) > 1e-9:
            raise InvalidInputError("UnitVector3 requires a unit-norm vector")
        v.setflags(write=False)
        object.__setattr__(self, "xyz", v)

    @classmethod
    def normalized(cls, v, frame="sensor"):
        v = np.asarray(v, dtype=float)
        n = np.linalg.norm(v)
        if n == 0:
            raise InvalidInputError("cannot normalise the zero vector")
        return cls(v / n, frame)

    def __neg__(self):
        return UnitVector3(-self.xyz, self.frame)


@dataclass
class SphericalGrid:
    directions: np.ndarray  # (J, 3) world-frame unit vectors
    neighbors: list[np.ndarray] = field(repr=False)
    resolution_deg: float = 0.0

    def __len__(self):
        return len(self.directions)

    @property
    def tree(self) -> cKDTree:
        t = getattr(self, "_tree", None)
        if t is None:
            t = cKDTree(self.directions)
            self._tree = t
        return t

    def nearest(self, v) -> np.ndarray:
        """Index of the grid direction closest to each row of ``v``."""
        _, idx = self.tree.query(np.atleast_2d(v))
        return idx


def _check_unit_quat(q, tol=1e-6):
    q = np.asarray(q, dtype=float)
    if q.shape[-1] != 4:
        raise InvalidInputError("quaternion must have 4 components (w, x, y, z)")
    n = np.linalg.norm(q, axis=-1)
    if np.any(np.abs(n - 1.0) > tol):
        raise InvalidInputError("quaternion is not unit norm")
    return q / n[..., None]


def quat_to_rotation(q) -> np.ndarray:
    """Rotation matrix (or stack of them) for unit quaternion(s) ``(w, x, y, z)``."""
    q = _check_unit_quat(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_rotate(q, v) -> np.ndarray:
    """Rotate ``v`` by quaternion ``q`` via the Hamilton product q v q*."""
    w, x, y, z = _check_unit_quat(q)
    u = np.array([x, y, z])
    v = np.asarray(v, dtype=float)
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def axis_angle_to_rotation(axis, angle) -> np.ndarray:
    """Rodrigues formula; ``angle`` may be an array, giving a stack of matrices."""
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    angle = np.asarray(angle, dtype=float)
    K = np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])
    s = np.sin(angle)[..., None, None]
    c = np.cos(angle)[..., None, None]
    return np.eye(3) + s * K + (1.0 - c) * (K @ K)


def rotation_angle(R) -> np.ndarray:
    """Rotation angle(s) in radians, in [0, pi]."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R, axis1=-2, axis2=-1)
    return np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0))


def check_rotation(R, tol=1e-9):
    R = np.asarray(R, dtype=float)
    if R.shape[-2:] != (3, 3):
        raise InvalidInputError("rotation matrices must be 3x3")
    eye = np.eye(3)
    err = np.abs(np.swapaxes(R, -1, -2) @ R - eye).max() if R.size else 0.0
    if err > tol or np.any(np.abs(np.linalg.det(R) - 1.0) > tol):
        raise InvalidInputError("matrix is not in SO(3)")
    return R


def rotate(R, v, inverse=False):
    """Apply ``R`` (sensor -> world) or its transpose (world -> sensor).

    ``v`` may be a raw vector/array of row vectors or a :class:`UnitVector3`; in
    the latter case the frame tag must match the direction of use and flips.
    """
    R = np.asarray(R, dtype=float)
    M = R.T if inverse else R
    if isinstance(v, UnitVector3):
        src, dst = ("world", "sensor") if inverse else ("sensor", "world")
        if v.frame != src:
            raise InvalidInputError(f"expected a {src}-frame vector, got {v.frame}")
        return UnitVector3.normalized(M @ v.xyz, dst)
    v = np.asarray(v, dtype=float)
    return v @ M.T


def angular_error(a, b) -> np.ndarray | float:
    """Angle in degrees between directions, clamped acos of the inner product.

    Accepts two :class:`UnitVector3` (frames must agree) or broadcastable
    arrays of unit row vectors.
    """
    if isinstance(a, UnitVector3) or isinstance(b, UnitVector3):
        if not (isinstance(a, UnitVector3) and isinstance(b, UnitVector3)):
            raise InvalidInputError("cannot compare a tagged and an untagged vector")
        if a.frame != b.frame:
            raise InvalidInputError(f"frame mismatch: {a.frame} vs {b.frame}")
        a, b = a.xyz, b.xyz
    dot = np.sum(np.asarray(a, dtype=float) * np.asarray(b, dtype=float), axis=-1)
    return np.degrees(np.arccos(np.clip(dot, -1.0, 1.0)))


def normalize(v, axis=-1, eps=0.0):
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v, axis=axis, keepdims=True)
    return v / np.maximum(n, eps) if eps else v / n


def nominal_resolution_deg(n_points: int) -> float:
    """Spacing of a hexagonal packing with ``n_points`` cells on the sphere."""
    return float(np.degrees(np.sqrt(8.0 * np.pi / (np.sqrt(3.0) * n_points))))


def fibonacci_directions(n_points: int) -> np.ndarray:
    i = np.arange(n_points, dtype=float)
    z = 1.0 - (2.0 * i + 1.0) / n_points
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = GOLDEN_ANGLE * i
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def build_grid(n_points: int = DEFAULT_GRID_SIZE, seed: int | None = None, k: int = 6) -> SphericalGrid:
    """Golden-angle spiral grid with symmetric k-nearest-neighbour adjacency.

    A non-None ``seed`` applies a seeded random rotation to the whole lattice,
    which keeps the spacing statistics and changes only its placement.
    """
    if n_points < 12:
        raise InvalidInputError("a spherical grid needs at least 12 points")
    dirs = fibonacci_directions(n_points)
    if seed is not None:
        q, _ = random_rotation(np.random.default_rng(seed))
        dirs = dirs @ quat_to_rotation(q).T
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    tree = cKDTree(dirs)
    _, idx = tree.query(dirs, k=k + 1)
    adj = [set() for _ in range(n_points)]
    for i, row in enumerate(idx):
        for j in row[1:]:
            adj[i].add(int(j))
            adj[int(j)].add(i)
    neighbors = [np.array(sorted(s), dtype=np.int64) for s in adj]
    grid = SphericalGrid(dirs, neighbors, nominal_resolution_deg(n_points))
    grid._tree = tree
    return grid


def save_grid_csv(grid: SphericalGrid, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "x", "y", "z"])
        for i, (x, y, z) in enumerate(grid.directions):
            w.writerow([i, repr(float(x)), repr(float(y)), repr(float(z))])


def load_grid_csv(path, k: int = 6) -> SphericalGrid:
    rows = list(csv.DictReader(Path(path).open()))
    dirs = np.array([[float(r["x"]), float(r["y"]), float(r["z"])] for r in rows])
    tree = cKDTree(dirs)
    _, idx = tree.query(dirs, k=k + 1)
    adj = [set() for _ in range(len(dirs))]
    for i, row in enumerate(idx):
        for j in row[1:]:
            adj[i].add(int(j))
            adj[int(j)].add(i)
    return SphericalGrid(dirs, [np.array(sorted(s)) for s in adj], nominal_resolution_deg(len(dirs)))


def random_unit_vectors(rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    shape = (3,) if n is None else (n, 3)
    v = rng.standard_normal(shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def random_rotation(rng: np.random.Generator):
    """Uniform quaternion on S^3 and an independent uniform axis on S^2."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    axis = random_unit_vectors(rng)
    return q, axis


def random_rotation_matrices(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return quat_to_rotation(q)


def commutation_check(P, n_samples: int = 100, tol: float = 1e-6, seed: int = 0) -> bool:
    """True iff ``||RP - PR||_F < tol`` for every sampled rotation R.

    Only ``P = +-I`` commute with all of SO(3), so for orthogonal P this is a
    numerical witness of that fact.
    """
    P = np.asarray(P, dtype=float)
    if P.shape != (3, 3):
        raise InvalidInputError("P must be 3x3")
    if np.abs(P.T @ P - np.eye(3)).max() > tol:
        raise InvalidInputError("P is not orthogonal")
    Rs = random_rotation_matrices(np.random.default_rng(seed), n_samples)
    diff = Rs @ P - P @ Rs
    return bool(np.all(np.linalg.norm(diff, axis=(1, 2)) < tol))
