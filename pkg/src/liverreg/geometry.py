"""Point-cloud and rigid-motion primitives plus the partial-view sampling protocol.

Everything here works on double-precision numpy arrays in millimeters.
Point clouds are ``(n, 3)`` arrays; meshes are vertex/face index pairs.
All sampling is driven by explicit ``numpy.random.Generator`` instances so
that every downstream artifact is reproducible from a seed.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

ROTATION_TOL = 1e-12


class CloudRole(enum.Enum):
    SOURCE = "source"
    PARTIAL_TARGET = "partial_target"
    COMPLETED_TARGET = "completed_target"
    GROUND_TRUTH = "ground_truth"


def as_points(a, name: str = "points") -> np.ndarray:
    """Validate and return an (n, 3) float64 array. Rejects NaN/Inf."""
    pts = np.asarray(a, dtype=np.float64)
    if pts.ndim == 1 and pts.shape == (3,):
        pts = pts[None, :]
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"{name} must have shape (n, 3), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError(f"{name} contains NaN or Inf")
    return pts


@dataclass(frozen=True)
class PointCloud:
    """An ordered list of 3-D points (mm) with a pipeline role."""

    points: np.ndarray
    role: CloudRole = CloudRole.SOURCE

    def __post_init__(self):
        object.__setattr__(self, "points", as_points(self.points))

    def __len__(self) -> int:
        return len(self.points)


class Rotation:
    """A proper rotation: 3x3 orthonormal matrix with determinant +1."""

    __slots__ = ("matrix",)

    def __init__(self, matrix):
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"rotation matrix must be 3x3, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("rotation matrix contains NaN or Inf")
        err = np.abs(m.T @ m - np.eye(3)).max()
        if err > 1e-10:
            raise ValueError(f"matrix is not orthonormal (|R^T R - I| = {err:.3g})")
        if abs(np.linalg.det(m) - 1.0) > 1e-10:
            raise ValueError("matrix determinant is not +1 (improper rotation?)")
        self.matrix = m

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.eye(3))

    @classmethod
    def from_axis_angle(cls, r) -> "Rotation":
        """Rodrigues map from an axis-angle vector (axis * angle, radians)."""
        r = np.asarray(r, dtype=np.float64).reshape(3)
        theta = np.linalg.norm(r)
        if theta < 1e-300:
            return cls.identity()
        k = r / theta
        kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
        m = np.eye(3) + np.sin(theta) * kx + (1.0 - np.cos(theta)) * (kx @ kx)
        return cls(m)

    @classmethod
    def about_axis(cls, axis: str, angle: float) -> "Rotation":
        unit = {"x": (1.0, 0.0, 0.0), "y": (0.0, 1.0, 0.0), "z": (0.0, 0.0, 1.0)}[axis]
        return cls.from_axis_angle(np.asarray(unit) * angle)

    @classmethod
    def project(cls, matrix) -> "Rotation":
        """Nearest proper rotation to an approximately-orthonormal matrix."""
        u, _, vt = np.linalg.svd(np.asarray(matrix, dtype=np.float64))
        d = np.sign(np.linalg.det(u @ vt))
        return cls(u @ np.diag([1.0, 1.0, d]) @ vt)

    def as_axis_angle(self) -> np.ndarray:
        m = self.matrix
        cos_t = np.clip((np.trace(m) - 1.0) / 2.0, -1.0, 1.0)
        theta = np.arccos(cos_t)
        if theta < 1e-12:
            return np.zeros(3)
        if abs(np.pi - theta) < 1e-7:
            # Near pi the off-diagonal formula degenerates; use the symmetric part.
            a = (m + np.eye(3)) / 2.0
            axis = np.sqrt(np.clip(np.diag(a), 0.0, None))
            # Fix signs from the largest component.
            i = int(np.argmax(axis))
            axis[(i + 1) % 3] = a[i, (i + 1) % 3] / axis[i] if axis[i] > 0 else axis[(i + 1) % 3]
            axis[(i + 2) % 3] = a[i, (i + 2) % 3] / axis[i] if axis[i] > 0 else axis[(i + 2) % 3]
            axis = axis / np.linalg.norm(axis)
            return axis * theta
        v = np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
        return v / (2.0 * np.sin(theta)) * theta

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.matrix.T

    def compose(self, other: "Rotation") -> "Rotation":
        return Rotation(self.matrix @ other.matrix)

    def inverse(self) -> "Rotation":
        return Rotation(self.matrix.T.copy())

    def angle_to(self, other: "Rotation") -> float:
        """Geodesic angle (radians) between two rotations."""
        cos_t = np.clip((np.trace(self.matrix.T @ other.matrix) - 1.0) / 2.0, -1.0, 1.0)
        return float(np.arccos(cos_t))

    def __repr__(self):
        return f"Rotation({self.matrix.tolist()})"


@dataclass(frozen=True)
class RigidTransform:
    """Rotation followed by translation: p -> R p + t (mm)."""

    rotation: Rotation
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation contains NaN or Inf")
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(Rotation.identity(), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.rotation.apply(points) + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """(self o other)(p) == self(other(p))."""
        return RigidTransform(
            self.rotation.compose(other.rotation),
            self.rotation.apply(other.translation) + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rinv = self.rotation.inverse()
        return RigidTransform(rinv, -rinv.apply(self.translation))

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.matrix
        m[:3, 3] = self.translation
        return m

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError("expected a 4x4 matrix")
        return cls(Rotation(m[:3, :3]), m[:3, 3])


def apply_transform(transform: RigidTransform, cloud):
    """Apply a rigid transform to a cloud, preserving order (and role)."""
    if isinstance(cloud, PointCloud):
        return PointCloud(transform.apply(cloud.points), cloud.role)
    return transform.apply(as_points(cloud))


class RotationMode(enum.Enum):
    NONE = "none"
    Z_AXIS = "z_axis"
    SO3 = "so3"


def random_rotation(
    mode: RotationMode | str,
    angle_range: tuple[float, float] = (-np.pi / 2, np.pi / 2),
    rng: np.random.Generator | None = None,
) -> Rotation:
    """Draw a rotation for the configured augmentation mode.

    ``z_axis`` rotates about +z by an angle uniform in ``angle_range``;
    ``so3`` picks an axis uniformly on the sphere and an angle uniform in
    ``angle_range``. ``none`` is the identity and consumes no randomness.
    """
    mode = RotationMode(mode)
    lo, hi = float(angle_range[0]), float(angle_range[1])
    if lo > hi or lo < -np.pi - 1e-12 or hi > np.pi + 1e-12:
        raise ValueError(f"angle range must satisfy -pi <= lo <= hi <= pi, got {angle_range}")
    if mode is RotationMode.NONE:
        return Rotation.identity()
    if rng is None:
        rng = np.random.default_rng()
    angle = rng.uniform(lo, hi)
    if mode is RotationMode.Z_AXIS:
        return Rotation.about_axis("z", angle)
    axis = rng.normal(size=3)
    n = np.linalg.norm(axis)
    while n < 1e-12:
        axis = rng.normal(size=3)
        n = np.linalg.norm(axis)
    return Rotation.from_axis_angle(axis / n * angle)


def farthest_point_downsample(
    points, count: int, rng: np.random.Generator | None = None
) -> np.ndarray:
    """Greedy farthest-point subset of exactly ``count`` points.

    The first point is drawn from ``rng``; every following pick maximizes the
    minimum distance to the points already selected (ties to the lowest
    index). Returns the selected points ordered by original index, so
    ``count == len(points)`` reproduces the input.
    """
    pts = as_points(points)
    n = len(pts)
    if count < 1:
        raise ValueError("count must be >= 1")
    if n < count:
        raise ValueError(f"cannot downsample {n} points to {count}")
    if rng is None:
        rng = np.random.default_rng()
    selected = np.empty(count, dtype=np.intp)
    selected[0] = int(rng.integers(n))
    mind = np.linalg.norm(pts - pts[selected[0]], axis=1)
    for i in range(1, count):
        nxt = int(np.argmax(mind))  # argmax takes the lowest index on ties
        selected[i] = nxt
        np.minimum(mind, np.linalg.norm(pts - pts[nxt], axis=1), out=mind)
    return pts[np.sort(selected)]


def partial_view(points, viewpoint, count: int) -> np.ndarray:
    """The ``count`` points nearest to the viewpoint, ties broken by index.

    Output is ordered by increasing distance (then index), mimicking a
    depth-limited acquisition from that vantage point.
    """
    pts = as_points(points)
    if len(pts) < count:
        raise ValueError(f"need at least {count} points, have {len(pts)}")
    v = np.asarray(viewpoint, dtype=np.float64).reshape(3)
    d = np.linalg.norm(pts - v, axis=1)
    order = np.lexsort((np.arange(len(pts)), d))
    return pts[order[:count]]


class NnIndex:
    """Immutable exact nearest-neighbor index (balanced k-d tree)."""

    def __init__(self, points):
        self.points = as_points(points)
        if len(self.points) == 0:
            raise ValueError("cannot index an empty cloud")
        self._tree = cKDTree(self.points, balanced_tree=True)

    def query(self, q) -> tuple[int, float]:
        """Exact nearest neighbor of a single point; ties -> lowest index."""
        q = np.asarray(q, dtype=np.float64).reshape(3)
        k = min(4, len(self.points))
        d, idx = self._tree.query(q, k=k)
        d, idx = np.atleast_1d(d), np.atleast_1d(idx)
        tied = idx[d == d[0]]
        return int(tied.min()), float(d[0])

    def query_batch(self, pts) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized nearest-neighbor distances and indices (no tie rule)."""
        d, idx = self._tree.query(np.asarray(pts, dtype=np.float64))
        return d, idx


# ---------------------------------------------------------------------------
# Triangle meshes


@dataclass
class TriangleMesh:
    """Triangle mesh with (n, 3) float vertices and (m, 3) int faces."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = as_points(self.vertices, "vertices")
        faces = np.asarray(self.faces, dtype=np.int64)
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise ValueError(f"faces must have shape (m, 3), got {faces.shape}")
        if len(faces) and (faces.min() < 0 or faces.max() >= len(self.vertices)):
            raise ValueError("face indices out of range")
        self.faces = faces

    def face_normals(self, normalize: bool = True) -> np.ndarray:
        v = self.vertices
        f = self.faces
        n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        if normalize:
            lens = np.linalg.norm(n, axis=1)
            lens[lens == 0] = 1.0
            n = n / lens[:, None]
        return n

    def vertex_normals(self) -> np.ndarray:
        """Area-weighted average of incident face normals, unit length."""
        weighted = self.face_normals(normalize=False)
        out = np.zeros_like(self.vertices)
        for c in range(3):
            np.add.at(out, self.faces[:, c], weighted)
        lens = np.linalg.norm(out, axis=1)
        if np.all(lens == 0):
            raise ValueError("degenerate mesh: zero-area faces only")
        lens[lens == 0] = 1.0
        return out / lens[:, None]

    def edges(self) -> np.ndarray:
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        return np.sort(e, axis=1)

    def boundary_edge_count(self) -> int:
        e = self.edges()
        _, counts = np.unique(e, axis=0, return_counts=True)
        return int(np.sum(counts != 2))

    def is_watertight(self) -> bool:
        """Edge-manifold test: every undirected edge shared by exactly 2 faces."""
        return len(self.faces) > 0 and self.boundary_edge_count() == 0

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def bounding_sphere(self) -> tuple[np.ndarray, float]:
        """Centroid-centered bounding sphere (not minimal, but stable)."""
        c = self.vertices.mean(axis=0)
        r = float(np.linalg.norm(self.vertices - c, axis=1).max())
        return c, r

    def signed_volume(self) -> float:
        v = self.vertices
        f = self.faces
        return float(np.einsum("ij,ij->", v[f[:, 0]], np.cross(v[f[:, 1]], v[f[:, 2]]))) / 6.0


def crop_posterior(mesh: TriangleMesh, anterior_axis) -> np.ndarray:
    """Vertices on the anterior side: outward normal . axis > 0.

    Models the posterior-surface removal applied before building partial
    intra-operative views; the camera-facing (anterior) half is kept.
    """
    axis = np.asarray(anterior_axis, dtype=np.float64).reshape(3)
    n = np.linalg.norm(axis)
    if not (0.99 < n < 1.01):
        raise ValueError("anterior_axis must be a unit vector")
    normals = mesh.vertex_normals()
    keep = normals @ axis > 0.0
    return mesh.vertices[keep]


# ---------------------------------------------------------------------------
# Viewpoints

TEST_VIEWPOINT_AZIMUTHS_DEG = (0.0, 72.0, 144.0, 216.0, 288.0)
TEST_VIEWPOINT_ELEVATION_DEG = 45.0


def hemisphere_viewpoint(
    center,
    radius: float,
    rng: np.random.Generator,
    anterior_axis=(0.0, 0.0, 1.0),
) -> np.ndarray:
    """Random viewpoint, area-uniform on the anterior hemisphere of ``radius``."""
    axis = np.asarray(anterior_axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    az = rng.uniform(0.0, 2.0 * np.pi)
    cos_el = rng.uniform(0.0, 1.0)  # area-uniform over the half sphere
    sin_el = np.sqrt(1.0 - cos_el * cos_el)
    local = np.array([sin_el * np.cos(az), sin_el * np.sin(az), cos_el])
    return np.asarray(center, dtype=np.float64) + radius * _align_z(axis) @ local


def fixed_test_viewpoints(center, radius: float, anterior_axis=(0.0, 0.0, 1.0)) -> np.ndarray:
    """The five reproducible evaluation viewpoints (azimuths 72 deg apart, elevation 45)."""
    axis = np.asarray(anterior_axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    el = np.deg2rad(TEST_VIEWPOINT_ELEVATION_DEG)
    out = []
    for az_deg in TEST_VIEWPOINT_AZIMUTHS_DEG:
        az = np.deg2rad(az_deg)
        local = np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        out.append(np.asarray(center, dtype=np.float64) + radius * _align_z(axis) @ local)
    return np.asarray(out)


def _align_z(axis: np.ndarray) -> np.ndarray:
    """Rotation taking +z onto ``axis`` (any fixed choice of roll)."""
    z = np.array([0.0, 0.0, 1.0])
    c = float(np.dot(z, axis))
    if c > 1.0 - 1e-12:
        return np.eye(3)
    if c < -1.0 + 1e-12:
        return np.diag([1.0, -1.0, -1.0])
    v = np.cross(z, axis)
    vx = np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])
    return np.eye(3) + vx + vx @ vx / (1.0 + c)
