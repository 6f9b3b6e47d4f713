"""Procedural smooth deformations of a patient mesh.

Gaussian radial-basis displacement fields stand in for a finite-element
simulation: they are smooth, cheap, magnitude-controlled, and preserve mesh
connectivity, which is all the completion network ever sees. This is a
documented fidelity gap versus hyperelastic tissue models.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import TriangleMesh

MAX_CONTROL_POINTS = 8
MAX_FLIP_RESAMPLES = 20


@dataclass
class DeformField:
    """Sum of Gaussian RBF displacements: v + sum_j d_j exp(-|v-c_j|^2 / 2 s_j^2)."""

    centers: np.ndarray       # (k, 3) mm
    displacements: np.ndarray  # (k, 3) mm
    bandwidths: np.ndarray     # (k,) mm

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 3)
        self.displacements = np.asarray(self.displacements, dtype=np.float64).reshape(-1, 3)
        self.bandwidths = np.asarray(self.bandwidths, dtype=np.float64).ravel()
        k = len(self.centers)
        if not (1 <= k <= MAX_CONTROL_POINTS):
            raise ValueError(f"need 1..{MAX_CONTROL_POINTS} control points, got {k}")
        if len(self.displacements) != k or len(self.bandwidths) != k:
            raise ValueError("centers/displacements/bandwidths length mismatch")
        if np.any(self.bandwidths <= 0):
            raise ValueError("bandwidths must be positive")

    def displacement(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        d2 = ((pts[:, None, :] - self.centers[None, :, :]) ** 2).sum(axis=2)
        w = np.exp(-d2 / (2.0 * self.bandwidths[None, :] ** 2))
        return w @ self.displacements

    def scaled(self, factor: float) -> "DeformField":
        return DeformField(self.centers, self.displacements * factor, self.bandwidths)

    def to_record(self) -> dict:
        return {
            "centers": self.centers.tolist(),
            "displacements": self.displacements.tolist(),
            "bandwidths": self.bandwidths.tolist(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "DeformField":
        return cls(
            np.asarray(rec["centers"]),
            np.asarray(rec["displacements"]),
            np.asarray(rec["bandwidths"]),
        )


@dataclass
class DeformConfig:
    n_fields: int = 500
    max_disp: float | None = None  # mm; default 15% of bounding-sphere radius
    rng_seed: int = 0
    bandwidth_range: tuple = (0.25, 0.6)  # relative to bounding-sphere radius

    def resolved_max_disp(self, mesh: TriangleMesh) -> float:
        if self.max_disp is not None:
            if self.max_disp <= 0:
                raise ValueError("max_disp must be positive")
            return float(self.max_disp)
        _, radius = mesh.bounding_sphere()
        return 0.15 * radius


def sample_field(mesh: TriangleMesh, max_disp: float, bandwidth_range, rng) -> DeformField:
    """Random field anchored at surface vertices, capped at max_disp motion."""
    _, radius = mesh.bounding_sphere()
    k = int(rng.integers(1, MAX_CONTROL_POINTS + 1))
    centers = mesh.vertices[rng.integers(0, len(mesh.vertices), size=k)]
    dirs = rng.normal(size=(k, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    mags = rng.uniform(0.3, 1.0, size=k) * max_disp
    sig = rng.uniform(bandwidth_range[0], bandwidth_range[1], size=k) * radius
    f = DeformField(centers, dirs * mags[:, None], sig)
    peak = np.linalg.norm(f.displacement(mesh.vertices), axis=1).max()
    if peak > max_disp:
        f = f.scaled(max_disp / peak)
    return f


def generate_deformation(mesh: TriangleMesh, f: DeformField) -> TriangleMesh:
    """Apply a displacement field; rejects fields that flip any face normal."""
    moved = mesh.vertices + f.displacement(mesh.vertices)
    out = TriangleMesh(moved, mesh.faces)
    before = mesh.face_normals(normalize=False)
    after = out.face_normals(normalize=False)
    if np.any(np.einsum("ij,ij->i", before, after) <= 0.0):
        raise ValueError("deformation flips a face normal")
    if len(np.unique(moved, axis=0)) != len(moved):
        raise ValueError("deformation collapses vertices")
    return out


def generate_dataset(mesh: TriangleMesh, config: DeformConfig):
    """Deterministic set of flip-free deformed meshes.

    Returns (meshes, fields); each item has its own seed stream derived from
    the master seed so regeneration from the manifest is exact.
    """
    if not mesh.is_watertight():
        raise ValueError("input mesh must be watertight")
    max_disp = config.resolved_max_disp(mesh)
    streams = np.random.SeedSequence([config.rng_seed, 0xDF]).spawn(config.n_fields)
    meshes, fields = [], []
    for i in range(config.n_fields):
        rng = np.random.default_rng(streams[i])
        for attempt in range(MAX_FLIP_RESAMPLES):
            f = sample_field(mesh, max_disp, config.bandwidth_range, rng)
            try:
                deformed = generate_deformation(mesh, f)
            except ValueError:
                continue
            break
        else:
            raise RuntimeError(
                f"deformation {i}: no flip-free field after {MAX_FLIP_RESAMPLES} resamples"
            )
        meshes.append(deformed)
        fields.append(f)
    return meshes, fields
