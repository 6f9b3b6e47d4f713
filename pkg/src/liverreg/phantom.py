"""Synthetic desk-scale phantom: a bumpy ellipsoid with interior fiducials.

Stands in for the molded gelatin phantoms used to evaluate registration.
The shape is deliberately elongated and asymmetric so that a misrotated
reconstruction scores badly, and the fiducials live strictly inside the
surface, as landmarks would.
"""

from __future__ import annotations

import numpy as np

from .geometry import TriangleMesh

DEFAULT_SEMI_AXES = (60.0, 38.0, 24.0)  # mm


def icosphere(subdivisions: int = 4, radius: float = 1.0) -> TriangleMesh:
    """Geodesic sphere from repeated icosahedron subdivision (watertight)."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    for _ in range(subdivisions):
        edge_mid: dict = {}
        new_faces = []
        vlist = list(verts)

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in edge_mid:
                m = vlist[i] + vlist[j]
                m = m / np.linalg.norm(m)
                edge_mid[key] = len(vlist)
                vlist.append(m)
            return edge_mid[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.asarray(vlist)
        faces = np.asarray(new_faces, dtype=np.int64)
    return TriangleMesh(verts * radius, faces)


def bumpy_ellipsoid(
    semi_axes=DEFAULT_SEMI_AXES,
    bump_amplitude: float = 0.08,
    n_bumps: int = 6,
    subdivisions: int = 4,
    seed: int = 0,
) -> TriangleMesh:
    """Elongated ellipsoid with smooth radial bumps (mm), centered at origin.

    Bumps are cosine lobes around random directions, so the surface stays
    star-shaped and watertight at any amplitude below 1.
    """
    sphere = icosphere(subdivisions)
    u = sphere.vertices  # unit directions
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(n_bumps, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    amp = rng.uniform(0.4, 1.0, size=n_bumps) * bump_amplitude
    sharp = rng.uniform(2.0, 5.0, size=n_bumps)
    bump = np.ones(len(u))
    for d, a, s in zip(dirs, amp, sharp):
        c = np.clip(u @ d, -1.0, 1.0)
        bump += a * ((c + 1.0) / 2.0) ** s
    verts = u * bump[:, None] * np.asarray(semi_axes, dtype=np.float64)
    return TriangleMesh(verts, sphere.faces)


def interior_fiducials(mesh: TriangleMesh, count: int = 60, seed: int = 0) -> np.ndarray:
    """Well-spread landmark points strictly inside the mesh (mm)."""
    from .train import points_inside_mesh  # local import to avoid a cycle

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF1]))
    lo, hi = mesh.bounding_box()
    picked: list = []
    shrink = 0.15  # keep away from the surface so deformed fiducials stay interior
    for _ in range(40):
        cand = rng.uniform(lo + shrink * (hi - lo), hi - shrink * (hi - lo), size=(count * 4, 3))
        inside = points_inside_mesh(mesh, cand, rng)
        picked.extend(cand[inside])
        if len(picked) >= count:
            break
    if len(picked) < count:
        raise RuntimeError(f"could not place {count} interior fiducials")
    return np.asarray(picked[:count])
