"""Multiresolution isosurface extraction and marching cubes.

The occupancy decoder is sampled on a coarse lattice first; only voxels whose
corners straddle the threshold are subdivided, halving the spacing each round
until the finest level. Marching cubes then triangulates the finest lattice.
The refinement saves oracle calls without changing any value it does compute:
every visited lattice point holds the exact oracle output.

Resolutions are nominal powers of two (32 -> 128 means two refinement
rounds); a lattice of ``r`` nominal resolution has ``(r0-1)*2^k + 1`` unique
points per axis because subdivision shares corners.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from ._mc_tables import CORNER_OFFSETS, EDGE_CORNERS, EDGE_TABLE, TRI_TABLE
from .geometry import TriangleMesh
from .vn import OccupancyModel

MISE_MAGIC = b"MISE"
MISE_VERSION = 1


class EmptySurfaceError(RuntimeError):
    """The occupancy field never crosses the threshold inside the cube."""


@dataclass
class ExtractConfig:
    initial_res: int = 32
    final_res: int = 128
    threshold: float = 0.4
    cube_center: tuple = (0.0, 0.0, 0.0)
    cube_half: float = 0.55  # normalized unit cube with a 5% margin

    def __post_init__(self):
        if self.initial_res < 2:
            raise ValueError("initial_res must be >= 2")
        ratio = self.final_res / self.initial_res
        levels = int(round(np.log2(ratio)))
        if self.initial_res * 2**levels != self.final_res:
            raise ValueError("final_res must be initial_res * 2^k")
        if not (0.0 < self.threshold < 1.0):
            raise ValueError("threshold must be in (0, 1)")

    @property
    def levels(self) -> int:
        return int(round(np.log2(self.final_res / self.initial_res)))

    @property
    def fine_points(self) -> int:
        """Unique lattice points per axis at the finest level."""
        return (self.initial_res - 1) * 2**self.levels + 1

    @property
    def cell_width(self) -> float:
        return 2.0 * self.cube_half / (self.fine_points - 1)


@dataclass
class MiseGrid:
    """Sparse occupancy evaluation on a nested lattice.

    ``values`` is the dense finest-level array with NaN at unevaluated
    points; ``evaluated`` marks the points the oracle actually saw.
    """

    config: ExtractConfig
    values: np.ndarray
    evaluated: np.ndarray
    ambiguous_per_level: list
    oracle_calls: int
    stopped_voxels: list  # (bases (m, 3), side) per level, never subdivided
    surface_voxels: np.ndarray  # finest-level bases (m, 3)

    def lattice_positions(self, coords: np.ndarray) -> np.ndarray:
        cfg = self.config
        origin = np.asarray(cfg.cube_center) - cfg.cube_half
        return origin + coords * cfg.cell_width

    def dense_values(self) -> np.ndarray:
        """Finest lattice with unevaluated points filled from their coarse voxel.

        Any unevaluated point lies inside a voxel whose corners all fell on
        one side of the threshold; it inherits that voxel's base-corner value,
        so the thresholded side is exact wherever refinement stopped.
        """
        out = self.values.copy()
        for bases, side in self.stopped_voxels:
            for bx, by, bz in bases:
                block = out[bx:bx + side + 1, by:by + side + 1, bz:bz + side + 1]
                nanmask = np.isnan(block)
                if nanmask.any():
                    block[nanmask] = self.values[bx, by, bz]
        # Anything still NaN was outside every active region at level 0 —
        # cannot happen because level 0 covers the cube.
        return out


def mise(oracle, config: ExtractConfig) -> MiseGrid:
    """Coarse-to-fine lattice evaluation of a batched occupancy oracle.

    ``oracle`` maps (n, 3) positions to (n,) probabilities. A voxel is
    ambiguous when two edge-adjacent corners straddle the threshold; for a
    cube's connected corner graph that is exactly "not all corners on one
    side". Ambiguous voxels split into 8 children (19 fresh lattice points)
    until the finest level.
    """
    cfg = config
    n_fine = cfg.fine_points
    stride = 2**cfg.levels
    values = np.full((n_fine, n_fine, n_fine), np.nan)
    evaluated = np.zeros((n_fine, n_fine, n_fine), dtype=bool)
    calls = 0

    def eval_points(coords: np.ndarray) -> int:
        origin = np.asarray(cfg.cube_center) - cfg.cube_half
        pos = origin + coords * cfg.cell_width
        vals = np.asarray(oracle(pos), dtype=np.float64).ravel()
        if vals.shape != (len(coords),):
            raise ValueError("oracle must return one probability per point")
        values[coords[:, 0], coords[:, 1], coords[:, 2]] = vals
        evaluated[coords[:, 0], coords[:, 1], coords[:, 2]] = True
        return len(coords)

    axis0 = np.arange(0, n_fine, stride)
    level0 = np.stack(np.meshgrid(axis0, axis0, axis0, indexing="ij"), axis=-1).reshape(-1, 3)
    calls += eval_points(level0)

    bases = np.stack(
        np.meshgrid(axis0[:-1], axis0[:-1], axis0[:-1], indexing="ij"), axis=-1
    ).reshape(-1, 3)
    side = stride
    ambiguous_counts = []
    stopped = []
    corner_off = np.asarray(CORNER_OFFSETS)

    for level in range(cfg.levels + 1):
        corners = bases[:, None, :] + corner_off[None, :, :] * side
        vals = values[corners[..., 0], corners[..., 1], corners[..., 2]]
        occ = vals >= cfg.threshold
        mixed = occ.any(axis=1) & ~occ.all(axis=1)
        ambiguous_counts.append(int(mixed.sum()))
        if (~mixed).any():
            stopped.append((bases[~mixed].copy(), side))
        bases = bases[mixed]
        if level == cfg.levels or len(bases) == 0:
            break
        half = side // 2
        child_off = np.stack(
            np.meshgrid([0, half], [0, half], [0, half], indexing="ij"), axis=-1
        ).reshape(-1, 3)
        children = (bases[:, None, :] + child_off[None, :, :]).reshape(-1, 3)
        sub_off = np.stack(
            np.meshgrid([0, half, side], [0, half, side], [0, half, side], indexing="ij"),
            axis=-1,
        ).reshape(-1, 3)
        new_pts = (bases[:, None, :] + sub_off[None, :, :]).reshape(-1, 3)
        new_pts = np.unique(new_pts, axis=0)
        fresh = ~evaluated[new_pts[:, 0], new_pts[:, 1], new_pts[:, 2]]
        if fresh.any():
            calls += eval_points(new_pts[fresh])
        bases = children
        side = half

    return MiseGrid(
        config=cfg,
        values=values,
        evaluated=evaluated,
        ambiguous_per_level=ambiguous_counts,
        oracle_calls=calls,
        stopped_voxels=stopped,
        surface_voxels=bases,
    )


# ---------------------------------------------------------------------------
# Marching cubes


def marching_cubes(
    values: np.ndarray,
    iso: float,
    origin=(0.0, 0.0, 0.0),
    spacing: float = 1.0,
) -> TriangleMesh:
    """Triangulate the iso-level of a dense scalar grid.

    Standard 256-case tables with linear interpolation along crossed edges.
    Values >= iso count as inside. Vertices on shared edges are merged by
    global edge id, so a closed isosurface yields a watertight mesh. Returns
    an empty mesh when the level set is not crossed.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 3 or min(v.shape) < 2:
        raise ValueError("values must be a (>=2)^3 grid")
    occ = v >= iso
    nx, ny, nz = v.shape
    case = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.uint16)
    for bit, (dx, dy, dz) in enumerate(CORNER_OFFSETS):
        case |= occ[dx:dx + nx - 1, dy:dy + ny - 1, dz:dz + nz - 1].astype(np.uint16) << bit
    active = np.argwhere((case != 0) & (case != 255))
    if len(active) == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    cases = case[active[:, 0], active[:, 1], active[:, 2]]
    all_edge_ids = []
    all_tris = []
    corner_off = np.asarray(CORNER_OFFSETS)
    for case_id in np.unique(cases):
        sel = active[cases == case_id]
        tri_edges = np.asarray(TRI_TABLE[case_id], dtype=np.int64).reshape(-1, 3)
        if len(tri_edges) == 0:
            continue
        ids = np.empty((len(sel), 12), dtype=np.int64)
        needed = sorted({e for tri in tri_edges for e in tri})
        for e in needed:
            base, axis = _EDGE_BASE[e], _EDGE_AXIS[e]
            pa = sel + corner_off[base]
            ids[:, e] = ((pa[:, 0] * ny + pa[:, 1]) * nz + pa[:, 2]) * 3 + axis
        all_edge_ids.append(ids[:, tri_edges.ravel()].reshape(-1, 3))
    tris = np.concatenate(all_edge_ids, axis=0)

    uniq, inverse = np.unique(tris.ravel(), return_inverse=True)
    # The tabulation winds clockwise for "inside >= iso"; swap to outward.
    faces = inverse.reshape(-1, 3)[:, ::-1]

    # Decode edge ids back to (point, axis) and interpolate the crossing.
    axis = uniq % 3
    lin = uniq // 3
    pz = lin % nz
    py = (lin // nz) % ny
    px = lin // (nz * ny)
    pa = np.stack([px, py, pz], axis=1)
    pb = pa.copy()
    pb[np.arange(len(pb)), axis] += 1
    va = v[pa[:, 0], pa[:, 1], pa[:, 2]]
    vb = v[pb[:, 0], pb[:, 1], pb[:, 2]]
    t = np.where(vb != va, (iso - va) / np.where(vb != va, vb - va, 1.0), 0.5)
    t = np.clip(t, 0.0, 1.0)
    verts = (pa + t[:, None] * (pb - pa)) * spacing + np.asarray(origin, dtype=np.float64)
    return TriangleMesh(verts, faces)


def _edge_layout():
    """Per local edge: varying axis and the corner at the low end of it."""
    axes, bases = [], []
    for a, b in EDGE_CORNERS:
        d = np.subtract(CORNER_OFFSETS[b], CORNER_OFFSETS[a])
        axis = int(np.argmax(np.abs(d)))
        axes.append(axis)
        bases.append(a if CORNER_OFFSETS[a][axis] < CORNER_OFFSETS[b][axis] else b)
    return tuple(axes), tuple(bases)


_EDGE_AXIS, _EDGE_BASE = _edge_layout()


# ---------------------------------------------------------------------------
# End-to-end surface completion


def make_decoder_oracle(model: OccupancyModel, latent):
    """Batched occupancy oracle in the normalized frame for a fixed latent."""

    def oracle(points: np.ndarray) -> np.ndarray:
        from .vn import decode_batch

        probs, _, _ = decode_batch(
            np.asarray(points, dtype=np.float64)[None], latent[None], model.params, model.arch
        )
        return probs[0]

    return oracle


def complete_surface(
    partial_mm: np.ndarray,
    model: OccupancyModel,
    config: ExtractConfig | None = None,
) -> TriangleMesh:
    """Watertight completed surface (mm frame) from a partial target cloud.

    The cloud is centered on its own centroid and scaled by the recorded
    patient scale, the latent is computed, the occupancy field is extracted
    with MISE + marching cubes in the normalized frame, and the vertices are
    mapped back to millimeters.
    """
    pts = np.asarray(partial_mm, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise ValueError("partial cloud must be a non-empty (n, 3) array")
    centroid = pts.mean(axis=0)
    normalized = model.canon.normalize(pts, centroid)
    z = model.encode(normalized)
    if config is None:
        config = ExtractConfig(threshold=model.threshold, cube_half=model.canon.cube_half)
    grid = mise(make_decoder_oracle(model, z), config)
    if len(grid.surface_voxels) == 0:
        raise EmptySurfaceError("occupancy field never crosses the threshold")
    origin = np.asarray(config.cube_center) - config.cube_half
    mesh_n = marching_cubes(grid.dense_values(), config.threshold, origin, config.cell_width)
    if len(mesh_n.vertices) == 0:
        raise EmptySurfaceError("marching cubes produced no vertices")
    return TriangleMesh(model.canon.denormalize(mesh_n.vertices, centroid), mesh_n.faces)


def save_mise_dump(path, grid: MiseGrid) -> None:
    """Versioned binary lattice dump for regression comparisons."""
    coords = np.argwhere(grid.evaluated)
    vals = grid.values[coords[:, 0], coords[:, 1], coords[:, 2]]
    header = {
        "fine_points": grid.config.fine_points,
        "threshold": grid.config.threshold,
        "count": len(coords),
        "oracle_calls": grid.oracle_calls,
        "ambiguous_per_level": grid.ambiguous_per_level,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MISE_MAGIC)
        fh.write(struct.pack("<II", MISE_VERSION, len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(coords, dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(vals, dtype="<f8").tobytes())


def load_mise_dump(path):
    with open(path, "rb") as fh:
        if fh.read(4) != MISE_MAGIC:
            raise ValueError(f"{path}: not a MISE dump")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != MISE_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        n = header["count"]
        coords = np.frombuffer(fh.read(12 * n), dtype="<i4").reshape(n, 3).copy()
        vals = np.frombuffer(fh.read(8 * n), dtype="<f8").copy()
    return header, coords, vals
