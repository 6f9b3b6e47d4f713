"""Globally optimal rigid registration: branch-and-bound over SE(3) + ICP.

The rotation space (axis-angle cube [-pi, pi]^3) is searched best-first;
each rotation node runs an inner branch-and-bound over the translation cube
that certifies a lower bound on the clipped residual and proposes the best
translation seen, from which ICP refines the incumbent. Bounds follow the
standard uncertainty-radius construction: a rotation cube of half-side s_r
moves a point p by at most 2 sin(min(sqrt(3) s_r / 2, pi/2)) |p|, and a
translation cube of half-side s_t by sqrt(3) s_t.

Residuals are evaluated from the (possibly partial) target points to the
complete source cloud, since every target point has a true counterpart on
the source; the reported transform still maps source to target.

Node bound evaluation is accelerated by a precomputed nearest-neighbor
distance grid over the fixed cloud. Grid lookups underestimate distances by
at most the snap radius (the distance field is 1-Lipschitz), and that slack
is subtracted before a value enters any lower bound, so bound validity never
depends on the grid. Incumbent objectives are always verified on the exact
k-d tree.
"""

from __future__ import annotations

import heapq
import time
from dataclasses import dataclass

import numpy as np

from .geometry import NnIndex, RigidTransform, Rotation, as_points


@dataclass
class RegistrationConfig:
    epsilon: float = 1e-4            # gap per point on mean squared residual (normalized)
    trans_half_width: float = 0.5    # translation domain half-width, normalized units
    max_outer_iterations: int = 3000
    max_inner_iterations: int = 40
    icp_max_iterations: int = 100
    icp_tolerance: float = 1e-9
    grid_resolution: int = 96        # distance-grid acceleration; 0 = exact tree only

    def __post_init__(self):
        for name in ("epsilon", "trans_half_width", "icp_tolerance"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class RotationNode:
    center: np.ndarray   # axis-angle vector
    half: float          # cube half-side, radians
    lower: float = 0.0
    upper: float = np.inf


@dataclass
class TranslationNode:
    center: np.ndarray
    half: float
    lower: float = 0.0
    upper: float = np.inf


@dataclass
class RegistrationResult:
    transform: RigidTransform   # source -> target, mm frame
    residual: float             # mean squared NN distance, target -> source, mm^2
    iterations: int             # rotation nodes expanded
    wall_time: float
    converged: bool
    gap: float                  # certified optimality gap (normalized, per point)


def rotation_uncertainty(half: float, norms: np.ndarray) -> np.ndarray:
    """Max displacement of points at given radii over a rotation cube."""
    return 2.0 * np.sin(min(np.sqrt(3.0) * half / 2.0, np.pi / 2.0)) * norms


def node_bounds(
    rnode: RotationNode, tnode: TranslationNode, moving: np.ndarray, nn_index: NnIndex
):
    """Lower/upper bounds of the summed squared residual over a joint node.

    Upper is the exact objective at the node centers; lower subtracts the
    rotation and translation uncertainty radii per point before squaring
    (clipped at zero), so lower <= min over the node <= upper.
    """
    pts = as_points(moving)
    rc = Rotation.from_axis_angle(rnode.center)
    moved = rc.apply(pts) + np.asarray(tnode.center, dtype=np.float64)
    e, _ = nn_index.query_batch(moved)
    upper = float(np.sum(e**2))
    gr = rotation_uncertainty(rnode.half, np.linalg.norm(pts, axis=1))
    gt = np.sqrt(3.0) * tnode.half
    lower = float(np.sum(np.maximum(e - gr - gt, 0.0) ** 2))
    return lower, upper


def icp_refine(
    moving: np.ndarray,
    fixed: np.ndarray,
    init: RigidTransform,
    config: RegistrationConfig | None = None,
    fixed_index: NnIndex | None = None,
):
    """Alternate nearest-neighbor correspondence and closed-form rigid fit.

    Returns (transform, residual) with residual the mean squared NN distance
    of the transformed moving cloud; the sequence of residuals is
    non-increasing.
    """
    if config is None:
        config = RegistrationConfig()
    mv = as_points(moving)
    fx = as_points(fixed)
    if len(mv) == 0 or len(fx) == 0:
        raise ValueError("clouds must be non-empty")
    idx = fixed_index if fixed_index is not None else NnIndex(fx)
    transform = init
    prev = np.inf
    for _ in range(config.icp_max_iterations):
        moved = transform.apply(mv)
        d, nn = idx.query_batch(moved)
        res = float(np.mean(d**2))
        if prev - res < config.icp_tolerance:
            break
        prev = res
        transform = _least_squares_rigid(mv, fx[nn])
    moved = transform.apply(mv)
    d, _ = idx.query_batch(moved)
    return transform, float(np.mean(d**2))


def _least_squares_rigid(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Closed-form SVD fit of the rigid map src -> dst (Kabsch/Umeyama)."""
    sc = src.mean(axis=0)
    dc = dst.mean(axis=0)
    h = (src - sc).T @ (dst - dc)
    if np.linalg.norm(h) < 1e-300:
        raise ValueError("degenerate correspondence (all points coincident)")
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    rot = Rotation.project(r)
    return RigidTransform(rot, dc - rot.apply(sc))


class _DistanceField:
    """Dense NN-distance samples of the fixed cloud on a cube lattice.

    ``lower(pts)`` is a guaranteed underestimate of the true NN distance:
    the sampled value minus the exact query-to-sample snap distance (the
    distance field is 1-Lipschitz), clipped at zero. ``estimate(pts)`` is the
    raw sampled value, used only to screen incumbent candidates.
    """

    def __init__(self, tree, extent: float, resolution: int):
        self.extent = extent
        self.res = resolution
        self.cell = 2.0 * extent / (resolution - 1)
        ax = np.linspace(-extent, extent, resolution)
        centers = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)
        d, _ = tree.query(centers, workers=-1)
        self.values = np.ascontiguousarray(d.reshape(resolution, resolution, resolution))

    def _snap(self, pts):
        idx = np.clip(
            np.rint((pts + self.extent) / self.cell).astype(np.int64), 0, self.res - 1
        )
        vals = self.values[idx[:, 0], idx[:, 1], idx[:, 2]]
        snapped = idx * self.cell - self.extent
        err = np.linalg.norm(pts - snapped, axis=1)
        return vals, err

    def lower(self, pts):
        vals, err = self._snap(pts)
        return np.maximum(vals - err, 0.0)

    def estimate(self, pts):
        vals, _ = self._snap(pts)
        return vals


class _InnerResult:
    __slots__ = ("lower", "best_g", "best_t")

    def __init__(self, lower, best_g, best_t):
        self.lower = lower
        self.best_g = best_g
        self.best_t = best_t


_CHILD_OFFSETS = np.array(
    [[dx, dy, dz] for dx in (-1, 1) for dy in (-1, 1) for dz in (-1, 1)], dtype=np.float64
)


def _inner_translation_bnb(rp, dist_lower, dist_estimate, gamma_r, cfg, prune_at):
    """Translation BnB for one rotation node.

    Minimizes the clipped objective f(t) = sum max(e_i(t) - gamma_r_i, 0)^2
    over the translation cube, returning a certified lower bound for it plus
    the best unclipped residual g(t) seen at any visited center (an ICP
    seed). Pruned regions fold their bounds back into the certificate, so an
    iteration cap weakens but never invalidates it.
    """
    n = len(rp)
    sq3 = np.sqrt(3.0)
    root_t = np.zeros(3)
    d_lo = dist_lower(rp)
    f0 = float(np.sum(np.maximum(d_lo - gamma_r, 0.0) ** 2))
    g0 = float(np.sum(dist_estimate(rp) ** 2))
    root_lower = float(
        np.sum(np.maximum(d_lo - gamma_r - sq3 * cfg.trans_half_width, 0.0) ** 2)
    )
    best_f, best_g, best_t = f0, g0, root_t
    floor_pruned = np.inf
    if root_lower >= prune_at:
        return _InnerResult(root_lower, best_g, best_t)
    heap = [(root_lower, 0, root_t, cfg.trans_half_width)]
    seq = 1
    eps_inner = cfg.epsilon * n * 0.1
    for _ in range(cfg.max_inner_iterations):
        if not heap:
            break
        lower, _, t_c, half = heapq.heappop(heap)
        if lower >= min(best_f, prune_at):
            floor_pruned = min(floor_pruned, lower)
            continue
        if best_f - lower < eps_inner:
            heapq.heappush(heap, (lower, -1, t_c, half))
            break
        h2 = half / 2.0
        centers = t_c + _CHILD_OFFSETS * h2
        pts = (rp[None, :, :] + centers[:, None, :]).reshape(-1, 3)
        d_lo = dist_lower(pts).reshape(8, n)
        d_est = dist_estimate(pts).reshape(8, n)
        clip = np.maximum(d_lo - gamma_r[None, :], 0.0)
        f_c = np.einsum("ij,ij->i", clip, clip)
        g_c = np.einsum("ij,ij->i", d_est, d_est)
        lo_m = np.maximum(d_lo - gamma_r[None, :] - sq3 * h2, 0.0)
        lows = np.einsum("ij,ij->i", lo_m, lo_m)
        gi = int(np.argmin(g_c))
        if g_c[gi] < best_g:
            best_g, best_t = float(g_c[gi]), centers[gi]
        for j in range(8):
            if f_c[j] < best_f:
                best_f = float(f_c[j])
            if lows[j] < min(best_f, prune_at):
                heapq.heappush(heap, (float(lows[j]), seq, centers[j], h2))
                seq += 1
            else:
                floor_pruned = min(floor_pruned, float(lows[j]))
    queue_min = min((entry[0] for entry in heap), default=np.inf)
    certified = min(best_f, queue_min, floor_pruned)
    return _InnerResult(certified, best_g, best_t)


def _icp_seed_rotations(n_axes: int = 26):
    """Fixed quasi-uniform covering of SO(3) used to warm-start the incumbent.

    Axes follow a Fibonacci spiral on the sphere; each carries a ladder of
    angles. Roughly a 40-degree covering, which is inside the ICP basin for
    full-overlap clouds, so branch-and-bound usually starts with the optimum
    already in hand and only has to certify it.
    """
    golden = (1.0 + np.sqrt(5.0)) / 2.0
    seeds = [np.zeros(3)]
    for i in range(n_axes):
        z = 1.0 - 2.0 * (i + 0.5) / n_axes
        phi = 2.0 * np.pi * i / golden**2
        r = np.sqrt(max(1.0 - z * z, 0.0))
        axis = np.array([r * np.cos(phi), r * np.sin(phi), z])
        for angle in (np.pi / 4, np.pi / 2, 3 * np.pi / 4):
            seeds.append(axis * angle)
            seeds.append(axis * -angle)
        if z >= 0.0:  # pi rotations: axis and -axis coincide
            seeds.append(axis * np.pi)
    return seeds


_SEED_ROTATIONS = _icp_seed_rotations()


def _multi_start_icp(moving, fixed, index, config):
    """Short screening ICP from every seed, full ICP on the best few."""
    screen_cfg = RegistrationConfig(
        epsilon=config.epsilon,
        trans_half_width=config.trans_half_width,
        icp_max_iterations=8,
        icp_tolerance=config.icp_tolerance,
        grid_resolution=0,
    )
    scored = []
    for i, seed in enumerate(_SEED_ROTATIONS):
        t_s, res_s = icp_refine(
            moving, fixed, RigidTransform(Rotation.from_axis_angle(seed)), screen_cfg, index
        )
        scored.append((res_s, i, t_s))
    scored.sort(key=lambda item: (item[0], item[1]))
    best_t, best_res = None, np.inf
    for res_s, _, t_s in scored[:3]:
        t_ref, res_ref = icp_refine(moving, fixed, t_s, config, index)
        if res_ref < best_res:
            best_t, best_res = t_ref, res_ref
    return best_t, best_res


def goicp_register(
    source_mm: np.ndarray, target_mm: np.ndarray, config: RegistrationConfig | None = None
) -> RegistrationResult:
    """Globally epsilon-optimal rigid registration of source onto target.

    Both clouds are centered and brought to a common scale inside [-1, 1]^3;
    the search covers the full rotation cube regardless of how the test
    rotations were drawn. Terminates when the certified optimality gap drops
    below ``epsilon`` per point, or returns the best transform found with
    ``converged=False`` when the node budget runs out.
    """
    if config is None:
        config = RegistrationConfig()
    t_start = time.perf_counter()
    src = as_points(source_mm)
    tgt = as_points(target_mm)
    c_src = src.mean(axis=0)
    c_tgt = tgt.mean(axis=0)
    scale = max(np.abs(src - c_src).max(), np.abs(tgt - c_tgt).max(), 1e-12)
    fixed = (src - c_src) / scale      # complete source, normalized
    moving = (tgt - c_tgt) / scale     # (partial) target, normalized

    index = NnIndex(fixed)
    tree = index._tree
    norms = np.linalg.norm(moving, axis=1)
    n = len(moving)
    eps_total = config.epsilon * n

    if config.grid_resolution:
        extent = float(norms.max() + np.sqrt(3.0) * config.trans_half_width) + 1e-9
        fld = _DistanceField(tree, extent, config.grid_resolution)
        dist_lower, dist_estimate = fld.lower, fld.estimate
    else:
        def dist_lower(pts):
            return tree.query(pts, workers=-1)[0]

        dist_estimate = dist_lower

    best_transform, best_res = _multi_start_icp(moving, fixed, index, config)
    best_e = best_res * n

    # Priority: certified lower bound first, then the best residual seen in
    # the node (dives toward promising regions), then creation order.
    heap: list = []
    heapq.heappush(heap, (0.0, np.inf, 0, RotationNode(np.zeros(3), np.pi)))
    seq = 1
    outer_iters = 0
    gap = np.inf
    converged = False
    while heap:
        lower, _, _, node = heapq.heappop(heap)
        gap = best_e - lower
        if gap < eps_total:
            converged = True
            break
        if outer_iters >= config.max_outer_iterations:
            break
        outer_iters += 1
        h2 = node.half / 2.0
        gamma_r = rotation_uncertainty(h2, norms)
        for k in range(8):
            center = node.center + h2 * _CHILD_OFFSETS[k]
            rc = Rotation.from_axis_angle(center)
            rp = rc.apply(moving)
            inner = _inner_translation_bnb(
                rp, dist_lower, dist_estimate, gamma_r, config, best_e
            )
            if inner.best_g < best_e * 1.2 + eps_total:
                d, _ = tree.query(rp + inner.best_t)
                e_exact = float(np.sum(d**2))
                cand = RigidTransform(rc, inner.best_t)
                if e_exact < best_e:
                    best_e = e_exact
                    best_transform = cand
                if e_exact < best_e * 4.0 + eps_total:
                    t_ref, res_ref = icp_refine(moving, fixed, cand, config, index)
                    if res_ref * n < best_e:
                        best_e = res_ref * n
                        best_transform = t_ref
            if inner.lower < best_e:
                heapq.heappush(
                    heap, (inner.lower, inner.best_g, seq, RotationNode(center, h2))
                )
                seq += 1
    else:
        # Queue exhausted: every region pruned against the incumbent.
        gap = 0.0
        converged = True

    # Un-normalize. best_transform maps normalized target -> normalized source;
    # in mm that is q -> R q + (c_src + s t - R c_tgt), i.e. target -> source.
    r = best_transform.rotation
    t_mm = c_src + scale * best_transform.translation - r.apply(c_tgt)
    tgt_to_src = RigidTransform(r, t_mm)
    src_to_tgt = tgt_to_src.inverse()
    moved = tgt_to_src.apply(tgt)
    d_mm, _ = index_query_mm(src, moved)
    return RegistrationResult(
        transform=src_to_tgt,
        residual=float(np.mean(d_mm**2)),
        iterations=outer_iters,
        wall_time=time.perf_counter() - t_start,
        converged=converged,
        gap=max(gap, 0.0) / n,
    )


def index_query_mm(fixed_mm, moved_mm):
    return NnIndex(fixed_mm).query_batch(moved_mm)
