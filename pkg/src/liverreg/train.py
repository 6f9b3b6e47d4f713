"""Patient-specific supervised training of the occupancy network.

Covers query-set generation (uniform box samples labeled by a robust
ray-parity test), the binary cross-entropy objective with exact analytic
gradients for every parameter, Adam, dataset splitting, and the epoch loop
that regenerates partial targets on the fly under the configured rotation
mode.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import vn
from .geometry import (
    Rotation,
    RotationMode,
    TriangleMesh,
    crop_posterior,
    farthest_point_downsample,
    hemisphere_viewpoint,
    partial_view,
    random_rotation,
)

QUERY_MAGIC = b"QSMP"
QUERY_VERSION = 1

ROTATION_MODE_NAMES = {"I": RotationMode.NONE, "Z": RotationMode.Z_AXIS, "SO3": RotationMode.SO3}


class TrainingDiverged(RuntimeError):
    """Raised when the loss turns non-finite."""


# ---------------------------------------------------------------------------
# Query sets


@dataclass
class QuerySample:
    """Occupancy supervision: query points (mm) with inside/outside labels."""

    points: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if len(self.points) != len(self.labels):
            raise ValueError("points/labels length mismatch")
        if self.labels.size and not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValueError("labels must be 0/1")


def make_query_set(mesh: TriangleMesh, count: int, rng: np.random.Generator) -> QuerySample:
    """Uniform samples in the 10%-padded bounding box, labeled by ray parity."""
    if not mesh.is_watertight():
        raise ValueError("mesh is not watertight (boundary edge detected)")
    lo, hi = mesh.bounding_box()
    pad = 0.1 * (hi - lo)
    pts = rng.uniform(lo - pad, hi + pad, size=(count, 3))
    labels = points_inside_mesh(mesh, pts, rng).astype(np.uint8)
    return QuerySample(pts, labels)


def points_inside_mesh(mesh: TriangleMesh, points: np.ndarray, rng=None) -> np.ndarray:
    """Ray-parity inside test, robust to edge/vertex grazing.

    Casts +z rays binned on a 2-D grid; any query whose ray passes within
    epsilon of a triangle boundary (or a near-vertical triangle) is re-tested
    along random directions until unambiguous.
    """
    pts = np.asarray(points, dtype=np.float64)
    if rng is None:
        rng = np.random.default_rng(0)
    inside, ambiguous = _parity_z(mesh.vertices, mesh.faces, pts)
    tries = 0
    while ambiguous.any():
        tries += 1
        if tries > 8:
            raise RuntimeError("ray parity stayed ambiguous after 8 random directions")
        rot = random_rotation(RotationMode.SO3, (-np.pi, np.pi), rng)
        sub = np.where(ambiguous)[0]
        ins, amb = _parity_z(rot.apply(mesh.vertices), mesh.faces, rot.apply(pts[sub]))
        inside[sub] = ins
        ambiguous[sub] = amb
    return inside


def _parity_z(verts, faces, pts, grid: int = 24):
    """Crossing parity of +z rays; returns (inside, ambiguous) bool arrays."""
    a, b, c = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    diag = float(np.linalg.norm(verts.max(0) - verts.min(0)))
    eps_b = 1e-9
    eps_z = 1e-9 * max(diag, 1.0)

    lo = np.minimum(np.minimum(a, b), c)[:, :2]
    hi = np.maximum(np.maximum(a, b), c)[:, :2]
    gmin = verts[:, :2].min(0)
    gmax = verts[:, :2].max(0)
    span = np.maximum(gmax - gmin, 1e-12)

    def to_cell(xy):
        return np.clip(((xy - gmin) / span * grid).astype(np.int64), 0, grid - 1)

    # Triangle -> covered cells (CSR layout).
    lo_c, hi_c = to_cell(lo), to_cell(hi)
    counts = (hi_c[:, 0] - lo_c[:, 0] + 1) * (hi_c[:, 1] - lo_c[:, 1] + 1)
    tri_of_entry = np.repeat(np.arange(len(faces)), counts)
    cell_entries = np.empty(len(tri_of_entry), dtype=np.int64)
    pos = 0
    for t in range(len(faces)):
        xs = np.arange(lo_c[t, 0], hi_c[t, 0] + 1)
        ys = np.arange(lo_c[t, 1], hi_c[t, 1] + 1)
        block = (xs[:, None] * grid + ys[None, :]).ravel()
        cell_entries[pos:pos + block.size] = block
        pos += block.size
    order = np.argsort(cell_entries, kind="stable")
    cell_entries = cell_entries[order]
    tri_of_entry = tri_of_entry[order]
    starts = np.searchsorted(cell_entries, np.arange(grid * grid))
    ends = np.searchsorted(cell_entries, np.arange(grid * grid), side="right")

    p_cell = to_cell(pts[:, :2])
    p_cell_id = p_cell[:, 0] * grid + p_cell[:, 1]
    cand_counts = ends[p_cell_id] - starts[p_cell_id]
    qi = np.repeat(np.arange(len(pts)), cand_counts)
    ti = np.concatenate(
        [tri_of_entry[starts[cid]:ends[cid]] for cid in p_cell_id]
    ) if len(pts) else np.empty(0, dtype=np.int64)

    # Outside the mesh footprint entirely -> 0 crossings.
    inside = np.zeros(len(pts), dtype=bool)
    ambiguous = np.zeros(len(pts), dtype=bool)
    if len(qi) == 0:
        return inside, ambiguous

    p = pts[qi]
    a_, b_, c_ = a[ti], b[ti], c[ti]
    d1 = b_[:, :2] - a_[:, :2]
    d2 = c_[:, :2] - a_[:, :2]
    den = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    dp = p[:, :2] - a_[:, :2]
    wb = (dp[:, 0] * d2[:, 1] - dp[:, 1] * d2[:, 0])
    wc = (d1[:, 0] * dp[:, 1] - d1[:, 1] * dp[:, 0])
    small_den = np.abs(den) < 1e-12
    den_safe = np.where(small_den, 1.0, den)
    u = wb / den_safe
    v = wc / den_safe
    w = 1.0 - u - v
    strict_in = (u > eps_b) & (v > eps_b) & (w > eps_b) & ~small_den
    near_edge = (
        (u > -eps_b) & (v > -eps_b) & (w > -eps_b) & ~strict_in
    )
    z_hit = w * a_[:, 2] + u * b_[:, 2] + v * c_[:, 2]
    dz = z_hit - p[:, 2]
    crossing = strict_in & (dz > eps_z)
    amb_pair = (near_edge & (dz > -eps_z)) | (strict_in & (np.abs(dz) <= eps_z)) | (
        small_den & (u == u)  # vertical triangle in this cell: be conservative
        & (np.maximum(np.abs(dp[:, 0]), np.abs(dp[:, 1])) <= np.maximum(
            np.abs(d1).max(axis=1), np.abs(d2).max(axis=1)))
    )

    hits = np.zeros(len(pts), dtype=np.int64)
    np.add.at(hits, qi, crossing.astype(np.int64))
    np.logical_or.at(ambiguous, qi, amb_pair)
    inside = (hits % 2) == 1
    return inside, ambiguous


def save_query_sample(path, sample: QuerySample) -> None:
    header = {"count": len(sample.points)}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(QUERY_MAGIC)
        fh.write(struct.pack("<II", QUERY_VERSION, len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(sample.points, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(sample.labels, dtype=np.uint8).tobytes())


def load_query_sample(path) -> QuerySample:
    with open(path, "rb") as fh:
        if fh.read(4) != QUERY_MAGIC:
            raise ValueError(f"{path}: not a query-sample file")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != QUERY_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        n = header["count"]
        pts = np.frombuffer(fh.read(24 * n), dtype="<f8").reshape(n, 3).copy()
        labels = np.frombuffer(fh.read(n), dtype=np.uint8).copy()
    return QuerySample(pts, labels)


# ---------------------------------------------------------------------------
# Loss, gradients, optimizer


def bce_loss(preds, labels) -> float:
    """Mean binary cross-entropy; probabilities clamped to [1e-12, 1-1e-12]."""
    p = np.asarray(preds, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise ValueError("preds/labels length mismatch")
    p = np.clip(p, 1e-12, 1.0 - 1e-12)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def loss_and_grads(clouds, queries, labels, params: dict, arch: vn.VnArchitecture):
    """BCE loss and its exact gradient for every parameter.

    ``clouds`` (B, N, 3) and ``queries`` (B, Q, 3) are in the normalized
    frame; ``labels`` is (B, Q) in {0, 1}. Returns (loss, grads, probs).
    """
    labels = np.asarray(labels, dtype=np.float64)
    z, ecache = vn.encode_batch(clouds, params, arch)
    probs, logits, dcache = vn.decode_batch(queries, z, params, arch)
    loss = bce_loss(probs, labels)
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss}")
    dlogits = (probs - labels) / labels.size
    grads = {name: np.zeros_like(p) for name, p in params.items()}
    g_z = _decode_backward(dlogits, z, params, arch, dcache, grads)
    _encode_backward(g_z, params, arch, ecache, grads)
    return loss, grads, probs


def _outer_grad(g_out, h_in):
    """(M, O) x (M, C) contraction -> (O, C) weight gradient."""
    o = g_out.shape[-1]
    c = h_in.shape[-1]
    return g_out.reshape(-1, o).T @ h_in.reshape(-1, c)


def _decode_backward(dlogits, z, params, arch, cache, grads):
    b, nq = dlogits.shape
    g = dlogits[..., None]
    n_layers = arch.mlp_hidden_layers + 1
    for i in reversed(range(n_layers)):
        lay = cache["mlp"][i]
        g_pre = g if lay["mask"] is None else np.where(lay["mask"], arch.mlp_slope * g, g)
        grads[f"mlp{i}_w"] += _outer_grad(g_pre, lay["h_in"])
        grads[f"mlp{i}_b"] += g_pre.sum(axis=(0, 1))
        w = params[f"mlp{i}_w"]
        g = (g_pre.reshape(-1, w.shape[0]) @ w).reshape(b, nq, -1)
    latent_dim = arch.latent_dim
    if not arch.equivariant:
        return g[..., :latent_dim].sum(axis=1)
    g_s = g[..., :latent_dim].sum(axis=1)
    g_diag = g[..., latent_dim : latent_dim + arch.latent_channels].sum(axis=1)
    qs = latent_dim + arch.latent_channels
    # Last query column is |x| (pure data, no parameter path).
    g_e = np.ascontiguousarray(g[..., qs : qs + arch.query_channels])
    gs = g_s.reshape(b, arch.latent_channels, 3)  # matches s (B, C, F)
    f, fq, x = cache["f"], cache["fq"], cache["x"]
    zh, gain = cache["zh"], cache["gain"]        # internal (B, 3, C)
    # s_{bcf} = sum_d zh_{bdc} f_{bdf}
    g_zh = np.matmul(f, np.swapaxes(gs, 1, 2))    # (B, 3, C)
    g_f = np.matmul(zh, gs)                       # (B, 3, F)
    grads["inv_frame"] += _outer_grad(g_f, zh)
    g_zh += np.matmul(g_f, params["inv_frame"])
    # e_{bqe} = sum_d x_{bqd} fq_{bde}
    g_fq = np.matmul(np.swapaxes(x, 1, 2), g_e)   # (B, 3, E)
    grads["query_frame"] += _outer_grad(g_fq, zh)
    g_zh += np.matmul(g_fq, params["query_frame"])
    # diag_c = sum_d zh_{bdc}^2
    g_zh += 2.0 * zh * g_diag[:, None, :]
    # Through zh = gain * z with gain = 1/sqrt(mean(z^2) + eps):
    # dL/dz = gain * (G - zh * <G, zh> / (3 C_z)).
    inner = np.einsum("bdc,bdc->b", g_zh, zh)
    denom = 3.0 * arch.latent_channels
    return gain[:, None, None] * (g_zh - (inner / denom)[:, None, None] * zh)


def _encode_backward(g_z_int, params, arch, cache, grads):
    n = cache["pool_n"]
    if arch.equivariant:
        # g_z_int arrives in internal (B, 3, C) layout.
        b = g_z_int.shape[0]
        g = np.broadcast_to(g_z_int[:, None] / n, (b, n) + g_z_int.shape[1:]).copy()
        slope = arch.vn_slope
        for i in reversed(range(len(arch.block_channels))):
            blk = cache["blocks"][i]
            q, k, dot, n2, neg = blk["q"], blk["k"], blk["dot"], blk["norm2"], blk["neg"]
            kg = np.einsum("bndc,bndc->bnc", k, g)
            coef = np.where(neg, 1.0 - slope, 0.0)
            g_q = g - (coef * kg / n2)[:, :, None, :] * k
            g_k = (coef * (-dot / n2))[:, :, None, :] * g \
                + (coef * (-kg / n2))[:, :, None, :] * q \
                + (coef * (2.0 * dot * kg / (n2 * n2)))[:, :, None, :] * k
            grads[f"blk{i}_u"] += _outer_grad(g_q, blk["h"])
            grads[f"blk{i}_k"] += _outer_grad(g_k, blk["h"])
            u, kk = params[f"blk{i}_u"], params[f"blk{i}_k"]
            g_h = (g_q.reshape(-1, u.shape[0]) @ u).reshape(g.shape[:-1] + (u.shape[1],))
            g_h += (g_k.reshape(-1, kk.shape[0]) @ kk).reshape(g_h.shape)
            grads[f"blk{i}_w"] += _outer_grad(g_h, blk["a_in"])
            w = params[f"blk{i}_w"]
            g = (g_h.reshape(-1, w.shape[0]) @ w).reshape(g_h.shape[:-1] + (w.shape[1],))
        grads["lift"] += _outer_grad(g, cache["v0"])
    else:
        g = np.broadcast_to(g_z_int[:, None] / n, (g_z_int.shape[0], n, g_z_int.shape[1])).copy()
        n_enc = len(arch.scalar_widths) + 1
        for i in reversed(range(n_enc)):
            lay = cache["layers"][i]
            g_pre = np.where(lay["mask"], arch.mlp_slope * g, g)
            grads[f"enc{i}_w"] += _outer_grad(g_pre, lay["h_in"])
            grads[f"enc{i}_b"] += g_pre.sum(axis=(0, 1))
            w = params[f"enc{i}_w"]
            g = (g_pre.reshape(-1, w.shape[0]) @ w).reshape(g_pre.shape[:-1] + (w.shape[1],))


@dataclass
class AdamState:
    """First/second moment accumulators mirroring the parameter dict."""

    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(params: dict, grads: dict, state: AdamState, lr: float):
    """One Adam update with bias correction; returns (new_params, state)."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    out = {}
    for name, p in params.items():
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / (1.0 - b1**t)
        v_hat = state.v[name] / (1.0 - b2**t)
        out[name] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out, state


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scale all gradients down to a global L2 norm cap; returns the norm."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


def split_dataset(n_items: int, ratio=(8, 1, 1), rng: np.random.Generator | None = None) -> dict:
    """Deterministic disjoint train/val/test cover at the given ratio."""
    if n_items < 10:
        raise ValueError(f"need at least 10 items to split, have {n_items}")
    if rng is None:
        rng = np.random.default_rng()
    total = float(sum(ratio))
    n_val = int(round(n_items * ratio[1] / total))
    n_test = int(round(n_items * ratio[2] / total))
    n_val, n_test = max(n_val, 1), max(n_test, 1)
    perm = rng.permutation(n_items)
    return {
        "train": np.sort(perm[: n_items - n_val - n_test]),
        "val": np.sort(perm[n_items - n_val - n_test : n_items - n_test]),
        "test": np.sort(perm[n_items - n_test :]),
    }


# ---------------------------------------------------------------------------
# Dataset containers and the training loop


@dataclass
class DeformationSample:
    """Per-deformation training material in the mm model frame."""

    anterior_cloud: np.ndarray  # farthest-point downsampled anterior vertices
    query_points: np.ndarray
    query_labels: np.ndarray


@dataclass
class PatientDataset:
    """Everything train() needs for one patient model."""

    scale: float          # mm per normalized unit
    center: np.ndarray    # base-model centroid (viewpoint hemisphere center)
    view_radius: float    # 2x bounding-sphere radius
    anterior_axis: np.ndarray
    samples: list
    split: dict


@dataclass
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 1e-4
    epochs: int = 300
    rotation_mode: str = "SO3"  # I | Z | SO3
    rotation_range: tuple = (-np.pi / 2, np.pi / 2)
    downsample_d: int = 1000
    view_n: int = 300
    threshold: float = 0.4
    select_threshold: bool = True
    split_ratio: tuple = (8, 1, 1)
    seed: int = 0
    patience: int = 50
    queries_per_step: int = 256
    grad_clip_norm: float = 10.0  # 0 disables
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def rotation_mode_enum(self) -> RotationMode:
        try:
            return ROTATION_MODE_NAMES[self.rotation_mode.upper().replace("(3)", "3")]
        except KeyError:
            raise ValueError(f"unknown rotation mode {self.rotation_mode!r}") from None


def prepare_dataset(
    base_mesh: TriangleMesh,
    deformed_meshes: list,
    query_samples: list,
    anterior_axis=(0.0, 0.0, 1.0),
    downsample_d: int = 1000,
    split_ratio=(8, 1, 1),
    seed: int = 0,
) -> PatientDataset:
    """Precompute per-deformation anterior clouds and the split.

    The posterior crop and the D-point farthest-point downsample do not
    depend on the per-epoch viewpoint, so they are done once here; the
    viewpoint crop and rotation stay dynamic in the training loop.
    """
    if len(deformed_meshes) != len(query_samples):
        raise ValueError("one query sample per deformed mesh required")
    axis = np.asarray(anterior_axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    ss = np.random.SeedSequence([seed, 0xD5])
    fps_seeds = ss.spawn(len(deformed_meshes) + 1)
    samples = []
    for i, (mesh, qs) in enumerate(zip(deformed_meshes, query_samples)):
        anterior = crop_posterior(mesh, axis)
        if len(anterior) < downsample_d:
            raise ValueError(
                f"deformation {i}: anterior crop has {len(anterior)} points, need {downsample_d}"
            )
        cloud = farthest_point_downsample(
            anterior, downsample_d, np.random.default_rng(fps_seeds[i])
        )
        samples.append(DeformationSample(cloud, qs.points, qs.labels))
    center, radius = base_mesh.bounding_sphere()
    split = split_dataset(len(samples), split_ratio, np.random.default_rng(fps_seeds[-1]))
    return PatientDataset(
        scale=vn.scale_for_mesh(base_mesh.vertices),
        center=center,
        view_radius=2.0 * radius,
        anterior_axis=axis,
        samples=samples,
        split=split,
    )


def make_partial_target(
    ds: PatientDataset,
    sample: DeformationSample,
    view_n: int,
    mode: RotationMode,
    rotation_range,
    rng: np.random.Generator,
):
    """One dynamically-generated partial target plus the rotation applied.

    Picks a random anterior-hemisphere viewpoint, keeps the ``view_n``
    nearest anterior points, and rotates the result (queries are co-rotated
    by the caller with the returned rotation).
    """
    vp = hemisphere_viewpoint(ds.center, ds.view_radius, rng, ds.anterior_axis)
    partial = partial_view(sample.anterior_cloud, vp, view_n)
    rot = random_rotation(mode, rotation_range, rng)
    return rot.apply(partial), rot


def _canonicalize_pair(partial_mm, queries_mm, scale):
    centroid = partial_mm.mean(axis=0)
    return (partial_mm - centroid) / scale, (queries_mm - centroid) / scale


def evaluate_occupancy(
    params: dict,
    arch: vn.VnArchitecture,
    ds: PatientDataset,
    indices,
    mode: RotationMode,
    rotation_range,
    seed: int,
    view_n: int,
    threshold: float,
) -> dict:
    """Mean BCE and occupancy IoU over fixed per-sample views/rotations."""
    streams = np.random.SeedSequence([seed, 0xEA]).spawn(len(ds.samples))
    bces, ious = [], []
    for idx in np.asarray(indices, dtype=int):
        sample = ds.samples[idx]
        rng = np.random.default_rng(streams[idx])
        partial, rot = make_partial_target(
            ds, sample, view_n, mode, rotation_range, rng
        )
        queries = rot.apply(sample.query_points)
        cloud_n, queries_n = _canonicalize_pair(partial, queries, ds.scale)
        z = vn.encode(cloud_n, params, arch)
        probs = vn.decode_occupancy(queries_n, z, params, arch)
        y = sample.query_labels.astype(bool)
        pred = probs >= threshold
        union = np.logical_or(pred, y).sum()
        inter = np.logical_and(pred, y).sum()
        ious.append(1.0 if union == 0 else inter / union)
        bces.append(bce_loss(probs, sample.query_labels))
    return {"bce": float(np.mean(bces)), "iou": float(np.mean(ious)), "per_case_iou": ious}


THRESHOLD_GRID = tuple(np.round(np.arange(0.20, 0.71, 0.05), 2))


def train(ds: PatientDataset, config: TrainConfig, arch: vn.VnArchitecture | None = None):
    """Full training run; returns (OccupancyModel, log).

    Partial targets are regenerated every epoch with the configured rotation
    mode applied jointly to the target cloud and its query set. The returned
    parameters are the best-on-validation checkpoint, and the occupancy
    threshold is tuned on the validation split (0.4 by default).
    """
    if arch is None:
        arch = vn.VnArchitecture()
    mode = config.rotation_mode_enum()
    ss = np.random.SeedSequence([config.seed, 0x7A])
    init_ss, loop_ss = ss.spawn(2)
    params = vn.init_params(arch, np.random.default_rng(init_ss))
    state = AdamState.for_params(
        params, config.adam_beta1, config.adam_beta2, config.adam_eps
    )
    train_idx = ds.split["train"]
    val_idx = ds.split["val"]
    n_q = min(config.queries_per_step, len(ds.samples[0].query_points))
    best = {"bce": np.inf, "params": None, "epoch": -1}
    log = []
    epoch_seeds = loop_ss.spawn(config.epochs)
    for epoch in range(config.epochs):
        erng = np.random.default_rng(epoch_seeds[epoch])
        order = erng.permutation(train_idx)
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            clouds = np.empty((len(batch), config.view_n, 3))
            queries = np.empty((len(batch), n_q, 3))
            labels = np.empty((len(batch), n_q))
            for j, idx in enumerate(batch):
                sample = ds.samples[idx]
                partial, rot = make_partial_target(
                    ds, sample, config.view_n, mode, config.rotation_range, erng
                )
                pick = erng.choice(len(sample.query_points), size=n_q, replace=False)
                q_mm = rot.apply(sample.query_points[pick])
                clouds[j], queries[j] = _canonicalize_pair(partial, q_mm, ds.scale)
                labels[j] = sample.query_labels[pick]
            loss, grads, _ = loss_and_grads(clouds, queries, labels, params, arch)
            if config.grad_clip_norm > 0:
                clip_gradients(grads, config.grad_clip_norm)
            params, state = adam_step(params, grads, state, config.learning_rate)
            losses.append(loss)
        val = evaluate_occupancy(
            params, arch, ds, val_idx, mode, config.rotation_range,
            config.seed, config.view_n, config.threshold,
        )
        log.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                "val_loss": val["bce"],
                "val_iou": val["iou"],
            }
        )
        if val["bce"] < best["bce"]:
            best = {
                "bce": val["bce"],
                "params": {k: p.copy() for k, p in params.items()},
                "epoch": epoch,
            }
        elif epoch - best["epoch"] >= config.patience:
            break
    params = best["params"] if best["params"] is not None else params
    threshold = config.threshold
    if config.select_threshold:
        threshold = _select_threshold(params, arch, ds, val_idx, mode, config)
    canon = vn.Canonicalization(scale=ds.scale, cube_half=_cube_half_for(ds))
    model = vn.OccupancyModel(
        arch=arch,
        params=params,
        canon=canon,
        threshold=threshold,
        meta={"best_epoch": best["epoch"], "rotation_mode": config.rotation_mode},
    )
    return model, log


def _select_threshold(params, arch, ds, val_idx, mode, config):
    best_c, best_iou = config.threshold, -1.0
    for c in THRESHOLD_GRID:
        res = evaluate_occupancy(
            params, arch, ds, val_idx, mode, config.rotation_range,
            config.seed, config.view_n, float(c),
        )
        if res["iou"] > best_iou + 1e-12:
            best_c, best_iou = float(c), res["iou"]
    return best_c


def _cube_half_for(ds: PatientDataset) -> float:
    # Worst case in the partial-centroid frame: the far side of the model
    # sits at (model extent + centroid offset) from the origin. The view
    # radius bounds both at roughly half the normalized extent each.
    return 1.1
