"""Rotation-equivariant occupancy network with hand-written forward passes.

Features are "vector lists": arrays of shape ``(..., C, 3)`` holding C
3-vector channels per entity. Linear layers mix channels only, so rotating
the input rotates every intermediate feature the same way; the decoder
consumes inner products of co-rotating quantities and is therefore exactly
invariant, in double precision, with no training required.

A non-equivariant scalar PointNet encoder sharing the same decoder shape is
provided as the comparison baseline. Both are plain numpy; gradients live in
:mod:`liverreg.train`.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

MODEL_MAGIC = b"VNOC"
MODEL_VERSION = 1


@dataclass(frozen=True)
class VnArchitecture:
    """Layer sizes for the encoder/decoder pair.

    ``equivariant=False`` swaps the vector-neuron encoder for a scalar
    per-point MLP of equivalent capacity (the baseline); the decoder keeps
    the same widths either way.
    """

    lift_channels: int = 16
    block_channels: tuple = (32, 32, 32, 32)
    query_channels: int = 16
    mlp_width: int = 128
    mlp_hidden_layers: int = 3
    knn: int = 8
    vn_slope: float = 0.2
    mlp_slope: float = 0.01
    scalar_widths: tuple = (64, 64)
    equivariant: bool = True

    @property
    def latent_channels(self) -> int:
        return self.block_channels[-1]

    @property
    def latent_dim(self) -> int:
        # Scalar baseline latent matches the information width of the
        # flattened equivariant latent.
        return self.latent_channels * 3

    @property
    def decoder_in_dim(self) -> int:
        if self.equivariant:
            # invariant shape scalars + channel norms + query/frame inner
            # products + |x|
            return self.latent_dim + self.latent_channels + self.query_channels + 1
        return self.latent_dim + 3

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_channels"] = list(self.block_channels)
        d["scalar_widths"] = list(self.scalar_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VnArchitecture":
        d = dict(d)
        d["block_channels"] = tuple(d["block_channels"])
        d["scalar_widths"] = tuple(d["scalar_widths"])
        return cls(**d)


# ---------------------------------------------------------------------------
# Equivariant layer primitives


def vn_linear(weights: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Channel-mixing linear map on vector-list features.

    ``weights`` is (C_out, C_in) and ``v`` is (..., C_in, 3); the 3-D axis is
    untouched, which is what makes the layer rotation-equivariant.
    """
    w = np.asarray(weights, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if v.ndim < 2 or v.shape[-1] != 3 or w.ndim != 2 or w.shape[1] != v.shape[-2]:
        raise ValueError(f"shape mismatch: weights {w.shape} vs features {v.shape}")
    return np.einsum("oc,...cd->...od", w, v, optimize=True)


def vn_leaky_relu(
    v: np.ndarray, u_weights: np.ndarray, k_weights: np.ndarray, slope: float = 0.2
) -> np.ndarray:
    """Direction-gated leaky nonlinearity on vector channels.

    Per output channel, feature q = (U v) and gate direction k = (K v); q
    passes unchanged when it points along k, otherwise its component along k
    is removed, and the two cases are blended with ``slope`` exactly like a
    scalar leaky ReLU. A zero-norm gate passes q through unchanged.
    """
    q = vn_linear(u_weights, v)
    k = vn_linear(k_weights, v)
    out, _ = _leaky_from_qk(q, k, slope)
    return out


def _leaky_from_qk(q, k, slope):
    dot = np.einsum("...d,...d->...", q, k)
    norm2 = np.einsum("...d,...d->...", k, k)
    neg = (dot < 0.0) & (norm2 > 0.0)
    safe = np.where(norm2 > 0.0, norm2, 1.0)
    coef = np.where(neg, dot / safe, 0.0)
    out = q - (1.0 - slope) * coef[..., None] * k
    cache = {"q": q, "k": k, "dot": dot, "norm2": safe, "neg": neg}
    return out, cache


def vn_mean_pool(per_point: np.ndarray) -> np.ndarray:
    """Channel-wise mean over the point axis of (..., N, C, 3) features."""
    v = np.asarray(per_point, dtype=np.float64)
    if v.ndim < 3 or v.shape[-1] != 3:
        raise ValueError(f"expected (..., N, C, 3) features, got {v.shape}")
    if v.shape[-3] == 0:
        raise ValueError("cannot pool an empty point list")
    return v.mean(axis=-3)


def vn_invariant(v: np.ndarray, frame_weights: np.ndarray) -> np.ndarray:
    """Rotation-invariant scalars from a vector-list feature.

    Builds a 3-channel equivariant frame F = frame_weights . v and returns
    the flattened inner products v . F^T; both factors co-rotate, so the
    output is unchanged by any rotation of ``v``.
    """
    f = vn_linear(frame_weights, v)
    if f.shape[-2] != 3:
        raise ValueError("frame_weights must produce exactly 3 channels")
    s = np.einsum("...cd,...fd->...cf", v, f, optimize=True)
    return s.reshape(s.shape[:-2] + (s.shape[-2] * 3,))


def knn_edge_means(clouds: np.ndarray, k: int) -> np.ndarray:
    """Mean offset to the k nearest neighbors of each point, batched.

    ``clouds`` is (B, N, 3); neighbors are ranked by distance with ties
    broken by index, so the feature is stable under point reordering for
    generic clouds.
    """
    b, n, _ = clouds.shape
    k = min(k, n - 1)
    if k < 1:
        return np.zeros_like(clouds)
    out = np.empty_like(clouds)
    for i in range(b):
        pts = clouds[i]
        d2 = np.einsum("nd,nd->n", pts, pts)
        dist = d2[:, None] + d2[None, :] - 2.0 * (pts @ pts.T)
        # partial selection, then stable ordering of the candidates only
        cand = np.argpartition(dist, k, axis=1)[:, : k + 1]
        cand_d = np.take_along_axis(dist, cand, axis=1)
        order = np.take_along_axis(cand, np.argsort(cand_d, axis=1, kind="stable"), axis=1)
        neigh = order[:, 1 : k + 1]
        out[i] = pts[neigh].mean(axis=1) - pts
    return out


# ---------------------------------------------------------------------------
# Encoder / decoder forward passes (with caches for backprop)


def encode_batch(clouds: np.ndarray, params: dict, arch: VnArchitecture):
    """Forward pass of the encoder on (B, N, 3) normalized clouds.

    Returns (z, cache); z is (B, C_z, 3) for the equivariant encoder and
    (B, latent_dim) for the scalar baseline.
    """
    clouds = np.asarray(clouds, dtype=np.float64)
    if clouds.ndim != 3 or clouds.shape[-1] != 3 or clouds.shape[1] == 0:
        raise ValueError(f"expected non-empty (B, N, 3) clouds, got {clouds.shape}")
    if arch.equivariant:
        return _encode_vn(clouds, params, arch)
    return _encode_scalar(clouds, params, arch)


def _mix(w: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Channel mix on internal (..., 3, C) layout: one flat GEMM."""
    lead = v.shape[:-1]
    return (v.reshape(-1, v.shape[-1]) @ w.T).reshape(lead + (w.shape[0],))


def _encode_vn(clouds, params, arch):
    # Internal layout is (B, N, 3, C): the vector axis ahead of channels
    # makes every linear layer a single contiguous GEMM.
    mu = knn_edge_means(clouds, arch.knn)
    v0 = np.stack([clouds, mu], axis=-1)  # (B, N, 3, 2)
    a = _mix(params["lift"], v0)
    cache = {"v0": v0, "blocks": []}
    slope = arch.vn_slope
    for i in range(len(arch.block_channels)):
        a_in = a
        h = _mix(params[f"blk{i}_w"], a_in)
        q = _mix(params[f"blk{i}_u"], h)
        k = _mix(params[f"blk{i}_k"], h)
        dot = np.einsum("bndc,bndc->bnc", q, k)
        norm2 = np.einsum("bndc,bndc->bnc", k, k)
        neg = (dot < 0.0) & (norm2 > 0.0)
        safe = np.where(norm2 > 0.0, norm2, 1.0)
        coef = np.where(neg, dot / safe, 0.0)
        a = q - (1.0 - slope) * coef[:, :, None, :] * k
        cache["blocks"].append(
            {"a_in": a_in, "h": h, "q": q, "k": k, "dot": dot, "norm2": safe, "neg": neg}
        )
    cache["pool_n"] = clouds.shape[1]
    z_int = a.mean(axis=1)  # (B, 3, C)
    cache["z_int"] = z_int
    return np.ascontiguousarray(np.swapaxes(z_int, 1, 2)), cache


def _encode_scalar(clouds, params, arch):
    h = clouds  # (B, N, 3)
    cache = {"layers": []}
    widths = list(arch.scalar_widths) + [arch.latent_dim]
    b, n, _ = clouds.shape
    for i in range(len(widths)):
        w = params[f"enc{i}_w"]
        pre = (h.reshape(-1, h.shape[-1]) @ w.T).reshape(b, n, -1) + params[f"enc{i}_b"]
        mask = pre < 0.0
        post = np.where(mask, arch.mlp_slope * pre, pre)
        cache["layers"].append({"h_in": h, "mask": mask})
        h = post
    cache["pool_n"] = n
    z = h.mean(axis=1)  # (B, latent_dim)
    return z, cache


def decode_batch(queries: np.ndarray, z: np.ndarray, params: dict, arch: VnArchitecture):
    """Occupancy probabilities for (B, Q, 3) queries against latents ``z``.

    Returns (probs, logits, cache); probs are strictly inside (0, 1).
    """
    x = np.asarray(queries, dtype=np.float64)
    if x.ndim != 3 or x.shape[-1] != 3:
        raise ValueError(f"expected (B, Q, 3) queries, got {x.shape}")
    cache = {"x": x}
    b, q = x.shape[0], x.shape[1]
    if arch.equivariant:
        # RMS-normalize the latent (a rotation-invariant scalar per item) so
        # the inner products below land at trainable magnitudes regardless of
        # how much the mean pool attenuated the channels.
        z_int = np.ascontiguousarray(np.swapaxes(z, 1, 2))  # (B, 3, C)
        gain = 1.0 / np.sqrt(np.mean(z_int**2, axis=(1, 2)) + 1e-8)
        zh = z_int * gain[:, None, None]
        f = _mix(params["inv_frame"], zh)        # (B, 3, 3)
        s = np.matmul(np.swapaxes(zh, 1, 2), f)  # (B, C, 3) invariant scalars
        diag = np.einsum("bdc,bdc->bc", zh, zh)  # per-channel norms, invariant
        s_flat = np.concatenate([s.reshape(b, arch.latent_dim), diag], axis=1)
        fq = _mix(params["query_frame"], zh)     # (B, 3, E)
        e = np.matmul(x, fq)                     # (B, Q, E)
        e = np.concatenate([e, np.linalg.norm(x, axis=2, keepdims=True)], axis=2)
        cache.update({"f": f, "fq": fq, "gain": gain, "zh": zh})
    else:
        s_flat = z
        e = x
    h = np.concatenate([np.broadcast_to(s_flat[:, None, :], (b, q, s_flat.shape[1])), e], axis=2)
    cache["mlp"] = []
    n_layers = arch.mlp_hidden_layers + 1
    for i in range(n_layers):
        w = params[f"mlp{i}_w"]
        pre = (h.reshape(-1, h.shape[-1]) @ w.T).reshape(b, q, -1) + params[f"mlp{i}_b"]
        if i < n_layers - 1:
            mask = pre < 0.0
            post = np.where(mask, arch.mlp_slope * pre, pre)
            cache["mlp"].append({"h_in": h, "mask": mask})
            h = post
        else:
            cache["mlp"].append({"h_in": h, "mask": None})
            h = pre
    logits = h[..., 0]
    probs = _sigmoid(logits)
    return probs, logits, cache


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return np.clip(out, 1e-300, 1.0 - 1e-16)


def encode(cloud: np.ndarray, params: dict, arch: VnArchitecture) -> np.ndarray:
    """Latent code of one normalized cloud: (C_z, 3) equivariant channels
    (or a flat vector for the scalar baseline)."""
    z, _ = encode_batch(np.asarray(cloud, dtype=np.float64)[None], params, arch)
    return z[0]

def decode_occupancy(x, z, params: dict, arch: VnArchitecture):
    """Occupancy probability of query point(s) ``x`` under latent ``z``."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    probs, _, _ = decode_batch(x.reshape(1, -1, 3), z[None], params, arch)
    return float(probs[0, 0]) if single else probs[0]


# ---------------------------------------------------------------------------
# Parameter initialization


def init_params(arch: VnArchitecture, rng: np.random.Generator) -> dict:
    """Glorot-style random initialization for every layer in ``arch``."""
    p = {}
    if arch.equivariant:
        p["lift"] = _glorot(rng, arch.lift_channels, 2)
        c_in = arch.lift_channels
        for i, c_out in enumerate(arch.block_channels):
            p[f"blk{i}_w"] = _glorot(rng, c_out, c_in)
            p[f"blk{i}_u"] = _glorot(rng, c_out, c_out)
            p[f"blk{i}_k"] = _glorot(rng, c_out, c_out)
            c_in = c_out
        p["inv_frame"] = _glorot(rng, 3, arch.latent_channels)
        p["query_frame"] = _glorot(rng, arch.query_channels, arch.latent_channels)
    else:
        widths = [3] + list(arch.scalar_widths) + [arch.latent_dim]
        for i in range(len(widths) - 1):
            p[f"enc{i}_w"] = _glorot(rng, widths[i + 1], widths[i])
            p[f"enc{i}_b"] = np.zeros(widths[i + 1])
    dims = [arch.decoder_in_dim] + [arch.mlp_width] * arch.mlp_hidden_layers + [1]
    for i in range(len(dims) - 1):
        p[f"mlp{i}_w"] = _glorot(rng, dims[i + 1], dims[i])
        p[f"mlp{i}_b"] = np.zeros(dims[i + 1])
    return p


def _glorot(rng, fan_out, fan_in):
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=(fan_out, fan_in))


# ---------------------------------------------------------------------------
# Canonicalization and model serialization


@dataclass
class Canonicalization:
    """Frame convention recorded with each trained model.

    Normalized coordinates are (x_mm - centroid(partial cloud)) / scale; the
    scale is fixed per patient so the undeformed model spans a 0.9-wide cube.
    ``cube_half`` is the half-width of the extraction cube that is guaranteed
    to contain the completed surface in this frame.
    """

    scale: float
    cube_half: float = 1.1

    def normalize(self, points_mm: np.ndarray, centroid: np.ndarray) -> np.ndarray:
        return (np.asarray(points_mm, dtype=np.float64) - centroid) / self.scale

    def denormalize(self, points: np.ndarray, centroid: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) * self.scale + centroid


def scale_for_mesh(vertices: np.ndarray, fit: float = 0.9) -> float:
    """Patient-specific scale: the undeformed model fits a cube of side ``fit``."""
    lo = vertices.min(axis=0)
    hi = vertices.max(axis=0)
    return float((hi - lo).max() / fit)


@dataclass
class OccupancyModel:
    """Trained network parameters plus everything needed to use them."""

    arch: VnArchitecture
    params: dict
    canon: Canonicalization
    threshold: float = 0.4
    meta: dict = field(default_factory=dict)

    def encode(self, normalized_cloud: np.ndarray) -> np.ndarray:
        return encode(normalized_cloud, self.params, self.arch)

    def decode(self, x, z):
        return decode_occupancy(x, z, self.params, self.arch)


def save_model(path, model: OccupancyModel) -> None:
    """Self-describing binary: magic, version, JSON header, little-endian f64."""
    names = sorted(model.params)
    header = {
        "arch": model.arch.to_dict(),
        "canon": {"scale": model.canon.scale, "cube_half": model.canon.cube_half},
        "threshold": model.threshold,
        "meta": model.meta,
        "arrays": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<II", MODEL_VERSION, len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(model.params[n], dtype="<f8").tobytes())


def load_model(path) -> OccupancyModel:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MODEL_MAGIC:
            raise ValueError(f"{path}: not a model file (bad magic {magic!r})")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != MODEL_VERSION:
            raise ValueError(f"{path}: unsupported model version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        params = {}
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            n = int(np.prod(shape)) if shape else 1
            data = fh.read(8 * n)
            if len(data) != 8 * n:
                raise ValueError(f"{path}: truncated array {spec['name']}")
            params[spec["name"]] = np.frombuffer(data, dtype="<f8").reshape(shape).copy()
    return OccupancyModel(
        arch=VnArchitecture.from_dict(header["arch"]),
        params=params,
        canon=Canonicalization(**header["canon"]),
        threshold=float(header["threshold"]),
        meta=header.get("meta", {}),
    )
