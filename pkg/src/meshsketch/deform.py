"""Curve-handle deformation via distance-softmax skinning.

Handles are points sampled at a fixed uniform t grid on every curve. Each
mesh vertex gets convex weights over its K nearest handles,
``softmax(-distance / temperature)`` renormalized over the kept handles, so
weights sum to 1 exactly and a uniform handle displacement translates the
whole mesh. Edits blend pure displacements (deformed minus rest handle
positions); no smoothing pass runs afterwards.

Binary blob layout (all little-endian), shared with the browser viewer:

    magic   4 bytes  b"SKIN"
    u32     version (1)
    u32     n_handles, u32 n_vertices, u32 K
    f32     temperature
    u32[n_handles]          handle curve index
    f32[n_handles]          handle t value
    f32[n_handles * 3]      handle rest position
    u32[n_vertices * K]     per-vertex handle indices
    f32[n_vertices * K]     per-vertex weights
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .curves import CurveSet, eval_bezier
from .geometry import Mesh

DEFAULT_SAMPLES_PER_CURVE = 32
DEFAULT_TEMPERATURE = 0.05
DEFAULT_K = 8


@dataclass
class SkinningWeights:
    handle_curve: np.ndarray  # (H,) curve index per handle
    handle_t: np.ndarray  # (H,)
    handle_rest: np.ndarray  # (H, 3)
    indices: np.ndarray  # (V, K)
    weights: np.ndarray  # (V, K), rows sum to 1
    temperature: float

    @property
    def n_handles(self) -> int:
        return len(self.handle_rest)

    @property
    def k(self) -> int:
        return self.indices.shape[1]


def handle_grid(curve_set: CurveSet, samples_per_curve: int = DEFAULT_SAMPLES_PER_CURVE):
    """Fixed uniform-t handle positions for every curve in order."""
    t = np.linspace(0.0, 1.0, samples_per_curve)
    curve_ids = np.repeat(np.arange(len(curve_set)), samples_per_curve)
    ts = np.tile(t, len(curve_set))
    rest = np.concatenate([eval_bezier(c, t) for c in curve_set.curves], axis=0)
    return curve_ids.astype(np.int64), ts, rest


def build_skinning(
    mesh: Mesh,
    curve_set: CurveSet,
    samples_per_curve: int = DEFAULT_SAMPLES_PER_CURVE,
    temperature: float = DEFAULT_TEMPERATURE,
    k: int = DEFAULT_K,
) -> SkinningWeights:
    """Assign each vertex softmax weights over its K nearest handles."""
    if len(curve_set) == 0:
        raise ValueError("cannot build skinning for an empty curve set")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    curve_ids, ts, rest = handle_grid(curve_set, samples_per_curve)
    k = min(k, len(rest))
    indices = np.empty((len(mesh.vertices), k), dtype=np.int64)
    weights = np.empty((len(mesh.vertices), k))
    chunk = max(1, int(5e6 / max(1, len(rest))))
    for s in range(0, len(mesh.vertices), chunk):
        verts = mesh.vertices[s : s + chunk]
        d = np.linalg.norm(verts[:, None, :] - rest[None, :, :], axis=-1)  # (c, H)
        nearest = np.argpartition(d, k - 1, axis=1)[:, :k]
        dk = np.take_along_axis(d, nearest, axis=1)
        # Canonical handle order (distance, then index) keeps summation
        # order, and therefore float results, reproducible.
        order = np.lexsort((nearest, dk), axis=1)
        nearest = np.take_along_axis(nearest, order, axis=1)
        dk = np.take_along_axis(dk, order, axis=1)
        logits = -dk / temperature
        logits -= logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        w /= w.sum(axis=1, keepdims=True)
        indices[s : s + chunk] = nearest
        weights[s : s + chunk] = w
    return SkinningWeights(curve_ids, ts, rest, indices, weights, temperature)


def displace_handles(
    rest: CurveSet, edited: CurveSet, samples_per_curve: int = DEFAULT_SAMPLES_PER_CURVE
) -> np.ndarray:
    """Per-handle displacement induced by control-point edits."""
    if len(rest) != len(edited):
        raise ValueError("curve count mismatch between rest and edited sets")
    _, _, rest_pos = handle_grid(rest, samples_per_curve)
    _, _, edited_pos = handle_grid(edited, samples_per_curve)
    return edited_pos - rest_pos


def apply_deformation(
    mesh: Mesh, skinning: SkinningWeights, displacements: np.ndarray
) -> Mesh:
    """v' = v + sum_h w_vh * d_h; returns a new mesh."""
    displacements = np.asarray(displacements, dtype=np.float64)
    if len(displacements) != skinning.n_handles:
        raise ValueError(
            f"expected {skinning.n_handles} handle displacements, got {len(displacements)}"
        )
    delta = np.einsum("vk,vkd->vd", skinning.weights, displacements[skinning.indices])
    return Mesh(
        vertices=mesh.vertices + delta,
        faces=mesh.faces,
        uvs=mesh.uvs,
        face_uvs=mesh.face_uvs,
        texture=mesh.texture,
        texture_path=mesh.texture_path,
        transform=mesh.transform,
    )


def serialize_skinning(skinning: SkinningWeights) -> bytes:
    """Pack the documented little-endian blob for the viewer."""
    parts = [
        b"SKIN",
        struct.pack("<IIII", 1, skinning.n_handles, len(skinning.indices), skinning.k),
        struct.pack("<f", skinning.temperature),
        skinning.handle_curve.astype("<u4").tobytes(),
        skinning.handle_t.astype("<f4").tobytes(),
        skinning.handle_rest.astype("<f4").tobytes(),
        skinning.indices.astype("<u4").tobytes(),
        skinning.weights.astype("<f4").tobytes(),
    ]
    return b"".join(parts)


def parse_skinning(blob: bytes) -> SkinningWeights:
    if blob[:4] != b"SKIN":
        raise ValueError("bad skinning blob magic")
    version, n_handles, n_vertices, k = struct.unpack_from("<IIII", blob, 4)
    if version != 1:
        raise ValueError(f"unsupported skinning blob version {version}")
    (temperature,) = struct.unpack_from("<f", blob, 20)
    off = 24

    def take(dtype, count, shape):
        nonlocal off
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr.reshape(shape)

    handle_curve = take("<u4", n_handles, (n_handles,)).astype(np.int64)
    handle_t = take("<f4", n_handles, (n_handles,)).astype(np.float64)
    handle_rest = take("<f4", n_handles * 3, (n_handles, 3)).astype(np.float64)
    indices = take("<u4", n_vertices * k, (n_vertices, k)).astype(np.int64)
    weights = take("<f4", n_vertices * k, (n_vertices, k)).astype(np.float64)
    return SkinningWeights(handle_curve, handle_t, handle_rest, indices, weights, float(temperature))


def blob_byte_length(n_handles: int, n_vertices: int, k: int) -> int:
    """Expected blob size for the documented layout."""
    return 4 + 16 + 4 + n_handles * (4 + 4 + 12) + n_vertices * k * 8
