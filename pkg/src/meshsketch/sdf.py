"""Distance-to-mesh oracle, neural distance field fitting, and the curve
adherence loss.

The oracle computes exact closest-triangle distances (KD-tree over triangle
centroids prunes candidates without sacrificing exactness) and decides at
build time whether the mesh is closed enough for a generalized-winding-number
sign; otherwise distances stay unsigned. The neural field is a small MLP with
positional encoding fitted to oracle values, cached on disk keyed by the mesh
content hash because fitting dominates preprocessing time.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np
import torch
from scipy.spatial import cKDTree

from .geometry import Mesh, surface_samples
from .curves import CurveSet, eval_bezier_t


def closest_point_on_triangles(points: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Closest point on triangle i to point i (paired, vectorized).

    points (N, 3), triangles (N, 3, 3) -> (N, 3). Standard barycentric
    region classification; exact up to float64 rounding.
    """
    a, b, c = triangles[:, 0], triangles[:, 1], triangles[:, 2]
    ab, ac, ap = b - a, c - a, points - a

    d1 = np.einsum("nd,nd->n", ab, ap)
    d2 = np.einsum("nd,nd->n", ac, ap)
    bp = points - b
    d3 = np.einsum("nd,nd->n", ab, bp)
    d4 = np.einsum("nd,nd->n", ac, bp)
    cp = points - c
    d5 = np.einsum("nd,nd->n", ab, cp)
    d6 = np.einsum("nd,nd->n", ac, cp)

    result = np.empty_like(points)
    done = np.zeros(len(points), dtype=bool)

    def assign(mask, value):
        todo = mask & ~done
        result[todo] = value[todo]
        done[todo] = True

    assign((d1 <= 0) & (d2 <= 0), a)  # vertex A
    assign((d3 >= 0) & (d4 <= d3), b)  # vertex B
    assign((d6 >= 0) & (d5 <= d6), c)  # vertex C

    vc = d1 * d4 - d3 * d2
    edge_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    v = np.divide(d1, d1 - d3, out=np.zeros_like(d1), where=(d1 - d3) != 0)
    assign(edge_ab, a + v[:, None] * ab)

    vb = d5 * d2 - d1 * d6
    edge_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    w = np.divide(d2, d2 - d6, out=np.zeros_like(d2), where=(d2 - d6) != 0)
    assign(edge_ac, a + w[:, None] * ac)

    va = d3 * d6 - d5 * d4
    edge_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    denom_bc = (d4 - d3) + (d5 - d6)
    w2 = np.divide(d4 - d3, denom_bc, out=np.zeros_like(d4), where=denom_bc != 0)
    assign(edge_bc, b + w2[:, None] * (c - b))

    denom = va + vb + vc
    v_in = np.divide(vb, denom, out=np.zeros_like(vb), where=denom != 0)
    w_in = np.divide(vc, denom, out=np.zeros_like(vc), where=denom != 0)
    assign(np.ones(len(points), dtype=bool), a + v_in[:, None] * ab + w_in[:, None] * ac)
    return result


def generalized_winding_number(points: np.ndarray, mesh: Mesh) -> np.ndarray:
    """Solid-angle sum over all faces, normalized by 4*pi."""
    tri = mesh.vertices[mesh.faces]  # (F, 3, 3)
    out = np.empty(len(points))
    # Keep the points x faces workspace around ~2e7 entries.
    chunk = max(64, int(2e7 / max(1, len(tri))))
    for s in range(0, len(points), chunk):
        p = points[s : s + chunk]
        av = tri[None, :, 0] - p[:, None]
        bv = tri[None, :, 1] - p[:, None]
        cv = tri[None, :, 2] - p[:, None]
        la = np.linalg.norm(av, axis=-1)
        lb = np.linalg.norm(bv, axis=-1)
        lc = np.linalg.norm(cv, axis=-1)
        numer = np.einsum("pfd,pfd->pf", av, np.cross(bv, cv))
        denom = (
            la * lb * lc
            + np.einsum("pfd,pfd->pf", av, bv) * lc
            + np.einsum("pfd,pfd->pf", bv, cv) * la
            + np.einsum("pfd,pfd->pf", cv, av) * lb
        )
        out[s : s + chunk] = np.arctan2(numer, denom).sum(axis=1) / (2.0 * np.pi)
    return out


class DistanceOracle:
    """Exact distance queries against a triangle mesh.

    The sign method is chosen at construction: if the generalized winding
    number is near-integer for at least 99% of probe points the mesh is
    treated as closed and distances are signed (negative inside), otherwise
    they stay unsigned.
    """

    def __init__(self, mesh: Mesh, sign: str = "auto", probes: int = 1000, seed: int = 0):
        if len(mesh.faces) == 0:
            raise ValueError("oracle needs a mesh with faces")
        self.mesh = mesh
        self._tri = mesh.vertices[mesh.faces]
        self._centroids = self._tri.mean(axis=1)
        self._tree = cKDTree(self._centroids)
        self._radius = float(
            np.max(np.linalg.norm(self._tri - self._centroids[:, None], axis=-1))
        )
        if sign == "auto":
            rng = np.random.default_rng(seed)
            lo, hi = mesh.bbox
            span = hi - lo
            probes_pts = lo - 0.1 * span + rng.random((probes, 3)) * 1.2 * span
            w = generalized_winding_number(probes_pts, mesh)
            closed = np.mean(np.abs(w - np.round(w)) < 0.1) >= 0.99
            self.sign_method = "winding_number" if closed else "none"
        else:
            self.sign_method = sign

    def closest_points(self, points: np.ndarray, chunk: int = 4096):
        """Exact closest surface point and distance for each query point."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        closest = np.empty_like(points)
        dist = np.empty(len(points))
        for s in range(0, len(points), chunk):
            p = points[s : s + chunk]
            _, nearest_idx = self._tree.query(p)
            upper_pts = closest_point_on_triangles(p, self._tri[nearest_idx])
            upper = np.linalg.norm(p - upper_pts, axis=1)
            # Any triangle containing a closer point has its centroid within
            # upper + max centroid-to-vertex radius.
            candidate_lists = self._tree.query_ball_point(p, upper + self._radius + 1e-12)
            counts = np.array([len(c) for c in candidate_lists])
            flat_tri = np.concatenate(candidate_lists).astype(np.int64)
            flat_pts = np.repeat(p, counts, axis=0)
            cand_closest = closest_point_on_triangles(flat_pts, self._tri[flat_tri])
            cand_dist = np.linalg.norm(flat_pts - cand_closest, axis=1)
            offsets = np.concatenate([[0], np.cumsum(counts)])
            for i in range(len(p)):
                seg = slice(offsets[i], offsets[i + 1])
                j = int(np.argmin(cand_dist[seg]))
                dist[s + i] = cand_dist[seg][j]
                closest[s + i] = cand_closest[seg][j]
        return closest, dist

    def distance(self, points: np.ndarray) -> np.ndarray:
        """Signed (if available) or unsigned distance; exact."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        _, dist = self.closest_points(points)
        if self.sign_method == "winding_number":
            inside = generalized_winding_number(points, self.mesh) > 0.5
            dist = np.where(inside, -dist, dist)
        return dist


def oracle_distance(oracle: DistanceOracle, point) -> float:
    """Scalar convenience wrapper over :meth:`DistanceOracle.distance`."""
    return float(oracle.distance(np.asarray(point, dtype=np.float64).reshape(1, 3))[0])


@dataclass
class SDFFitConfig:
    hidden_layers: int = 6
    width: int = 256
    pe_bands: int = 6
    near_samples: int = 200_000
    uniform_samples: int = 50_000
    near_sigma: float = 0.03
    steps: int = 2000
    lr: float = 1e-3
    batch: int = 4096
    holdout_fraction: float = 0.05
    plateau_patience: int = 200
    error_gate: float = 0.01
    seed: int = 0


class NeuralSDF:
    """MLP distance field with sinusoidal positional encoding.

    Evaluation is deterministic; internals run in float32 with float64 in
    and out so callers never deal with dtype.
    """

    def __init__(self, cfg: SDFFitConfig, stats: dict | None = None):
        self.cfg = cfg
        self.stats = stats or {}
        torch.manual_seed(cfg.seed)
        in_dim = 3 + 3 * 2 * cfg.pe_bands
        layers: list[torch.nn.Module] = [torch.nn.Linear(in_dim, cfg.width), torch.nn.SiLU()]
        for _ in range(cfg.hidden_layers - 1):
            layers += [torch.nn.Linear(cfg.width, cfg.width), torch.nn.SiLU()]
        layers.append(torch.nn.Linear(cfg.width, 1))
        self.net = torch.nn.Sequential(*layers)

    def encode(self, p: torch.Tensor) -> torch.Tensor:
        feats = [p]
        for band in range(self.cfg.pe_bands):
            freq = (2.0**band) * np.pi
            feats += [torch.sin(freq * p), torch.cos(freq * p)]
        return torch.cat(feats, dim=-1)

    def forward_t(self, points: torch.Tensor) -> torch.Tensor:
        """Torch path (keeps gradients); points (..., 3) -> (...)."""
        flat = points.reshape(-1, 3).to(torch.float32)
        out = self.net(self.encode(flat)).squeeze(-1)
        return out.to(points.dtype).reshape(points.shape[:-1])

    def __call__(self, points: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            t = torch.from_numpy(np.atleast_2d(np.asarray(points, dtype=np.float64)))
            return self.forward_t(t).numpy()

    def save(self, path: str | Path, mesh_hash: str = "") -> None:
        state = {k: v.numpy() for k, v in self.net.state_dict().items()}
        meta = {"cfg": asdict(self.cfg), "stats": self.stats, "mesh_hash": mesh_hash}
        np.savez(path, __meta__=json.dumps(meta), **state)

    @classmethod
    def load(cls, path: str | Path, expect_mesh_hash: str | None = None) -> "NeuralSDF":
        data = np.load(path, allow_pickle=False)
        meta = json.loads(str(data["__meta__"]))
        if expect_mesh_hash is not None and meta["mesh_hash"] != expect_mesh_hash:
            raise ValueError(
                f"distance field was fitted for mesh {meta['mesh_hash']}, "
                f"not {expect_mesh_hash}"
            )
        fieldnet = cls(SDFFitConfig(**meta["cfg"]), stats=meta["stats"])
        fieldnet.net.load_state_dict(
            {k: torch.from_numpy(data[k]) for k in data.files if k != "__meta__"}
        )
        return fieldnet


def sdf_cache_path(cache_dir: str | Path, mesh: Mesh) -> Path:
    return Path(cache_dir) / f"sdf-{mesh.content_hash()}.npz"


def _training_points(mesh: Mesh, cfg: SDFFitConfig, rng: np.random.Generator) -> np.ndarray:
    surface, _, _ = surface_samples(mesh, cfg.near_samples, rng)
    near = surface + rng.standard_normal(surface.shape) * cfg.near_sigma
    # Uniform points cover 1.2x the unit normalization cube so the field
    # stays trained anywhere a stray curve can reach, not just the mesh bbox.
    uniform = rng.uniform(-0.6, 0.6, size=(cfg.uniform_samples, 3))
    return np.concatenate([near, uniform], axis=0)


def fit_neural_sdf(mesh: Mesh, oracle: DistanceOracle, cfg: SDFFitConfig | None = None) -> NeuralSDF:
    """Fit the neural field to oracle distances.

    Training points mix near-surface samples (surface + Gaussian offsets)
    with uniform points in a 1.2x bbox. A held-out split tracks fit quality;
    training stops early when the held-out error plateaus. Divergence (final
    held-out median error above ``cfg.error_gate``) is reported through a
    warning and ``stats['diverged']``, never silently accepted.
    """
    cfg = cfg or SDFFitConfig()
    rng = np.random.default_rng(cfg.seed)
    points = _training_points(mesh, cfg, rng)
    values = oracle.distance(points)

    n_hold = max(1, int(len(points) * cfg.holdout_fraction))
    perm = rng.permutation(len(points))
    hold_idx, train_idx = perm[:n_hold], perm[n_hold:]
    x_train = torch.from_numpy(points[train_idx]).to(torch.float32)
    y_train = torch.from_numpy(values[train_idx]).to(torch.float32)
    x_hold = torch.from_numpy(points[hold_idx]).to(torch.float32)
    y_hold = torch.from_numpy(values[hold_idx]).to(torch.float32)

    fieldnet = NeuralSDF(cfg)
    opt = torch.optim.Adam(fieldnet.net.parameters(), lr=cfg.lr)
    best_err, best_state, since_best = np.inf, None, 0
    history = []
    for step in range(cfg.steps):
        idx = torch.from_numpy(rng.integers(0, len(x_train), cfg.batch))
        pred = fieldnet.net(fieldnet.encode(x_train[idx])).squeeze(-1)
        loss = torch.nn.functional.l1_loss(pred, y_train[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 50 == 0 or step == cfg.steps - 1:
            with torch.no_grad():
                hold_pred = fieldnet.net(fieldnet.encode(x_hold)).squeeze(-1)
                err = float((hold_pred - y_hold).abs().median())
            history.append({"step": step, "train_loss": float(loss.detach()), "holdout_median": err})
            if err < best_err * 0.995:
                best_err, since_best = err, 0
                best_state = {k: v.clone() for k, v in fieldnet.net.state_dict().items()}
            else:
                since_best += 50
                if since_best >= cfg.plateau_patience:
                    break
    if best_state is not None:
        fieldnet.net.load_state_dict(best_state)
    diverged = bool(best_err > cfg.error_gate)
    fieldnet.stats = {
        "holdout_median_error": best_err,
        "history": history,
        "diverged": diverged,
    }
    if diverged:
        warnings.warn(
            f"neural distance fit did not converge: held-out median error "
            f"{best_err:.4f} > {cfg.error_gate}",
            stacklevel=2,
        )
    return fieldnet


def sdf_loss(
    fieldnet: NeuralSDF,
    curves: CurveSet | torch.Tensor,
    s: int,
    rng: np.random.Generator,
    include_frozen: bool = True,
):
    """Mean |distance| over ``s`` random curve samples per curve.

    The parameter draws t_1..t_s are shared by every curve, and the
    1/(n*s) normalization makes the value invariant to duplicating curves;
    frozen curves are included by default (flag kept for experiments).
    Gradients flow to the control points when given a tensor and through
    the field network either way.
    """
    if s < 1:
        raise ValueError("need at least one sample per curve")
    tensor_in = isinstance(curves, torch.Tensor)
    if tensor_in:
        controls = curves
    else:
        mask = np.ones(len(curves), dtype=bool) if include_frozen else ~curves.frozen_mask()
        controls = torch.from_numpy(curves.control_array()[mask])
    if len(controls) == 0:
        raise ValueError("curve set is empty")
    t = torch.from_numpy(rng.random(s))
    pts = eval_bezier_t(controls, t.to(controls.dtype))
    loss = fieldnet.forward_t(pts).abs().mean()
    return loss if tensor_in else float(loss.detach())
