"""Perceptual encoder adapters, the semantic loss, patch similarity, and
view augmentations.

Two adapter families satisfy the same contract (a global embedding plus
spatially aligned activation grids named layer3/layer4):

* ``stub:<name>`` — a deterministic multi-scale feature pyramid with
  fixed-seed random channel mixing. No downloaded weights, fully
  differentiable, fast on CPU; every name gives an independent feature
  space. This is what the desk-scale test preset uses.
* ``clip:<arch>`` / ``ts:<file>`` — TorchScript modules exported from real
  pretrained encoders, resolved inside a local weights directory. Loading
  fails loudly when the file is absent; there is no silent fallback.

Patch similarity mirrors the same split (``stub:vgg``/``stub:alex`` vs
``lpips:<variant>``). The optimization and evaluation variants must differ;
the run config enforces that.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F


class EncoderLoadError(RuntimeError):
    """Model weights could not be resolved."""


def _seed_from(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")


def prepare_image(img, resolution: int | None = None) -> torch.Tensor:
    """Coerce an image to a (B, 3, H, W) float tensor in [0, 1].

    Accepts (H, W) grayscale, (H, W, 3), (3, H, W), or already-batched
    tensors/arrays; optionally resizes (bilinear) to ``resolution``.
    Floating dtypes are preserved (the optimization loop runs float32),
    anything else becomes float64.
    """
    if not isinstance(img, torch.Tensor):
        img = torch.from_numpy(np.asarray(img, dtype=np.float64))
    if not img.dtype.is_floating_point:
        img = img.to(torch.float64)
    if img.dim() == 2:
        img = img.unsqueeze(0).expand(3, -1, -1)
    if img.dim() == 3:
        if img.shape[-1] == 3 and img.shape[0] != 3:
            img = img.permute(2, 0, 1)
        img = img.unsqueeze(0)
    if resolution is not None and img.shape[-1] != resolution:
        img = F.interpolate(img, size=(resolution, resolution), mode="bilinear", align_corners=False)
    return img


class StubEncoder:
    """Deterministic pyramid encoder used when no pretrained weights exist.

    layer3 lives at 1/8 of the input resolution and layer4 at 1/16. Both
    mix three kinds of channels: the box-downsampled image, amplified
    wide-blur copies of it, and a tanh of a seeded random 3x3 convolution.
    The wide-blur channels matter for optimization: they make the squared
    activation difference behave like a coarse ink-mass comparison with a
    near-global basin, so strokes grow toward the target drawing instead of
    fading out, while the fine channels handle placement detail. The global
    embedding is a seeded linear map of mean-pooled layer4 features.
    """

    layer_names = ("layer3", "layer4")
    downsampling = {"layer3": 8, "layer4": 16}

    def __init__(self, identity: str, input_resolution: int = 224):
        self.identity = identity
        self.input_resolution = input_resolution
        self.mean = 0.5
        self.std = 0.5
        gen = torch.Generator().manual_seed(_seed_from(identity))

        def conv_weight(out_c, in_c, k=3):
            w = torch.randn(out_c, in_c, k, k, generator=gen, dtype=torch.float64)
            return w / np.sqrt(in_c * k * k)

        self.w3 = conv_weight(10, 3)
        self.w4 = conv_weight(20, 3)
        self.w_embed = torch.randn(64, 32, generator=gen, dtype=torch.float64) / np.sqrt(32)

    def encode(self, img) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
        x = prepare_image(img, self.input_resolution)
        x = (x - self.mean) / self.std
        w3, w4 = self.w3.to(x.dtype), self.w4.to(x.dtype)
        p3 = F.avg_pool2d(x, self.downsampling["layer3"])
        p4 = F.avg_pool2d(x, self.downsampling["layer4"])
        # Amplitudes weight the blur scales so that the coarse ink-mass
        # mismatch dominates the fine placement terms; without this,
        # gradient descent prefers erasing strokes over moving them.
        wide3 = F.avg_pool2d(p3, 5, stride=1, padding=2)
        wide4a = F.avg_pool2d(p4, 3, stride=1, padding=1)
        wide4b = F.avg_pool2d(p4, 7, stride=1, padding=3)
        wide4c = F.avg_pool2d(p4, 15, stride=1, padding=7)
        layer3 = torch.cat(
            [0.25 * p3, 2.0 * wide3, 0.5 * torch.tanh(F.conv2d(p3, w3, padding=1))], dim=1
        )
        layer4 = torch.cat(
            [
                0.25 * p4,
                wide4a,
                6.0 * wide4b,
                12.0 * wide4c,
                0.5 * torch.tanh(F.conv2d(p4, w4, padding=1)),
            ],
            dim=1,
        )
        embedding = layer4.mean(dim=(2, 3)) @ self.w_embed.to(x.dtype).T
        return embedding, {"layer3": layer3, "layer4": layer4}


class TorchScriptEncoder:
    """Adapter over an exported TorchScript encoder.

    The module must map a normalized (B, 3, R, R) image to a tuple
    (embedding, layer3, layer4). See README for the export recipe covering
    the CLIP ResNet variants.
    """

    layer_names = ("layer3", "layer4")

    def __init__(self, identity: str, path: Path, input_resolution: int = 224):
        if not path.exists():
            raise EncoderLoadError(
                f"weights for encoder {identity!r} not found at {path}; "
                "export the model to TorchScript or switch to a stub encoder"
            )
        self.identity = identity
        self.input_resolution = input_resolution
        self.mean = torch.tensor([0.48145466, 0.4578275, 0.40821073]).view(1, 3, 1, 1)
        self.std = torch.tensor([0.26862954, 0.26130258, 0.27577711]).view(1, 3, 1, 1)
        self.module = torch.jit.load(str(path)).eval()

    def encode(self, img) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
        x = prepare_image(img, self.input_resolution).to(torch.float32)
        x = (x - self.mean) / self.std
        embedding, layer3, layer4 = self.module(x)
        return embedding.to(torch.float64), {
            "layer3": layer3.to(torch.float64),
            "layer4": layer4.to(torch.float64),
        }


def get_encoder(identity: str, weights_dir: str | Path | None = None, input_resolution: int = 224):
    """Resolve an encoder identity string to an adapter instance."""
    if identity.startswith("stub:"):
        return StubEncoder(identity, input_resolution)
    weights_dir = Path(weights_dir) if weights_dir else Path("weights")
    if identity.startswith("clip:"):
        fname = "clip_" + identity.split(":", 1)[1].replace("/", "-") + ".pt"
        return TorchScriptEncoder(identity, weights_dir / fname, input_resolution)
    if identity.startswith("ts:"):
        return TorchScriptEncoder(identity, Path(identity.split(":", 1)[1]), input_resolution)
    raise EncoderLoadError(f"unknown encoder identity {identity!r}")


def cosine_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """1 - cosine similarity, averaged over the batch.

    Minimizing plain cosine similarity would push the embeddings apart, so
    the distance form is what enters the losses.
    """
    return (1.0 - F.cosine_similarity(a, b, dim=-1)).mean()


def semantic_loss(
    encoder,
    img_curve,
    img_target,
    lambda_fc: float,
    include_layers: bool = True,
) -> torch.Tensor:
    """Global-embedding distance plus intermediate activation differences.

    The layer term is the mean squared difference of the layer3/layer4
    activation grids (mean rather than sum keeps the scale independent of
    resolution); ``include_layers=False`` drops it, which is the
    intermediate-layers ablation.
    """
    emb_c, acts_c = encoder.encode(img_curve)
    emb_t, acts_t = encoder.encode(img_target)
    loss = lambda_fc * cosine_distance(emb_c, emb_t)
    if include_layers:
        for name in encoder.layer_names:
            loss = loss + ((acts_c[name] - acts_t[name]) ** 2).mean()
    return loss


class StubPatchSimilarity:
    """LPIPS-shaped patch metric from fixed-seed random features.

    Three stride-2 stages of seeded convolutions; per-stage features are
    channel-normalized and compared by mean squared difference. Symmetric,
    zero on identical inputs, sensitive to small translations.
    """

    def __init__(self, identity: str):
        self.identity = identity
        gen = torch.Generator().manual_seed(_seed_from(identity))
        widths = [3, 12, 24, 32]
        self.stages = []
        for c_in, c_out in zip(widths[:-1], widths[1:]):
            w = torch.randn(c_out, c_in, 3, 3, generator=gen, dtype=torch.float64)
            self.stages.append(w / np.sqrt(c_in * 9))

    def _features(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for w in self.stages:
            x = torch.tanh(F.conv2d(x, w.to(x.dtype), stride=2, padding=1))
            norm = torch.sqrt((x * x).sum(dim=1, keepdim=True) + 1e-10)
            feats.append(x / norm)
        return feats

    def __call__(self, a, b) -> torch.Tensor:
        ta = prepare_image(a)
        tb = prepare_image(b)
        if ta.shape != tb.shape:
            raise ValueError("patch similarity requires equal resolutions")
        loss = torch.zeros((), dtype=torch.float64)
        for fa, fb in zip(self._features(ta - 0.5), self._features(tb - 0.5)):
            loss = loss + ((fa - fb) ** 2).mean()
        return loss


class TorchScriptPatchSimilarity:
    """Adapter over an exported TorchScript patch-similarity module."""

    def __init__(self, identity: str, path: Path):
        if not path.exists():
            raise EncoderLoadError(
                f"weights for patch model {identity!r} not found at {path}"
            )
        self.identity = identity
        self.module = torch.jit.load(str(path)).eval()

    def __call__(self, a, b) -> torch.Tensor:
        ta = prepare_image(a).to(torch.float32)
        tb = prepare_image(b).to(torch.float32)
        return self.module(ta, tb).mean().to(torch.float64)


def get_patch_model(identity: str, weights_dir: str | Path | None = None):
    if identity.startswith("stub:"):
        return StubPatchSimilarity(identity)
    weights_dir = Path(weights_dir) if weights_dir else Path("weights")
    if identity.startswith("lpips:"):
        fname = "lpips_" + identity.split(":", 1)[1] + ".pt"
        return TorchScriptPatchSimilarity(identity, weights_dir / fname)
    if identity.startswith("ts:"):
        return TorchScriptPatchSimilarity(identity, Path(identity.split(":", 1)[1]))
    raise EncoderLoadError(f"unknown patch model identity {identity!r}")


def patch_similarity(model, a, b) -> torch.Tensor:
    return model(a, b)


@dataclass
class AugmentParams:
    """One sampled view augmentation: perspective corner jitter + crop.

    ``corners``/``jittered`` are the four image corners (pixel coords,
    clockwise from top-left) before and after the perspective jitter; the
    crop window is applied on top and resized back to the full resolution.
    """

    corners: np.ndarray  # (4, 2)
    jittered: np.ndarray  # (4, 2)
    crop_scale: float
    crop_top: float
    crop_left: float

    def is_identity(self) -> bool:
        return (
            np.array_equal(self.corners, self.jittered)
            and self.crop_scale == 1.0
            and self.crop_top == 0.0
            and self.crop_left == 0.0
        )


def sample_augment_params(
    resolution: int,
    rng: np.random.Generator,
    distortion: float = 0.2,
    crop_min: float = 0.8,
) -> AugmentParams:
    half = distortion * resolution / 2.0
    r = float(resolution)
    corners = np.array([[0.0, 0.0], [r, 0.0], [r, r], [0.0, r]])
    if distortion > 0:
        jittered = corners + rng.uniform(-half, half, size=(4, 2))
    else:
        jittered = corners.copy()
    scale = float(rng.uniform(crop_min, 1.0)) if crop_min < 1.0 else 1.0
    crop_size = scale * r
    crop_top = float(rng.uniform(0.0, r - crop_size)) if scale < 1.0 else 0.0
    crop_left = float(rng.uniform(0.0, r - crop_size)) if scale < 1.0 else 0.0
    return AugmentParams(corners, jittered, scale, crop_top, crop_left)


def _homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 map H with H @ [dst, 1] ~ [src, 1] for the 4 corner pairs."""
    a, b = [], []
    for (sx, sy), (dx, dy) in zip(src, dst):
        a.append([dx, dy, 1, 0, 0, 0, -sx * dx, -sx * dy])
        a.append([0, 0, 0, dx, dy, 1, -sy * dx, -sy * dy])
        b += [sx, sy]
    h = np.linalg.solve(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    return np.append(h, 1.0).reshape(3, 3)


def _augment_grid(params: AugmentParams, resolution: int) -> torch.Tensor:
    """Sampling grid (1, H, W, 2) in grid_sample's [-1, 1] convention that
    realizes crop-then-unwarp in one pass."""
    r = float(resolution)
    # Output pixel center -> crop window pixel (affine), then inverse
    # perspective back to source pixels.
    warp = _homography(params.corners, params.jittered)
    crop = np.array(
        [
            [params.crop_scale, 0.0, params.crop_left],
            [0.0, params.crop_scale, params.crop_top],
            [0.0, 0.0, 1.0],
        ]
    )
    m = warp @ crop
    xs = np.arange(resolution) + 0.5
    xx, yy = np.meshgrid(xs, xs)
    pts = np.stack([xx, yy, np.ones_like(xx)], axis=-1) @ m.T
    sx = pts[..., 0] / pts[..., 2]
    sy = pts[..., 1] / pts[..., 2]
    grid = np.stack([2.0 * sx / r - 1.0, 2.0 * sy / r - 1.0], axis=-1)
    return torch.from_numpy(grid).unsqueeze(0)


def apply_augment(img, params: AugmentParams, fill: float = 1.0) -> torch.Tensor:
    """Differentiable warp + crop + resize back to the input resolution.

    Out-of-frame regions take the ``fill`` value (white for renders, 1 for
    weight maps). Identity parameters return the input untouched.
    """
    x = prepare_image(img)
    if params.is_identity():
        return x
    grid = _augment_grid(params, x.shape[-1]).to(x.dtype)
    warped = F.grid_sample(x - fill, grid.expand(x.shape[0], -1, -1, -1),
                           mode="bilinear", padding_mode="zeros", align_corners=False)
    return warped + fill


def augment(img, k: int, rng: np.random.Generator, distortion: float = 0.2,
            crop_min: float = 0.8) -> torch.Tensor:
    """(k, 3, R, R) independently augmented copies; deterministic per rng state."""
    if k < 1:
        raise ValueError("k must be >= 1")
    x = prepare_image(img)
    params = [sample_augment_params(x.shape[-1], rng, distortion, crop_min) for _ in range(k)]
    return torch.cat([apply_augment(x, p) for p in params])


def augment_pair(img_a, img_b, k: int, rng: np.random.Generator, distortion: float = 0.2,
                 crop_min: float = 0.8) -> tuple[torch.Tensor, torch.Tensor]:
    """Augment a curve/target pair with shared transforms.

    Returns two (k, 3, R, R) batches where element i of both batches was
    produced by the same sampled transform, so pixel (r, c) corresponds to
    the same source region in both.
    """
    xa = prepare_image(img_a)
    xb = prepare_image(img_b)
    if xa.shape != xb.shape:
        raise ValueError("paired augmentation requires equal shapes")
    params = [sample_augment_params(xa.shape[-1], rng, distortion, crop_min) for _ in range(k)]
    outs_a = torch.cat([apply_augment(xa, p) for p in params])
    outs_b = torch.cat([apply_augment(xb, p) for p in params])
    return outs_a, outs_b
