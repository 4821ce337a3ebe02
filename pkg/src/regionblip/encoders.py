"""Frozen modal feature extractors.

Both encoders are randomly initialized from a seed and frozen. The image
encoder embeds non-overlapping patches; the point encoder groups the cloud
around farthest-point-sampled centers, pools a shared MLP over each
centered neighborhood and mixes the group tokens with one transformer
layer.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .nn import Embedding, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention


@dataclass
class ImageGrid:
    pixels: np.ndarray  # [H, W, 3] float32 in [0, 1]

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"image must be [H, W, 3], got {self.pixels.shape}")

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


@dataclass
class PointCloud:
    points: np.ndarray  # [N, 3]
    features: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be [N, 3], got {self.points.shape}")
        if not np.isfinite(self.points).all():
            raise ValueError("point coordinates must be finite")

    def __len__(self):
        return len(self.points)


@dataclass
class ModalFeatures:
    tokens: np.ndarray  # [T, d_enc]
    modality: str  # "image" or "point"


class ImageEncoder(Module):
    """Patch MLP + fixed positional table. Frozen after construction."""

    def __init__(self, image_size=64, patch=16, dim=64, seed=0):
        if image_size % patch:
            raise ValueError(f"image size {image_size} not divisible by patch {patch}")
        rng = np.random.default_rng(seed)
        self._patch = patch
        self._image_size = image_size
        n_in = patch * patch * 3
        self.proj1 = Linear(n_in, 2 * dim, rng, std=1.0 / np.sqrt(n_in), name="image_encoder.proj1")
        self.proj2 = Linear(2 * dim, dim, rng, name="image_encoder.proj2")
        self.pos = Embedding((image_size // patch) ** 2, dim, rng, std=0.5)
        self.norm = LayerNorm(dim)
        self.freeze()

    @property
    def num_tokens(self):
        return (self._image_size // self._patch) ** 2

    def patch_tokens(self, pixels):
        """[B, H, W, 3] -> per-patch embeddings [B, T, d] before positions."""
        pixels = np.asarray(pixels, dtype=np.float32)
        if pixels.ndim == 3:
            pixels = pixels[None]
        B, H, W, C = pixels.shape
        P = self._patch
        if H % P or W % P:
            raise ValueError(f"image {H}x{W} not divisible by patch {P}")
        patches = pixels.reshape(B, H // P, P, W // P, P, C).transpose(0, 1, 3, 2, 4, 5)
        patches = patches.reshape(B, (H // P) * (W // P), P * P * C)
        with ag.no_grad():
            h = ag.gelu(self.proj1(ag.Tensor(patches - 0.5)))
            return self.proj2(h).data

    def encode_batch(self, pixels):
        tok = self.patch_tokens(pixels)
        if tok.shape[1] != self.num_tokens:
            raise ValueError(f"expected {self.num_tokens} patches, got {tok.shape[1]}")
        with ag.no_grad():
            out = self.norm(ag.Tensor(tok + self.pos.weight.data[None]))
        return out.data

    def __call__(self, img):
        return ModalFeatures(self.encode_batch(img.pixels)[0], "image")


def encode_image(encoder, img):
    return encoder(img)


def fps(points, k, start=0):
    """Greedy farthest point sampling; ties go to the lowest index."""
    pts = np.asarray(points.points if isinstance(points, PointCloud) else points, dtype=np.float64)
    n = len(pts)
    if k > n:
        raise ValueError(f"fps: k={k} exceeds number of points {n}")
    if not 0 <= start < n:
        raise ValueError(f"fps: start index {start} out of range")
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start
    dist = np.sum((pts - pts[start]) ** 2, axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(dist))  # argmax returns the first maximum
        chosen[i] = nxt
        dist = np.minimum(dist, np.sum((pts - pts[nxt]) ** 2, axis=1))
    return chosen


def knn_groups(points, centers, m):
    """Indices [k, m] of the m nearest points to each center (stable order)."""
    d = np.sum((points[None, :, :] - points[centers][:, None, :]) ** 2, axis=-1)
    return np.argsort(d, axis=1, kind="stable")[:, :m]


class PointEncoder(Module):
    """FPS centers -> kNN groups -> centered shared MLP, max-pooled -> one
    transformer layer -> ``groups`` tokens. Frozen after construction."""

    def __init__(self, groups=32, neighbors=16, dim=64, center_features=False, seed=1):
        rng = np.random.default_rng(seed)
        self._groups = groups
        self._neighbors = neighbors
        self._center_features = center_features
        self.mlp1 = Linear(3, dim, rng, std=2.0, name="point_encoder.mlp1")
        self.mlp2 = Linear(dim, dim, rng, name="point_encoder.mlp2")
        if center_features:
            self.center_proj = Linear(3, dim, rng, std=2.0, name="point_encoder.center_proj")
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, 4, rng, name="point_encoder.attn")
        self.norm2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, 2 * dim, rng, name="point_encoder.ffn")
        self.norm_out = LayerNorm(dim)
        self.freeze()

    @property
    def num_tokens(self):
        return self._groups

    def group_inputs(self, pc):
        """Centered neighborhoods [k, m, 3] and center coordinates [k, 3]."""
        pts = np.asarray(pc.points, dtype=np.float64)
        if len(pts) < max(self._groups, self._neighbors):
            raise ValueError(f"point cloud has {len(pts)} points, need >= {max(self._groups, self._neighbors)}")
        centers = fps(pts, self._groups, start=0)
        groups = knn_groups(pts, centers, self._neighbors)
        local = pts[groups] - pts[centers][:, None, :]
        return local.astype(np.float32), pts[centers].astype(np.float32)

    def group_features(self, local, centers):
        with ag.no_grad():
            h = ag.gelu(self.mlp1(ag.Tensor(local)))
            h = self.mlp2(h)
            pooled = h.data.max(axis=-2)
            if self._center_features:
                pooled = pooled + ag.gelu(self.center_proj(ag.Tensor(centers))).data
        return pooled

    def encode_batch(self, clouds):
        feats = []
        for pc in clouds:
            local, centers = self.group_inputs(pc)
            feats.append(self.group_features(local, centers))
        x = ag.Tensor(np.stack(feats))
        with ag.no_grad():
            h = self.norm1(x)
            x = x + self.attn(h, h)
            x = x + self.ffn(self.norm2(x))
            return self.norm_out(x).data

    def __call__(self, pc):
        return ModalFeatures(self.encode_batch([pc])[0], "point")


def encode_points(encoder, pc):
    return encoder(pc)


def augment_pointcloud(pc, seed, p_drop=0.1, scale_range=(0.8, 1.25), max_angle=np.pi, min_points=32):
    """Random point dropout, uniform scaling and rotation about the z (up) axis."""
    rng = np.random.default_rng(seed)
    pts = np.asarray(pc.points, dtype=np.float64)
    if len(pts) < min_points:
        raise ValueError(f"cloud has {len(pts)} points, below floor {min_points}")
    keep = np.ones(len(pts), dtype=bool)
    if p_drop > 0:
        for _ in range(100):
            keep = rng.random(len(pts)) >= p_drop
            if keep.sum() >= min_points:
                break
        else:
            keep = np.ones(len(pts), dtype=bool)
    scale = rng.uniform(*scale_range)
    angle = rng.uniform(-max_angle, max_angle)
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    out = (pts[keep] * scale) @ rot.T
    feats = None if pc.features is None else pc.features[keep]
    return PointCloud(out.astype(np.float32), feats)
