"""Cameras, ray generation, ray marching, opacity, and transmittance masking.

Conventions: the camera looks along -z in camera space with x right and y up
(NeRF-synthetic style), poses are 3x4 camera-to-world matrices, ray directions
are unit length so marching distances are world distances. Sample points are
slot midpoints: t_near + (k + 0.5) * step while below t_far, each segment
length step except the last, which is truncated at t_far.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import Aabb

_MIN_DELTA = 1e-9  # degenerate marching segments are clamped to this


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a 3x4 camera-to-world pose."""

    width: int
    height: int
    focal: float
    pose: np.ndarray
    principal_point: np.ndarray | None = None
    rotation_tol: float = 1e-4

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        if not (np.isfinite(self.focal) and self.focal > 0):
            raise ValueError("focal length must be positive")
        pose = np.asarray(self.pose, dtype=float)
        if pose.shape == (4, 4):
            pose = pose[:3, :]
        if pose.shape != (3, 4):
            raise ValueError("pose must be a 3x4 (or 4x4) camera-to-world matrix")
        rot = pose[:, :3]
        if np.max(np.abs(rot @ rot.T - np.eye(3))) > self.rotation_tol:
            raise ValueError("pose rotation is not orthonormal within tolerance")
        pp = self.principal_point
        pp = np.array([self.width / 2.0, self.height / 2.0]) if pp is None else np.asarray(pp, dtype=float)
        object.__setattr__(self, "pose", pose)
        object.__setattr__(self, "principal_point", pp.reshape(2))

    @property
    def rotation(self) -> np.ndarray:
        return self.pose[:, :3]

    @property
    def origin(self) -> np.ndarray:
        return self.pose[:, 3]


@dataclass(frozen=True)
class Ray:
    """Single ray with unit direction and the flat pixel index it came from."""

    origin: np.ndarray
    direction: np.ndarray
    pixel_index: int = -1

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=float).reshape(3)
        d = np.asarray(self.direction, dtype=float).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise ValueError("ray direction must be unit length")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)


@dataclass
class RaySamples:
    """Ordered sample points of one ray inside a box."""

    ray: Ray
    positions: np.ndarray  # [count, 3]
    deltas: np.ndarray  # [count]

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.deltas = np.asarray(self.deltas, dtype=float).reshape(-1)
        if self.positions.shape[0] != self.deltas.shape[0]:
            raise ValueError("positions and deltas disagree on sample count")
        if np.any(self.deltas <= 0):
            raise ValueError("marching deltas must be positive")

    @property
    def count(self) -> int:
        return self.positions.shape[0]


@dataclass
class MaskedSamples:
    """Flat batch of surviving samples, ray-major with ascending sample index.

    ray_index/sample_index identify each survivor by the ray it belongs to and
    its original position along that ray. raw_counts keeps the pre-mask sample
    count per ray, which time-padded packing needs to size its slots.
    """

    n_rays: int
    ray_index: np.ndarray  # [S]
    sample_index: np.ndarray  # [S]
    positions: np.ndarray  # [S, 3]
    alphas: np.ndarray  # [S]
    trans: np.ndarray  # [S]
    raw_counts: np.ndarray  # [n_rays]

    def __post_init__(self):
        self.ray_index = np.asarray(self.ray_index, dtype=np.int64).reshape(-1)
        self.sample_index = np.asarray(self.sample_index, dtype=np.int64).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.alphas = np.asarray(self.alphas, dtype=float).reshape(-1)
        self.trans = np.asarray(self.trans, dtype=float).reshape(-1)
        self.raw_counts = np.asarray(self.raw_counts, dtype=np.int64).reshape(-1)
        s = self.ray_index.shape[0]
        if not (self.sample_index.shape[0] == self.positions.shape[0] == s
                and self.alphas.shape[0] == self.trans.shape[0] == s):
            raise ValueError("masked sample arrays disagree on length")
        if self.raw_counts.shape[0] != self.n_rays:
            raise ValueError("raw_counts must have one entry per ray")

    @property
    def count(self) -> int:
        return self.ray_index.shape[0]

    def counts_per_ray(self) -> np.ndarray:
        return np.bincount(self.ray_index, minlength=self.n_rays)


def camera_rays(camera: Camera, pixels: np.ndarray | None = None):
    """Vectorized ray batch through pixel (px, py) pairs; defaults to the full image.

    Returns (origins [P,3], directions [P,3], pixel_indices [P]); directions are
    unit length, pixel_indices are py * width + px (row-major).
    """
    if pixels is None:
        px, py = np.meshgrid(np.arange(camera.width), np.arange(camera.height))
        pixels = np.stack([px.ravel(), py.ravel()], axis=1)
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.shape[1] != 2:
        raise ValueError("pixels must be an array of (px, py) pairs")
    px = pixels[:, 0].astype(float)
    py = pixels[:, 1].astype(float)
    if np.any((px < 0) | (px >= camera.width) | (py < 0) | (py >= camera.height)):
        raise ValueError("pixel outside image bounds")
    cx, cy = camera.principal_point
    d_cam = np.stack(
        [(px - cx) / camera.focal, -(py - cy) / camera.focal, -np.ones_like(px)], axis=1
    )
    d_world = d_cam @ camera.rotation.T
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.origin, d_world.shape).copy()
    idx = (pixels[:, 1].astype(np.int64) * camera.width + pixels[:, 0].astype(np.int64))
    return origins, d_world, idx


def generate_rays(camera: Camera, pixels: np.ndarray) -> list:
    """Rays through the given integer pixel coordinates, as Ray objects."""
    origins, dirs, idx = camera_rays(camera, pixels)
    return [Ray(o, d, int(i)) for o, d, i in zip(origins, dirs, idx)]


def _slab_range(origins: np.ndarray, dirs: np.ndarray, aabb: Aabb):
    """Entry/exit distances of rays against the box; t_far <= t_near means a miss."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (aabb.min_corner - origins) * inv
        t1 = (aabb.max_corner - origins) * inv
    lo = np.minimum(t0, t1)
    hi = np.maximum(t0, t1)
    # axis-parallel rays: inside the slab -> no constraint, outside -> miss
    par = np.abs(dirs) < 1e-12
    if np.any(par):
        inside = (origins >= aabb.min_corner) & (origins <= aabb.max_corner)
        lo = np.where(par, np.where(inside, -np.inf, np.inf), lo)
        hi = np.where(par, np.where(inside, np.inf, -np.inf), hi)
    t_near = np.max(lo, axis=-1)
    t_far = np.min(hi, axis=-1)
    t_near = np.maximum(t_near, 0.0)
    return t_near, t_far


def sample_ray_batch(
    origins: np.ndarray,
    dirs: np.ndarray,
    aabb: Aabb,
    step_size: float,
    phase: np.ndarray | None = None,
):
    """March a batch of rays through the box with a fixed step.

    Returns (positions [R,M,3], deltas [R,M], valid [R,M]) where M is the largest
    per-ray sample count in the batch and valid marks real samples. Rays that
    miss the box contribute zero valid slots. phase shifts each ray's sample
    offsets within its first step (default 0.5, the slot midpoint); training may
    pass per-ray uniforms here to jitter the marching pattern.
    """
    if not (np.isfinite(step_size) and step_size > 0):
        raise ValueError("step size must be positive")
    origins = np.asarray(origins, dtype=float).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
    r = origins.shape[0]
    if phase is None:
        phase = np.full(r, 0.5)
    else:
        phase = np.asarray(phase, dtype=float).reshape(-1)
        if phase.shape[0] != r:
            raise ValueError("phase must have one entry per ray")
        if np.any((phase < 0) | (phase >= 1)):
            raise ValueError("phase must lie in [0, 1)")
    t_near, t_far = _slab_range(origins, dirs, aabb)
    span = np.maximum(t_far - t_near, 0.0)
    counts = np.ceil(span / step_size - phase).astype(np.int64)
    counts = np.maximum(counts, 0)
    m = int(counts.max()) if counts.size else 0
    if m == 0:
        return (np.zeros((r, 0, 3)), np.zeros((r, 0)), np.zeros((r, 0), dtype=bool))
    k = np.arange(m)
    valid = k[None, :] < counts[:, None]
    fill = np.where(np.isfinite(t_near), t_near, 0.0)
    t = fill[:, None] + (k[None, :] + phase[:, None]) * step_size
    t = np.where(valid, t, fill[:, None])
    positions = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    deltas = np.full((r, m), step_size, dtype=float)
    last = np.clip(counts - 1, 0, None)
    rows = np.arange(r)
    has = counts > 0
    deltas[rows[has], last[has]] = t_far[has] - t[has, last[has]]
    deltas = np.maximum(deltas, _MIN_DELTA)
    deltas[~valid] = _MIN_DELTA
    return positions, deltas, valid


def sample_along_ray(ray: Ray, aabb: Aabb, step_size: float) -> RaySamples:
    """Samples of a single ray inside the box (may be empty on a miss)."""
    pos, deltas, valid = sample_ray_batch(ray.origin[None], ray.direction[None], aabb, step_size)
    keep = valid[0]
    return RaySamples(ray=ray, positions=pos[0][keep], deltas=deltas[0][keep])


def compute_alpha(sigma: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Per-sample opacity 1 - exp(-sigma * delta)."""
    sigma = np.asarray(sigma, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if np.any(sigma < 0):
        raise ValueError("density must be non-negative")
    if np.any(delta <= 0):
        raise ValueError("deltas must be positive")
    return -np.expm1(-sigma * delta)


def compute_transmittance(alphas: np.ndarray) -> np.ndarray:
    """Transmittance ahead of each sample along the last axis.

    T[..., 0] = 1 and T[..., i] = prod_{j<i}(1 - alpha[..., j]).
    """
    a = np.asarray(alphas, dtype=float)
    if np.any((a < 0) | (a > 1)) or not np.all(np.isfinite(a)):
        raise ValueError("alphas must lie in [0, 1]")
    one_minus = 1.0 - a
    t = np.cumprod(one_minus, axis=-1)
    t = np.roll(t, 1, axis=-1)
    t[..., 0] = 1.0
    return t


def apply_mask(
    positions: np.ndarray,
    alphas: np.ndarray,
    trans: np.ndarray,
    valid: np.ndarray,
    lambda1: float,
    lambda2: float,
) -> MaskedSamples:
    """Keep samples with transmittance above lambda1 and opacity above lambda2.

    Inputs are [R, M] batch arrays (positions [R, M, 3]); valid marks real
    marching slots. Survivors come out flat, ray-major, original order kept.
    """
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("mask thresholds must be non-negative")
    alphas = np.asarray(alphas, dtype=float)
    trans = np.asarray(trans, dtype=float)
    valid = np.asarray(valid, dtype=bool)
    if alphas.ndim != 2 or alphas.shape != trans.shape or alphas.shape != valid.shape:
        raise ValueError("alphas, trans and valid must share an [R, M] shape")
    keep = valid & (trans > lambda1) & (alphas > lambda2)
    ray_index, sample_index = np.nonzero(keep)
    return MaskedSamples(
        n_rays=alphas.shape[0],
        ray_index=ray_index,
        sample_index=sample_index,
        positions=np.asarray(positions, dtype=float)[ray_index, sample_index],
        alphas=alphas[ray_index, sample_index],
        trans=trans[ray_index, sample_index],
        raw_counts=valid.sum(axis=1),
    )
