"""Dense voxel grids over an axis-aligned box, with trilinear reads and their adjoints.

Grid nodes sit on cell corners: a grid with dims (dx, dy, dz) has dx*dy*dz nodes
spanning the box inclusively, i.e. dims-1 cells per axis. Values are read with
trilinear interpolation; the backward op scatters an upstream gradient back onto
the eight stencil nodes of each query point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import sigmoid, softplus

# slack (relative to box size) tolerated when validating query points
_BOUNDS_EPS = 1e-9


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned box with strictly positive extent on every axis."""

    min_corner: np.ndarray
    max_corner: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min_corner, dtype=float).reshape(3)
        hi = np.asarray(self.max_corner, dtype=float).reshape(3)
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("aabb corners must be finite")
        if not np.all(lo < hi):
            raise ValueError("aabb min corner must be strictly below max corner")
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)

    @property
    def size(self) -> np.ndarray:
        return self.max_corner - self.min_corner

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min_corner + self.max_corner)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.size))

    def contains(self, points: np.ndarray, slack: float = 0.0) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        pad = slack * np.max(self.size)
        return np.all((p >= self.min_corner - pad) & (p <= self.max_corner + pad), axis=-1)


@dataclass(frozen=True)
class DensityActivation:
    """Map from raw grid reads to non-negative density.

    kind "shifted_softplus": softplus(raw + shift); kind "relu": max(raw, 0).
    """

    kind: str = "shifted_softplus"
    shift: float = -10.0

    def __post_init__(self):
        if self.kind not in ("shifted_softplus", "relu"):
            raise ValueError(f"unknown density activation {self.kind!r}")


def activate_density(raw: np.ndarray, act: DensityActivation) -> np.ndarray:
    if act.kind == "relu":
        return np.maximum(raw, 0.0)
    return softplus(raw + act.shift)


def activate_density_grad(raw: np.ndarray, act: DensityActivation) -> np.ndarray:
    """d(density)/d(raw) at raw."""
    if act.kind == "relu":
        return (np.asarray(raw) > 0.0).astype(float)
    return sigmoid(np.asarray(raw) + act.shift)


def _check_dims(dims) -> tuple:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d < 2 for d in dims):
        raise ValueError("grid dims must be three integers >= 2")
    return dims


@dataclass
class DensityGrid:
    """Scalar field on a voxel grid. values has shape dims, indexed [x, y, z]."""

    dims: tuple
    values: np.ndarray
    aabb: Aabb
    activation: DensityActivation = field(default_factory=DensityActivation)

    def __post_init__(self):
        self.dims = _check_dims(self.dims)
        v = np.asarray(self.values)
        if v.shape != self.dims:
            raise ValueError(f"density values shape {v.shape} does not match dims {self.dims}")
        if not np.all(np.isfinite(v)):
            raise ValueError("density values must be finite")
        self.values = v if v.dtype.kind == "f" else v.astype(np.float64)

    @property
    def voxel_size(self) -> np.ndarray:
        return self.aabb.size / (np.asarray(self.dims) - 1)


@dataclass
class FeatureGrid:
    """Vector field on a voxel grid. values has shape dims + (channels,)."""

    dims: tuple
    channels: int
    values: np.ndarray
    aabb: Aabb

    def __post_init__(self):
        self.dims = _check_dims(self.dims)
        self.channels = int(self.channels)
        if self.channels < 1:
            raise ValueError("feature grid needs at least one channel")
        v = np.asarray(self.values)
        if v.shape != self.dims + (self.channels,):
            raise ValueError(
                f"feature values shape {v.shape} does not match dims {self.dims} + ({self.channels},)"
            )
        if not np.all(np.isfinite(v)):
            raise ValueError("feature values must be finite")
        self.values = v if v.dtype.kind == "f" else v.astype(np.float64)


def world_to_grid(points: np.ndarray, aabb: Aabb, dims) -> np.ndarray:
    """Map world points to continuous grid coordinates in [0, dim-1] per axis.

    Points outside the box (beyond a tiny relative slack) raise ValueError.
    """
    dims = _check_dims(dims)
    p = np.asarray(points, dtype=float)
    if p.shape[-1] != 3:
        raise ValueError("points must have a trailing axis of size 3")
    inside = aabb.contains(p, slack=_BOUNDS_EPS)
    if not np.all(inside):
        raise ValueError("point outside grid")
    scale = (np.asarray(dims) - 1) / aabb.size
    g = (p - aabb.min_corner) * scale
    return np.clip(g, 0.0, np.asarray(dims, dtype=float) - 1.0)


def _stencil(points: np.ndarray, aabb: Aabb, dims):
    """Corner indices and weights of the trilinear stencil for each point.

    Returns (ix, iy, iz) lower-corner integer indices with shape points.shape[:-1]
    and fractional offsets (fx, fy, fz) in [0, 1].
    """
    g = world_to_grid(points, aabb, dims)
    lo = np.minimum(np.floor(g).astype(np.int64), np.asarray(dims) - 2)
    frac = g - lo
    return lo[..., 0], lo[..., 1], lo[..., 2], frac[..., 0], frac[..., 1], frac[..., 2]


def _corner_weights(fx, fy, fz):
    """Weights of the 8 cell corners, ordered by (dx, dy, dz) bit pattern."""
    wx = (1.0 - fx, fx)
    wy = (1.0 - fy, fy)
    wz = (1.0 - fz, fz)
    return [
        (dx, dy, dz, wx[dx] * wy[dy] * wz[dz])
        for dx in (0, 1)
        for dy in (0, 1)
        for dz in (0, 1)
    ]


def interp_density(grid: DensityGrid, points: np.ndarray) -> np.ndarray:
    """Trilinear read of the raw (pre-activation) density at world points."""
    ix, iy, iz, fx, fy, fz = _stencil(points, grid.aabb, grid.dims)
    out = 0.0
    for dx, dy, dz, w in _corner_weights(fx, fy, fz):
        out = out + w * grid.values[ix + dx, iy + dy, iz + dz]
    return out


def interp_feature(grid: FeatureGrid, points: np.ndarray) -> np.ndarray:
    """Trilinear read of the feature field; output shape points.shape[:-1] + (channels,)."""
    ix, iy, iz, fx, fy, fz = _stencil(points, grid.aabb, grid.dims)
    out = 0.0
    for dx, dy, dz, w in _corner_weights(fx, fy, fz):
        out = out + w[..., None] * grid.values[ix + dx, iy + dy, iz + dz]
    return out


def interp_density_backward(
    grid: DensityGrid, points: np.ndarray, upstream: np.ndarray, out: np.ndarray | None = None
) -> np.ndarray:
    """Scatter d(loss)/d(read) back onto grid nodes; returns the gradient array."""
    if out is None:
        out = np.zeros_like(grid.values)
    elif out.shape != grid.values.shape:
        raise ValueError("gradient buffer shape does not match grid")
    up = np.asarray(upstream, dtype=out.dtype)
    if up.shape != np.asarray(points).shape[:-1]:
        raise ValueError("upstream gradient shape does not match points")
    ix, iy, iz, fx, fy, fz = _stencil(points, grid.aabb, grid.dims)
    for dx, dy, dz, w in _corner_weights(fx, fy, fz):
        np.add.at(out, (ix + dx, iy + dy, iz + dz), w * up)
    return out


def interp_feature_backward(
    grid: FeatureGrid, points: np.ndarray, upstream: np.ndarray, out: np.ndarray | None = None
) -> np.ndarray:
    """Adjoint of interp_feature; upstream shape must end with (channels,)."""
    if out is None:
        out = np.zeros_like(grid.values)
    elif out.shape != grid.values.shape:
        raise ValueError("gradient buffer shape does not match grid")
    up = np.asarray(upstream, dtype=out.dtype)
    if up.shape != np.asarray(points).shape[:-1] + (grid.channels,):
        raise ValueError("upstream gradient shape does not match points and channels")
    ix, iy, iz, fx, fy, fz = _stencil(points, grid.aabb, grid.dims)
    for dx, dy, dz, w in _corner_weights(fx, fy, fz):
        np.add.at(out, (ix + dx, iy + dy, iz + dz), w[..., None] * up)
    return out
