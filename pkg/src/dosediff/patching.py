"""Overlapping patch tiling and linear-decay blended merging."""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

DEFAULT_PATCH = (32, 32, 24)
DEFAULT_OVERLAP = (8, 8, 8)


def _axis_starts(n, p, o):
    stride = p - o
    starts = list(range(0, n - p + 1, stride))
    if starts[-1] + p < n:
        # clamp the trailing patch in-bounds; its overlap grows instead of padding
        starts.append(n - p)
    return tuple(starts)


def ramp_profile(p, o):
    d = np.minimum(np.arange(p), np.arange(p)[::-1])
    return np.where(d < o, (d + 1.0) / (o + 1.0), 1.0)


def blend_weights(patch, overlap):
    """Separable weights: 1 inside, (k+1)/(o+1) for the k-th voxel from a face."""
    for p, o in zip(patch, overlap):
        if not 0 <= o < p:
            raise ValueError(f"overlap {o} must lie in [0, {p})")
    wz, wy, wx = (ramp_profile(p, o) for p, o in zip(patch, overlap))
    return wz[:, None, None] * wy[None, :, None] * wx[None, None, :]


@dataclass(frozen=True)
class PatchGrid:
    shape: tuple
    patch: tuple
    overlap: tuple
    starts: tuple  # per-axis start lists
    weights: np.ndarray

    @property
    def origins(self):
        """Patch origins in row-major (z, then y, then x) order."""
        return list(product(*self.starts))

    def __len__(self):
        return int(np.prod([len(s) for s in self.starts]))

    def window(self, origin):
        return tuple(slice(o, o + p) for o, p in zip(origin, self.patch))


def plan_patches(shape, patch=DEFAULT_PATCH, overlap=DEFAULT_OVERLAP):
    shape, patch, overlap = (tuple(int(v) for v in t) for t in (shape, patch, overlap))
    for n, p, o in zip(shape, patch, overlap):
        if p > n:
            raise ValueError(f"patch {patch} larger than volume {shape}")
        if not 0 <= o < p:
            raise ValueError(f"overlap {overlap} must be smaller than patch {patch}")
    starts = tuple(_axis_starts(n, p, o) for n, p, o in zip(shape, patch, overlap))
    return PatchGrid(shape, patch, overlap, starts, blend_weights(patch, overlap))


def extract(volume, grid):
    """Copies of every patch window; leading (batch/channel) axes are kept."""
    if tuple(volume.shape[-3:]) != grid.shape:
        raise ValueError(f"volume shape {tuple(volume.shape[-3:])} != plan shape {grid.shape}")
    out = []
    for origin in grid.origins:
        win = (Ellipsis,) + grid.window(origin)
        p = volume[win]
        out.append(p.clone() if hasattr(p, "clone") else p.copy())
    return out


def merge(patches, grid):
    """Weighted average of overlapping patches; merge(extract(v)) == v."""
    if len(patches) != len(grid):
        raise ValueError(f"expected {len(grid)} patches, got {len(patches)}")
    first = np.asarray(patches[0])
    lead = first.shape[:-3]
    acc = np.zeros(lead + grid.shape, dtype=np.float64)
    wsum = np.zeros(grid.shape, dtype=np.float64)
    for origin, p in zip(grid.origins, patches):
        p = np.asarray(p, dtype=np.float64)
        if p.shape != lead + grid.patch:
            raise ValueError(f"patch shape {p.shape} != {lead + grid.patch}")
        win = grid.window(origin)
        acc[(Ellipsis,) + win] += grid.weights * p
        wsum[win] += grid.weights
    return acc / wsum
