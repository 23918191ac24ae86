"""Preprocessing workflow: resampling, grid rescaling, HU windowing,
normalization, projection standardization, and translation-only registration.

All interpolation is trilinear/bilinear with the voxel-center convention
(sample i sits at (i + 0.5) * spacing). Volume/projection resampling clamps
coordinates at the border; apply_shift instead zero-fills out-of-bounds.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .voxcore import HU, NORMALIZED_01, NORMALIZED_PM1, Projection, Volume, VoxError

PM1 = "PM1"
ZERO_ONE = "ZERO_ONE"


@dataclass(frozen=True)
class WindowSpec:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise VoxError(f"window lo {self.lo} must be < hi {self.hi}")


@dataclass(frozen=True)
class RigidShift2D:
    dx: float
    dy: float
    score: float

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise VoxError("registration score must be finite")


def _gather_trilinear(data: np.ndarray, x: np.ndarray, y: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Trilinear interpolation at continuous index coordinates, border-clamped."""
    nx, ny, nz = data.shape
    x = np.clip(x, 0.0, nx - 1.0)
    y = np.clip(y, 0.0, ny - 1.0)
    z = np.clip(z, 0.0, nz - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.int64), nx - 2) if nx > 1 else np.zeros_like(x, np.int64)
    y0 = np.minimum(np.floor(y).astype(np.int64), ny - 2) if ny > 1 else np.zeros_like(y, np.int64)
    z0 = np.minimum(np.floor(z).astype(np.int64), nz - 2) if nz > 1 else np.zeros_like(z, np.int64)
    x1 = np.minimum(x0 + 1, nx - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    z1 = np.minimum(z0 + 1, nz - 1)
    fx, fy, fz = x - x0, y - y0, z - z0
    c000 = data[x0, y0, z0]
    c100 = data[x1, y0, z0]
    c010 = data[x0, y1, z0]
    c110 = data[x1, y1, z0]
    c001 = data[x0, y0, z1]
    c101 = data[x1, y0, z1]
    c011 = data[x0, y1, z1]
    c111 = data[x1, y1, z1]
    c00 = c000 * (1 - fx) + c100 * fx
    c10 = c010 * (1 - fx) + c110 * fx
    c01 = c001 * (1 - fx) + c101 * fx
    c11 = c011 * (1 - fx) + c111 * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


def _resize_volume(data: np.ndarray, out_dims, scale) -> np.ndarray:
    """Resize by physical-position mapping; ``scale`` = out_spacing/in_spacing."""
    coords = [
        (np.arange(n) + 0.5) * s - 0.5  # continuous input index of output centers
        for n, s in zip(out_dims, scale)
    ]
    x, y, z = np.meshgrid(*coords, indexing="ij")
    return _gather_trilinear(data, x, y, z)


def resample_volume(v: Volume, target_spacing) -> Volume:
    """Trilinear resample to a new isotropic/anisotropic spacing."""
    target = tuple(float(s) for s in target_spacing)
    if any(s <= 0 for s in target):
        raise VoxError(f"target spacing must be positive, got {target}")
    out_dims = tuple(
        max(1, int(round(n * s_in / s_out)))
        for n, s_in, s_out in zip(v.dims, v.spacing, target)
    )
    scale = tuple(s_out / s_in for s_in, s_out in zip(v.spacing, target))
    return Volume(out_dims, target, _resize_volume(v.data, out_dims, scale), v.domain_tag)


def rescale_to_grid(v: Volume, target_dims) -> Volume:
    """Trilinear resize to fixed dims; spacing updated to preserve extent."""
    target = tuple(int(n) for n in target_dims)
    if any(n <= 0 for n in target):
        raise VoxError(f"target dims must be positive, got {target}")
    new_spacing = tuple(e / n for e, n in zip(v.extent_mm, target))
    scale = tuple(n_in / n_out for n_in, n_out in zip(v.dims, target))
    return Volume(target, new_spacing, _resize_volume(v.data, target, scale), v.domain_tag)


def window_and_normalize(v: Volume, w: WindowSpec, target: str = PM1) -> Volume:
    """Clamp to [w.lo, w.hi] then map affinely to [-1,1] (PM1) or [0,1]."""
    v.assert_domain(HU, "windowing input")
    if target not in (PM1, ZERO_ONE):
        raise VoxError(f"unknown normalization target {target!r}")
    clamped = np.clip(v.data, w.lo, w.hi)
    unit = (clamped - w.lo) / (w.hi - w.lo)
    if target == PM1:
        return Volume(v.dims, v.spacing, 2.0 * unit - 1.0, NORMALIZED_PM1)
    return Volume(v.dims, v.spacing, unit, NORMALIZED_01)


def _sample_bilinear_clamped(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear at continuous (row=y, col=x) index coordinates, border-clamped."""
    h, w = img.shape
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xs).astype(np.int64), w - 2) if w > 1 else np.zeros_like(xs, np.int64)
    y0 = np.minimum(np.floor(ys).astype(np.int64), h - 2) if h > 1 else np.zeros_like(ys, np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx, fy = xs - x0, ys - y0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def standardize_projection(p: Projection, target) -> Projection:
    """Bilinear resize to target (p_u, p_v), then min-max normalize to [0, 1].

    Constant input maps to all zeros (degenerate-range convention).
    """
    t_u, t_v = (int(n) for n in target)
    if t_u <= 0 or t_v <= 0:
        raise VoxError(f"target dims must be positive, got {target}")
    in_u, in_v = p.dims
    su = in_u / t_u
    sv = in_v / t_v
    xs = (np.arange(t_u) + 0.5) * su - 0.5
    ys = (np.arange(t_v) + 0.5) * sv - 0.5
    xx, yy = np.meshgrid(xs, ys)
    img = _sample_bilinear_clamped(p.data, xx, yy)
    lo, hi = float(img.min()), float(img.max())
    img = np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo)
    new_spacing = p.pixel_spacing * su
    return Projection((t_u, t_v), new_spacing, img, p.view_tag)


def _ncc(a: np.ndarray, b: np.ndarray) -> float:
    az = a - a.mean()
    bz = b - b.mean()
    denom = np.sqrt((az * az).sum() * (bz * bz).sum())
    if denom <= 0.0:
        return 0.0  # zero-variance overlap convention
    return float((az * bz).sum() / denom)


def _shift_scores(moving: np.ndarray, reference: np.ndarray, radius: int) -> np.ndarray:
    h, w = moving.shape
    scores = np.full((2 * radius + 1, 2 * radius + 1), -np.inf)
    for j, dy in enumerate(range(-radius, radius + 1)):
        for i, dx in enumerate(range(-radius, radius + 1)):
            # Overlap of moving shifted by (dx, dy) against reference.
            x0, x1 = max(0, dx), w + min(0, dx)
            y0, y1 = max(0, dy), h + min(0, dy)
            if x1 - x0 < 2 or y1 - y0 < 2:
                continue
            mov = moving[y0 - dy : y1 - dy, x0 - dx : x1 - dx]
            ref = reference[y0:y1, x0:x1]
            scores[j, i] = _ncc(mov, ref)
    return scores


def _parabolic_offset(cm: float, c0: float, cp: float) -> float:
    denom = cm - 2.0 * c0 + cp
    if denom >= 0.0:
        return 0.0  # not a local max; keep the integer peak
    off = 0.5 * (cm - cp) / denom
    return float(np.clip(off, -0.5, 0.5))


def register_to_reference(moving: Projection, reference: Projection,
                          search_radius: int) -> RigidShift2D:
    """Exhaustive integer NCC search over [-radius, radius]^2 plus quadratic
    sub-pixel refinement; ties break toward the smallest shift."""
    if moving.dims != reference.dims:
        raise VoxError(f"dims mismatch {moving.dims} vs {reference.dims}")
    radius = int(search_radius)
    if radius < 1:
        raise VoxError("search radius must be >= 1")
    scores = _shift_scores(moving.data, reference.data, radius)
    best = -np.inf
    best_shift = (0, 0)
    best_idx = (radius, radius)
    for j in range(scores.shape[0]):
        for i in range(scores.shape[1]):
            s = scores[j, i]
            dx, dy = i - radius, j - radius
            if s > best + 1e-12:
                take = True
            elif s > best - 1e-12:  # tie: smallest |dx|+|dy|, then dx, then dy
                take = (abs(dx) + abs(dy), dx, dy) < (
                    abs(best_shift[0]) + abs(best_shift[1]), best_shift[0], best_shift[1])
            else:
                take = False
            if take:
                best = s
                best_shift = (dx, dy)
                best_idx = (j, i)
    j, i = best_idx
    fx = fy = 0.0
    if np.isfinite(best):
        if 0 < i < scores.shape[1] - 1 and np.isfinite(scores[j, i - 1]) and np.isfinite(scores[j, i + 1]):
            fx = _parabolic_offset(scores[j, i - 1], scores[j, i], scores[j, i + 1])
        if 0 < j < scores.shape[0] - 1 and np.isfinite(scores[j - 1, i]) and np.isfinite(scores[j + 1, i]):
            fy = _parabolic_offset(scores[j - 1, i], scores[j, i], scores[j + 1, i])
    score = float(best) if np.isfinite(best) else 0.0
    return RigidShift2D(best_shift[0] + fx, best_shift[1] + fy, score)


def apply_shift(p: Projection, s: RigidShift2D) -> Projection:
    """Translate by (dx, dy) pixels with bilinear resampling, zero fill outside."""
    h, w = p.data.shape
    xx, yy = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    xs = xx - s.dx
    ys = yy - s.dy
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    out = np.zeros((h, w), dtype=np.float64)
    for oy, ox, wgt in (
        (0, 0, (1 - fx) * (1 - fy)),
        (0, 1, fx * (1 - fy)),
        (1, 0, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        xi = x0 + ox
        yi = y0 + oy
        ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        out[ok] += wgt[ok] * p.data[yi[ok], xi[ok]]
    return Projection(p.dims, p.pixel_spacing, out, p.view_tag)
