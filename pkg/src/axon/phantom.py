"""Procedural thorax-like phantoms and paired (CT, radiograph) datasets.

Four piecewise-constant materials: air background, soft-tissue body
ellipsoid, two lung ellipsoids, and rib arcs (torus segments around the
body axis). Geometry is jittered per seed so samples differ while staying
analytically known.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import projector as prj
from .voxcore import (
    HU,
    SeededRng,
    Volume,
    VoxError,
    save_pgm16,
    save_vvol,
    stream_of,
)


@dataclass
class PhantomSpec:
    dims: tuple[int, int, int] = (32, 32, 32)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    body_axes: tuple[float, float, float] | None = None  # mm; default from dims
    lung_axes: tuple[float, float, float] | None = None
    rib_count: int = 4
    rib_radius: float | None = None  # mm tube radius
    hu_body: float = 40.0
    hu_lung: float = -800.0
    hu_bone: float = 700.0
    hu_air: float = -1000.0
    jitter: float = 0.0  # fractional perturbation of centers/axes
    seed: int = 0

    def __post_init__(self):
        ext = np.array(self.dims, float) * np.array(self.spacing, float)
        if self.body_axes is None:
            self.body_axes = tuple(0.42 * ext)
        if self.lung_axes is None:
            self.lung_axes = (0.16 * ext[0], 0.26 * ext[1], 0.30 * ext[2])
        if self.rib_radius is None:
            self.rib_radius = 0.035 * float(ext.min())
        for hu in (self.hu_body, self.hu_lung, self.hu_bone, self.hu_air):
            if not -1000.0 <= hu <= 3000.0:
                raise VoxError(f"HU value {hu} outside [-1000, 3000]")


def _ellipsoid_mask(xx, yy, zz, center, axes):
    return ((xx - center[0]) / axes[0]) ** 2 + ((yy - center[1]) / axes[1]) ** 2 + (
        (zz - center[2]) / axes[2]) ** 2 <= 1.0


def _jitter_vec(rng: SeededRng, scale, magnitude: float):
    return np.asarray(scale, float) * magnitude * rng.uniform(-1.0, 1.0, 3)


def generate_phantom(spec: PhantomSpec, rng: SeededRng | None = None) -> Volume:
    """Deterministic HU phantom for (spec, seed)."""
    if rng is None:
        rng = SeededRng(spec.seed, stream_of("phantom"))
    ext = np.array(spec.dims, float) * np.array(spec.spacing, float)
    center = ext / 2.0

    body_axes = np.array(spec.body_axes, float)
    lung_axes = np.array(spec.lung_axes, float)
    body_center = center + _jitter_vec(rng, ext, 0.02 * spec.jitter)
    body_axes = body_axes * (1.0 + spec.jitter * 0.15 * rng.uniform(-1.0, 1.0, 3))
    lung_offset = np.array([0.45 * body_axes[0], 0.0, 0.0])
    lung_centers = []
    lung_axes_used = []
    for sign in (-1.0, 1.0):
        c = body_center + sign * lung_offset + _jitter_vec(rng, ext, 0.03 * spec.jitter)
        a = lung_axes * (1.0 + spec.jitter * 0.2 * rng.uniform(-1.0, 1.0, 3))
        lung_centers.append(c)
        lung_axes_used.append(a)

    # containment: lung surface samples must satisfy the body inequality
    dirs = np.array([[i, j, k] for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)
                     if (i, j, k) != (0, 0, 0)], float)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    for c, a in zip(lung_centers, lung_axes_used):
        surface = c[None, :] + dirs * a[None, :]
        q = (((surface - body_center) / body_axes) ** 2).sum(axis=1)
        if np.any(q > 1.0):
            raise VoxError("lung ellipsoid not contained in body")

    coords = [(np.arange(n) + 0.5) * s for n, s in zip(spec.dims, spec.spacing)]
    xx, yy, zz = np.meshgrid(*coords, indexing="ij")

    data = np.full(spec.dims, float(spec.hu_air))
    data[_ellipsoid_mask(xx, yy, zz, body_center, body_axes)] = spec.hu_body

    # rib arcs: torus segments in planes of constant z around the body axis
    ring_r = 0.92 * float(np.sqrt(body_axes[0] * body_axes[1]))
    zs = body_center[2] + np.linspace(-0.55, 0.55, spec.rib_count) * body_axes[2]
    zs = zs + spec.jitter * 0.02 * ext[2] * rng.uniform(-1.0, 1.0, spec.rib_count)
    rho = np.sqrt((xx - body_center[0]) ** 2 + (yy - body_center[1]) ** 2)
    phi = np.arctan2(yy - body_center[1], xx - body_center[0])
    arc = np.abs(phi) <= np.deg2rad(150.0)  # open toward the spine side
    for z_k in zs:
        dist2 = (rho - ring_r) ** 2 + (zz - z_k) ** 2
        data[(dist2 <= spec.rib_radius**2) & arc] = spec.hu_bone

    for c, a in zip(lung_centers, lung_axes_used):
        data[_ellipsoid_mask(xx, yy, zz, c, a)] = spec.hu_lung

    return Volume(spec.dims, spec.spacing, data, HU)


def split_of(sample_id: str, n_total: int, rank_table: dict[str, int]) -> str:
    rank = rank_table[sample_id]
    n_train = int(round(0.8 * n_total))
    n_val = int(round(0.1 * n_total))
    if rank < n_train:
        return "train"
    if rank < n_train + n_val:
        return "val"
    return "test"


def _hash_ranks(ids) -> dict[str, int]:
    """Rank ids by sha256 so split proportions are exact and order-free."""
    keyed = sorted(ids, key=lambda s: hashlib.sha256(s.encode()).hexdigest())
    return {sid: i for i, sid in enumerate(keyed)}


@dataclass
class DatasetManifest:
    records: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(json.dumps({"manifest_config": self.config}) + "\n")
            for rec in self.records:
                fh.write(json.dumps(rec) + "\n")

    @staticmethod
    def load(path) -> "DatasetManifest":
        records = []
        config = {}
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                obj = json.loads(line)
                if "manifest_config" in obj:
                    config = obj["manifest_config"]
                else:
                    records.append(obj)
        return DatasetManifest(records, config)

    def by_split(self, split: str) -> list[dict]:
        return [r for r in self.records if r["split"] == split]


def generate_dataset(spec: PhantomSpec, n: int, out_dir, sid_mm: float | None = None,
                     pixels: int = 64, bi_planar: bool = True,
                     noise_sigma: float = 0.0) -> DatasetManifest:
    """n phantoms rendered to PA (+ optional LATERAL) radiographs.

    Regeneration with the same spec produces byte-identical files; the
    manifest records everything needed to re-render each projection.
    """
    if n < 1:
        raise VoxError("need n >= 1 samples")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ext = np.array(spec.dims, float) * np.array(spec.spacing, float)
    if sid_mm is None:
        sid_mm = 4.0 * float(ext.max())

    ids = [f"ph{idx:04d}" for idx in range(n)]
    ranks = _hash_ranks(ids)
    manifest = DatasetManifest(config={
        "n": n,
        "dims": list(spec.dims),
        "spacing": list(spec.spacing),
        "seed": spec.seed,
        "jitter": spec.jitter,
        "sid_mm": sid_mm,
        "pixels": pixels,
        "bi_planar": bi_planar,
        "noise_sigma": noise_sigma,
    })
    for idx, sample_id in enumerate(ids):
        sample_seed = spec.seed + idx
        sample_spec = PhantomSpec(
            dims=spec.dims, spacing=spec.spacing, rib_count=spec.rib_count,
            hu_body=spec.hu_body, hu_lung=spec.hu_lung, hu_bone=spec.hu_bone,
            hu_air=spec.hu_air, jitter=spec.jitter, seed=sample_seed)
        vol = generate_phantom(sample_spec)
        av = prj.hu_to_attenuation(vol)
        pa_cam, lat_cam = prj.default_geometries(vol, sid_mm, pixels=(pixels, pixels))

        vvol_path = out / f"{sample_id}.vvol"
        pa_path = out / f"{sample_id}_pa.pgm"
        save_vvol(vol, vvol_path)
        noise_rng = SeededRng(sample_seed, stream_of("drr-noise", 0))
        pa = prj.render_drr(av, pa_cam, noise_sigma=noise_sigma,
                            rng=noise_rng if noise_sigma > 0 else None)
        save_pgm16(pa, pa_path)
        rec = {
            "id": sample_id,
            "seed": sample_seed,
            "vvol_path": vvol_path.name,
            "pa_path": pa_path.name,
            "lateral_path": None,
            "split": split_of(sample_id, n, ranks),
        }
        if bi_planar:
            lat_path = out / f"{sample_id}_lat.pgm"
            lat_rng = SeededRng(sample_seed, stream_of("drr-noise", 1))
            lat = prj.render_drr(av, lat_cam, noise_sigma=noise_sigma,
                                 rng=lat_rng if noise_sigma > 0 else None)
            save_pgm16(lat, lat_path)
            rec["lateral_path"] = lat_path.name
        manifest.records.append(rec)
    manifest.save(out / "manifest.jsonl")
    return manifest
