"""Core volumetric/planar data model, deterministic RNG, and binary file I/O.

Conventions fixed here and relied on everywhere else:
  - Volume.data is float64, shape (dx, dy, dz), indexed data[x, y, z].
    On disk the payload is float32 in row-major x-fastest order, i.e.
    flat index = x + dx*(y + dy*z), which is Fortran-order raveling of
    the (dx, dy, dz) array.
  - Projection.data is float64, shape (p_v, p_u), indexed data[v, u]
    (row = v, column = u, u fastest in memory).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

HU = "HU"
NORMALIZED_PM1 = "NORMALIZED_PM1"
NORMALIZED_01 = "NORMALIZED_01"
_DOMAIN_TAGS = (HU, NORMALIZED_PM1, NORMALIZED_01)

PA = "PA"
LATERAL = "LATERAL"

_VVOL_MAGIC = b"VVOL"
_VVOL_VERSION = 1


class VoxError(Exception):
    """Base error for this package."""


class VoxIOError(VoxError):
    """Malformed or truncated file."""


@dataclass
class Volume:
    """3D scalar voxel grid with physical spacing and intensity-domain tag."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    data: np.ndarray
    domain_tag: str = HU

    def __post_init__(self):
        self.dims = tuple(int(n) for n in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.dims) != 3 or any(n <= 0 for n in self.dims):
            raise VoxError(f"dims must be three positive ints, got {self.dims}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise VoxError(f"spacing must be strictly positive, got {self.spacing}")
        if self.domain_tag not in _DOMAIN_TAGS:
            raise VoxError(f"unknown domain tag {self.domain_tag!r}")
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape != self.dims:
            if self.data.size == int(np.prod(self.dims)):
                self.data = self.data.reshape(self.dims, order="F")
            else:
                raise VoxError(
                    f"data size {self.data.size} != prod(dims) {int(np.prod(self.dims))}"
                )

    @property
    def extent_mm(self) -> tuple[float, float, float]:
        return tuple(n * s for n, s in zip(self.dims, self.spacing))

    def copy(self, data: np.ndarray | None = None, domain_tag: str | None = None) -> "Volume":
        return Volume(
            self.dims,
            self.spacing,
            self.data.copy() if data is None else data,
            self.domain_tag if domain_tag is None else domain_tag,
        )

    def assert_domain(self, tag: str, what: str = "volume"):
        if self.domain_tag != tag:
            raise VoxError(f"{what} must be {tag}, got {self.domain_tag}")

    def check_range(self) -> bool:
        """Scan-assert the range implied by the domain tag."""
        if self.domain_tag == NORMALIZED_PM1:
            return bool(np.all(self.data >= -1.0) and np.all(self.data <= 1.0))
        if self.domain_tag == NORMALIZED_01:
            return bool(np.all(self.data >= 0.0) and np.all(self.data <= 1.0))
        return True


@dataclass
class Projection:
    """2D scalar detector image; data[v, u] with u horizontal, v vertical."""

    dims: tuple[int, int]  # (p_u, p_v)
    pixel_spacing: float
    data: np.ndarray
    view_tag: str = PA

    def __post_init__(self):
        self.dims = tuple(int(n) for n in self.dims)
        if len(self.dims) != 2 or any(n <= 0 for n in self.dims):
            raise VoxError(f"projection dims must be two positive ints, got {self.dims}")
        if self.pixel_spacing <= 0:
            raise VoxError("pixel_spacing must be positive")
        if self.view_tag not in (PA, LATERAL):
            raise VoxError(f"unknown view tag {self.view_tag!r}")
        self.data = np.asarray(self.data, dtype=np.float64)
        p_u, p_v = self.dims
        if self.data.shape != (p_v, p_u):
            if self.data.size == p_u * p_v:
                self.data = self.data.reshape((p_v, p_u))
            else:
                raise VoxError(f"data size {self.data.size} != {p_u * p_v}")
        if not np.all(np.isfinite(self.data)):
            raise VoxError("projection values must be finite")


@dataclass
class SeededRng:
    """Counter-based deterministic RNG stream (Philox under the hood).

    Identical (seed, stream_id) -> identical draw sequence on any platform.
    Distinct stream_ids give independent streams; derive per-task streams
    with ``split``.
    """

    seed: int
    stream_id: int = 0
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        key = np.array([self.seed & 0xFFFFFFFFFFFFFFFF, self.stream_id & 0xFFFFFFFFFFFFFFFF],
                       dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def split(self, stream_id: int) -> "SeededRng":
        return SeededRng(self.seed, stream_id)

    def normal(self, shape=()) -> np.ndarray:
        return self._gen.standard_normal(size=shape, dtype=np.float64)

    def uniform(self, lo: float = 0.0, hi: float = 1.0, shape=()) -> np.ndarray:
        return self._gen.uniform(lo, hi, size=shape)

    def integers(self, lo: int, hi: int, shape=()) -> np.ndarray:
        """Uniform ints in [lo, hi)."""
        return self._gen.integers(lo, hi, size=shape)


def stream_of(*parts) -> int:
    """Stable 64-bit stream id from a tuple of small ints/strings (FNV-1a)."""
    h = np.uint64(0xCBF29CE484222325)
    prime = np.uint64(0x100000001B3)
    for part in parts:
        data = part.encode() if isinstance(part, str) else int(part).to_bytes(8, "little", signed=False)
        for b in data:
            h = np.uint64((int(h) ^ b) * int(prime) & 0xFFFFFFFFFFFFFFFF)
    return int(h)


def volume_to_grid(v: Volume) -> np.ndarray:
    """Network-layout grid (D=z, H=y, W=x) from a volume."""
    return np.ascontiguousarray(v.data.transpose(2, 1, 0))


def grid_to_volume(grid: np.ndarray, spacing, domain_tag: str) -> Volume:
    """Inverse of volume_to_grid."""
    dims = (grid.shape[2], grid.shape[1], grid.shape[0])
    return Volume(dims, spacing, np.ascontiguousarray(grid.transpose(2, 1, 0)), domain_tag)


def volume_new(dims, spacing, fill: float = 0.0, domain_tag: str = HU) -> Volume:
    dims = tuple(int(n) for n in dims)
    if any(n <= 0 for n in dims):
        raise VoxError(f"dims must be positive, got {dims}")
    return Volume(dims, spacing, np.full(dims, float(fill), dtype=np.float64), domain_tag)


def gaussian_volume(rng: SeededRng, dims, spacing=(1.0, 1.0, 1.0),
                    domain_tag: str = HU) -> Volume:
    """Volume of i.i.d. standard-normal voxels, reproducible per stream."""
    dims = tuple(int(n) for n in dims)
    if any(n <= 0 for n in dims):
        raise VoxError(f"dims must be positive, got {dims}")
    return Volume(dims, spacing, rng.normal(dims), domain_tag)


def save_vvol(v: Volume, path) -> None:
    """Write the .vvol container (little-endian, f32 payload, x fastest)."""
    tag_index = _DOMAIN_TAGS.index(v.domain_tag)
    header = struct.pack(
        "<4sI3I3fB3x",
        _VVOL_MAGIC,
        _VVOL_VERSION,
        *v.dims,
        *(np.float32(s) for s in v.spacing),
        tag_index,
    )
    payload = v.data.astype(np.float32).ravel(order="F")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())


def load_vvol(path) -> Volume:
    """Read a .vvol file; promotes the f32 payload to f64."""
    with open(path, "rb") as fh:
        blob = fh.read()
    header_size = struct.calcsize("<4sI3I3fB3x")
    if len(blob) < header_size:
        raise VoxIOError(f"{path}: truncated header")
    magic, version, dx, dy, dz, sx, sy, sz, tag_index = struct.unpack(
        "<4sI3I3fB3x", blob[:header_size]
    )
    if magic != _VVOL_MAGIC:
        raise VoxIOError(f"{path}: bad magic {magic!r}")
    if version != _VVOL_VERSION:
        raise VoxIOError(f"{path}: unknown version {version}")
    if tag_index >= len(_DOMAIN_TAGS):
        raise VoxIOError(f"{path}: unknown domain tag index {tag_index}")
    count = dx * dy * dz
    payload = blob[header_size:]
    if len(payload) < 4 * count:
        raise VoxIOError(f"{path}: payload holds {len(payload) // 4} voxels, expected {count}")
    data = np.frombuffer(payload[: 4 * count], dtype="<f4").astype(np.float64)
    return Volume((dx, dy, dz), (sx, sy, sz), data.reshape((dx, dy, dz), order="F"),
                  _DOMAIN_TAGS[tag_index])


def _scale_u16(img: np.ndarray) -> np.ndarray:
    if np.any(np.isnan(img)):
        raise VoxError("image contains NaN")
    lo = float(img.min())
    hi = float(img.max())
    if hi <= lo:
        return np.zeros(img.shape, dtype=np.uint16)  # degenerate range maps to 0
    scaled = np.rint((img - lo) / (hi - lo) * 65535.0)
    return scaled.astype(np.uint16)


def save_pgm16(p: Projection, path) -> None:
    """Binary 16-bit PGM (P5, maxval 65535), min-max scaled over the image."""
    pixels = _scale_u16(p.data)
    p_u, p_v = p.dims
    with open(path, "wb") as fh:
        fh.write(f"P5\n{p_u} {p_v}\n65535\n".encode("ascii"))
        fh.write(pixels.astype(">u2").tobytes())  # PGM 16-bit is big-endian


def load_pgm16(path, pixel_spacing: float = 1.0, view_tag: str = PA) -> Projection:
    """Read a binary 16-bit PGM back to a [0, 1]-valued Projection."""
    with open(path, "rb") as fh:
        blob = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    if fields[0] != b"P5":
        raise VoxIOError(f"{path}: not a binary PGM")
    width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 65535:
        raise VoxIOError(f"{path}: expected maxval 65535, got {maxval}")
    count = width * height
    raw = blob[pos : pos + 2 * count]
    if len(raw) < 2 * count:
        raise VoxIOError(f"{path}: truncated pixel data")
    img = np.frombuffer(raw, dtype=">u2").astype(np.float64).reshape((height, width))
    return Projection((width, height), pixel_spacing, img / 65535.0, view_tag)
