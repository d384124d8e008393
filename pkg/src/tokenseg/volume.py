"""Volumes, masks, TSV3 file I/O, intensity normalization and synthetic phantoms.

Voxel layout is row-major with W fastest, i.e. a C-ordered ``(D, H, W)`` array.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"TSV3"
VERSION = 1
DTYPE_VOLUME = 0
DTYPE_MASK = 1
# magic | version u16 | dtype u8 | reserved u8 | D,H,W u32 | spacing 3 x f32
_HEADER = struct.Struct("<4sHBB3I3f")
HEADER_SIZE = _HEADER.size


class FormatError(ValueError):
    """Raised when a TSV3 file is malformed."""


@dataclass
class Volume3D:
    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ValueError(f"volume must be 3D with positive dims, got {self.voxels.shape}")
        if not np.all(np.isfinite(self.voxels)):
            raise ValueError("volume contains non-finite intensities")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)


@dataclass
class MaskVolume:
    labels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3 or min(labels.shape) < 1:
            raise ValueError(f"mask must be 3D with positive dims, got {labels.shape}")
        if not np.isin(labels, (0, 1)).all():
            raise ValueError("mask labels must be 0 or 1")
        self.labels = labels.astype(np.uint8)
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)


@dataclass
class Blob:
    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    intensity: float = 1.0


@dataclass
class PhantomSpec:
    dims: tuple[int, int, int]
    blobs: list[Blob] = field(default_factory=list)
    background: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 0

    def validate(self):
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"bad phantom dims {self.dims}")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")
        for b in self.blobs:
            if min(b.radii) <= 0:
                raise ValueError(f"blob radii must be positive, got {b.radii}")
            if not all(0 <= c < n for c, n in zip(b.center, self.dims)):
                raise ValueError(f"blob center {b.center} outside dims {self.dims}")


# -- file I/O ---------------------------------------------------------------


def _write(path, dtype_code, array, spacing):
    path = Path(path)
    d, h, w = array.shape
    header = _HEADER.pack(MAGIC, VERSION, dtype_code, 0, d, h, w, *spacing)
    try:
        with open(path, "wb") as f:
            f.write(header)
            f.write(np.ascontiguousarray(array).tobytes())
    except OSError as e:
        raise OSError(f"cannot write {path}: {e}") from e


def save_volume(v: Volume3D, path):
    _write(path, DTYPE_VOLUME, v.voxels.astype("<f4"), v.spacing)


def save_mask(m: MaskVolume, path):
    _write(path, DTYPE_MASK, m.labels.astype(np.uint8), m.spacing)


def read_tsv3(path):
    """Parse a TSV3 file, returning ``(dtype_code, array, spacing)``."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such volume file: {path}")
    raw = path.read_bytes()
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, dtype_code, _reserved, d, h, w, *spacing = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dtype_code not in (DTYPE_VOLUME, DTYPE_MASK):
        raise FormatError(f"{path}: unknown dtype code {dtype_code}")
    if min(d, h, w) < 1:
        raise FormatError(f"{path}: non-positive dims {(d, h, w)}")
    itemsize = 4 if dtype_code == DTYPE_VOLUME else 1
    expected = d * h * w * itemsize
    payload = raw[HEADER_SIZE:]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, dims {(d, h, w)} need {expected}"
        )
    if dtype_code == DTYPE_VOLUME:
        arr = np.frombuffer(payload, dtype="<f4").reshape(d, h, w).astype(np.float32)
        bad = np.flatnonzero(~np.isfinite(arr))
        if bad.size:
            offset = HEADER_SIZE + int(bad[0]) * itemsize
            raise FormatError(f"{path}: non-finite voxel at byte offset {offset}")
    else:
        arr = np.frombuffer(payload, dtype=np.uint8).reshape(d, h, w).copy()
        bad = np.flatnonzero(arr > 1)
        if bad.size:
            raise FormatError(f"{path}: mask label {arr.flat[bad[0]]} at byte offset "
                              f"{HEADER_SIZE + int(bad[0])}")
    return dtype_code, arr, tuple(float(s) for s in spacing)


def load_volume(path) -> Volume3D:
    code, arr, spacing = read_tsv3(path)
    if code != DTYPE_VOLUME:
        raise FormatError(f"{path}: expected a volume (dtype 0), found mask")
    return Volume3D(arr, spacing)


def load_mask(path) -> MaskVolume:
    code, arr, spacing = read_tsv3(path)
    if code != DTYPE_MASK:
        raise FormatError(f"{path}: expected a mask (dtype 1), found volume")
    return MaskVolume(arr, spacing)


# -- preprocessing ----------------------------------------------------------


def normalize_intensity(v: Volume3D) -> tuple[Volume3D, bool]:
    """Min-max rescale to [0, 1].

    Returns the normalized volume and a flag that is True when the input was
    constant (the output is then all zeros).
    """
    x = v.voxels.astype(np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return Volume3D(np.zeros_like(x), v.spacing), True
    out = (x - lo) / (hi - lo)
    # pin the endpoints; rounding in the division can miss 1.0 by an ulp
    out[x == hi] = 1.0
    return Volume3D(out, v.spacing), False


# -- phantoms ---------------------------------------------------------------


def ellipsoid_mask(dims, center, radii) -> np.ndarray:
    d, h, w = np.ogrid[: dims[0], : dims[1], : dims[2]]
    r = ((d - center[0]) / radii[0]) ** 2 + ((h - center[1]) / radii[1]) ** 2 \
        + ((w - center[2]) / radii[2]) ** 2
    return r <= 1.0


def generate_phantom(spec: PhantomSpec) -> tuple[Volume3D, MaskVolume]:
    spec.validate()
    dims = tuple(int(n) for n in spec.dims)
    labels = np.zeros(dims, dtype=bool)
    img = np.full(dims, float(spec.background))
    for blob in spec.blobs:
        inside = ellipsoid_mask(dims, blob.center, blob.radii)
        labels |= inside
        img[inside] += blob.intensity
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        noise = rng.normal(0.0, spec.noise_sigma, size=dims)
        img += np.clip(noise, -6 * spec.noise_sigma, 6 * spec.noise_sigma)
    return Volume3D(img), MaskVolume(labels.astype(np.uint8))


def random_phantom_spec(dims, seed, n_blobs=(1, 2), radius_range=(5.0, 9.0),
                        noise_sigma=0.1) -> PhantomSpec:
    """Draw a phantom with ``n_blobs`` ellipsoids kept clear of the borders."""
    rng = np.random.default_rng(seed)
    count = int(rng.integers(n_blobs[0], n_blobs[1] + 1))
    blobs = []
    for _ in range(count):
        radii = tuple(float(r) for r in rng.uniform(*radius_range, size=3))
        center = tuple(
            float(rng.uniform(min(r + 1, n / 2), max(n - r - 2, n / 2)))
            for r, n in zip(radii, dims)
        )
        blobs.append(Blob(center, radii, float(rng.uniform(0.6, 1.0))))
    return PhantomSpec(tuple(dims), blobs, background=0.0,
                       noise_sigma=noise_sigma, seed=int(seed))


def sphere_phantom_spec(dims, seed, radius_range=(6.0, 9.0), noise_sigma=0.1) -> PhantomSpec:
    """One sphere with a jittered center and radius."""
    rng = np.random.default_rng(seed)
    r = float(rng.uniform(*radius_range))
    center = tuple(float(n / 2 + rng.uniform(-2, 2)) for n in dims)
    return PhantomSpec(tuple(dims), [Blob(center, (r, r, r), 1.0)], background=0.0,
                       noise_sigma=noise_sigma, seed=int(seed))
