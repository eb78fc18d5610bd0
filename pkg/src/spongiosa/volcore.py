"""Density volumes, calibration-aware normalization and the SVOL file format.

Arrays are indexed ``[x, y, z]`` in memory. On disk the voxels are written
with x varying fastest and z slowest (Fortran order of the in-memory array).
z is the vertical axis throughout the package.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

DEFAULT_VOXEL_SIZE_UM = 164.0
DEFAULT_LO = -350.0
DEFAULT_HI = 1100.0

SVOL_MAGIC = b"SVOL"
SVOL_VERSION = 1
SVOL_DTYPE_F32 = 1
# magic, version u16, dtype u16, nx ny nz u32, voxel size f32, lo f32, hi f32
_SVOL_HEADER = struct.Struct("<4sHHIIIfff")


class SvolFormatError(ValueError):
    """Raised for malformed or truncated SVOL files."""


@dataclass(frozen=True)
class CalibrationRange:
    lo: float = DEFAULT_LO
    hi: float = DEFAULT_HI

    def __post_init__(self):
        if not (np.isfinite(self.lo) and np.isfinite(self.hi)) or self.lo >= self.hi:
            raise ValueError(f"invalid calibration range [{self.lo}, {self.hi}]")

    @property
    def span(self) -> float:
        return self.hi - self.lo


@dataclass(frozen=True)
class DensityVolume:
    """Calibrated density grid in mg/cm³ with isotropic voxels (µm)."""

    values: np.ndarray
    voxel_size: float = DEFAULT_VOXEL_SIZE_UM
    calibration: CalibrationRange = field(default_factory=CalibrationRange)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 3 or min(values.shape) < 1:
            raise ValueError(f"volume must be 3-D with positive dims, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("volume contains non-finite voxels")
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.values.shape)

    @property
    def voxel_size_mm(self) -> float:
        return self.voxel_size / 1000.0

    def __eq__(self, other):
        if not isinstance(other, DensityVolume):
            return NotImplemented
        return (
            self.voxel_size == other.voxel_size
            and self.calibration == other.calibration
            and self.values.shape == other.values.shape
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


@dataclass(frozen=True)
class NormalizedPatch:
    """Cubic patch in [-1, 1]; ``provenance`` is real, generated or augmented."""

    values: np.ndarray
    provenance: str = "real"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 3 or len(set(values.shape)) != 1:
            raise ValueError(f"patch must be cubic, got shape {values.shape}")
        if values.size and (values.min() < -1.0 or values.max() > 1.0):
            raise ValueError("normalized patch values must lie in [-1, 1]")
        if self.provenance not in ("real", "generated", "augmented"):
            raise ValueError(f"unknown provenance {self.provenance!r}")
        object.__setattr__(self, "values", values)

    @property
    def size(self) -> int:
        return self.values.shape[0]


def _as_array(volume):
    return volume.values if isinstance(volume, DensityVolume) else np.asarray(volume)


def normalize_array(values, calibration: CalibrationRange = CalibrationRange()):
    """Map densities to [-1, 1]; returns ``(normalized, clamp_fraction)``."""
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("cannot normalize non-finite voxels")
    outside = np.count_nonzero((values < calibration.lo) | (values > calibration.hi))
    scaled = 2.0 * (values - calibration.lo) / calibration.span - 1.0
    np.clip(scaled, -1.0, 1.0, out=scaled)
    clamp_fraction = outside / values.size if values.size else 0.0
    return scaled.astype(np.float32), float(clamp_fraction)


def denormalize_array(values, calibration: CalibrationRange = CalibrationRange()):
    values = np.asarray(values, dtype=np.float64)
    if values.size and (not np.all(np.isfinite(values)) or values.min() < -1.0 or values.max() > 1.0):
        raise ValueError("normalized values must be finite and lie in [-1, 1]")
    return (values + 1.0) * 0.5 * calibration.span + calibration.lo


def normalize(volume: DensityVolume, calibration: CalibrationRange | None = None):
    """Normalize a volume; returns ``(values in [-1, 1], clamp_fraction)``."""
    calibration = calibration or volume.calibration
    return normalize_array(volume.values, calibration)


def denormalize(patch, calibration: CalibrationRange = CalibrationRange(),
                voxel_size: float = DEFAULT_VOXEL_SIZE_UM) -> DensityVolume:
    values = patch.values if isinstance(patch, NormalizedPatch) else patch
    dens = denormalize_array(values, calibration)
    return DensityVolume(dens.astype(np.float32), voxel_size, calibration)


class DensityNormalizer(TransformerMixin, BaseEstimator):
    """Stateless transformer between calibrated densities and [-1, 1].

    Works on arrays of any shape. ``clamp_fraction_`` holds the fraction of
    voxels clamped during the last ``transform`` call.
    """

    def __init__(self, lo=DEFAULT_LO, hi=DEFAULT_HI):
        self.lo = lo
        self.hi = hi

    def fit(self, X=None, y=None):
        self.calibration_ = CalibrationRange(self.lo, self.hi)
        return self

    def transform(self, X):
        if not hasattr(self, "calibration_"):
            self.fit()
        out, self.clamp_fraction_ = normalize_array(X, self.calibration_)
        return out

    def inverse_transform(self, X):
        if not hasattr(self, "calibration_"):
            self.fit()
        return denormalize_array(X, self.calibration_)


def crop_patch(volume: DensityVolume, origin, size: int) -> DensityVolume:
    origin = tuple(int(o) for o in origin)
    if len(origin) != 3:
        raise ValueError("origin must be a voxel index triple")
    if size < 1:
        raise ValueError("size must be positive")
    for axis, (o, n) in enumerate(zip(origin, volume.dims)):
        if o < 0 or o + size > n:
            raise IndexError(
                f"patch out of bounds on axis {'xyz'[axis]}: origin {o} + size {size} > {n}"
            )
    x, y, z = origin
    sub = volume.values[x:x + size, y:y + size, z:z + size].copy()
    return DensityVolume(sub, volume.voxel_size, volume.calibration)


def write_svol(volume: DensityVolume, path) -> None:
    nx, ny, nz = volume.dims
    header = _SVOL_HEADER.pack(
        SVOL_MAGIC, SVOL_VERSION, SVOL_DTYPE_F32, nx, ny, nz,
        volume.voxel_size, volume.calibration.lo, volume.calibration.hi,
    )
    payload = np.asarray(volume.values, dtype="<f4").ravel(order="F").tobytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(payload)
    tmp.replace(path)


def read_svol(path) -> DensityVolume:
    data = Path(path).read_bytes()
    if len(data) < _SVOL_HEADER.size:
        raise SvolFormatError(f"{path}: truncated header")
    magic, version, dtype, nx, ny, nz, voxel, lo, hi = _SVOL_HEADER.unpack_from(data)
    if magic != SVOL_MAGIC:
        raise SvolFormatError(f"{path}: bad magic {magic!r}")
    if version != SVOL_VERSION:
        raise SvolFormatError(f"{path}: unsupported version {version}")
    if dtype != SVOL_DTYPE_F32:
        raise SvolFormatError(f"{path}: unsupported dtype code {dtype}")
    expected = nx * ny * nz * 4
    payload = data[_SVOL_HEADER.size:]
    if len(payload) < expected:
        raise SvolFormatError(
            f"{path}: truncated payload, header dims ({nx},{ny},{nz}) need {nx * ny * nz} "
            f"floats, found {len(payload) // 4}"
        )
    if len(payload) > expected:
        raise SvolFormatError(f"{path}: payload larger than header dims ({nx},{ny},{nz})")
    values = np.frombuffer(payload, dtype="<f4").reshape((nx, ny, nz), order="F")
    return DensityVolume(values.astype(np.float32), float(voxel), CalibrationRange(float(lo), float(hi)))
