"""Classic (thresholded) trabecular micro-structural parameters.

All functions take a :class:`~spongiosa.volcore.DensityVolume` or a plain
array of densities in mg/cm³. Plain arrays use the default voxel size.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .volcore import DEFAULT_VOXEL_SIZE_UM, CalibrationRange, DensityVolume, denormalize_array

DEFAULT_THRESHOLD = 225.0

AXIS_DIRECTIONS = ((1, 0, 0), (0, 1, 0), (0, 0, 1))
DIAGONAL_DIRECTIONS = ((1, 1, 1), (1, 1, -1), (1, -1, 1), (-1, 1, 1))
MIL_DIRECTIONS = AXIS_DIRECTIONS + DIAGONAL_DIRECTIONS

PARAM_NAMES = ("bmd", "bmd_sd", "bvtv", "tmd", "mil", "tb_sp", "tb_th")
PARAM_UNITS = ("mg/cm3", "mg/cm3", "ratio", "mg/cm3", "mm", "mm", "um")


class EmptySegmentationError(ValueError):
    """No voxel reaches the threshold."""


class NoStructureError(ValueError):
    """Test lines found no bone segment in any direction."""


def _values(volume):
    if isinstance(volume, DensityVolume):
        return volume.values, volume.voxel_size
    return np.asarray(volume), DEFAULT_VOXEL_SIZE_UM


def _nonempty(x):
    if x.size == 0:
        raise ValueError("empty volume")


def bmd(volume) -> float:
    x, _ = _values(volume)
    _nonempty(x)
    return float(np.mean(x, dtype=np.float64))


def bmd_sd(volume) -> float:
    x, _ = _values(volume)
    if x.size < 2:
        raise ValueError("bmd_sd needs at least two voxels")
    return float(np.std(x, dtype=np.float64, ddof=1))


def segment(volume, t: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Binarize with H(0) = 1: voxels at exactly ``t`` count as bone."""
    x, _ = _values(volume)
    return x >= t


def bvtv(volume, t: float = DEFAULT_THRESHOLD) -> float:
    x, _ = _values(volume)
    _nonempty(x)
    return float(np.count_nonzero(x >= t) / x.size)


def tmd(volume, t: float = DEFAULT_THRESHOLD) -> float:
    x, _ = _values(volume)
    _nonempty(x)
    bone = x >= t
    if not bone.any():
        raise EmptySegmentationError(f"empty segmentation: no voxel >= {t} mg/cm3")
    return float(np.mean(x[bone], dtype=np.float64))


def _count_segments(bone: np.ndarray, direction) -> int:
    """Maximal runs of bone along all lines parallel to ``direction``.

    A bone voxel starts a run when its predecessor ``p - direction`` is
    marrow or lies outside the box.
    """
    prev = np.zeros_like(bone)
    src, dst = [], []
    for d, n in zip(direction, bone.shape):
        if d > 0:
            src.append(slice(0, n - d))
            dst.append(slice(d, n))
        elif d < 0:
            src.append(slice(-d, n))
            dst.append(slice(0, n + d))
        else:
            src.append(slice(None))
            dst.append(slice(None))
    prev[tuple(dst)] = bone[tuple(src)]
    return int(np.count_nonzero(bone & ~prev))


def mil_directional(volume, t: float = DEFAULT_THRESHOLD, direction=(0, 0, 1)) -> float:
    """Total test-line length over bone-segment count along one direction, in mm.

    Returns ``inf`` when no segment is hit.
    """
    x, voxel_size = _values(volume)
    _nonempty(x)
    bone = x >= t
    segments = _count_segments(bone, direction)
    length = x.size * math.sqrt(sum(d * d for d in direction)) * voxel_size / 1000.0
    return length / segments if segments else math.inf


def mil(volume, t: float = DEFAULT_THRESHOLD, directions=MIL_DIRECTIONS) -> float:
    """Direction-averaged mean intercept length in mm.

    Segment densities (segments per mm of test line) are averaged over the
    direction set and the result is ``1 / (2 * mean density)``. For isotropic
    structure this is the stereological ``2 / (BS/TV)``; for a single plate
    spanning the box it approximates the box extent along the plate normal.
    """
    x, voxel_size = _values(volume)
    _nonempty(x)
    if len(directions) == 0:
        raise ValueError("direction set is empty")
    bone = x >= t
    densities = []
    for direction in directions:
        length = x.size * math.sqrt(sum(d * d for d in direction)) * voxel_size / 1000.0
        densities.append(_count_segments(bone, direction) / length)
    mean_density = float(np.mean(densities))
    if mean_density == 0.0:
        raise NoStructureError("no structure: zero bone intersections in every direction")
    return 1.0 / (2.0 * mean_density)


def plate_model(mil_mm: float, bvtv_ratio: float) -> tuple[float, float]:
    """Parallel-plate thickness (µm) and separation (mm) from MIL and BV/TV."""
    if mil_mm < 0:
        raise ValueError("mil must be non-negative")
    if not 0.0 <= bvtv_ratio <= 1.0:
        raise ValueError("bvtv must lie in [0, 1]")
    tb_th_mm = mil_mm * bvtv_ratio
    return tb_th_mm * 1000.0, mil_mm - tb_th_mm


@dataclass(frozen=True)
class ParamVector:
    """The seven classic parameters. Undefined entries are ``None``."""

    bmd: float
    bmd_sd: float
    bvtv: float
    tmd: Optional[float]
    mil: Optional[float]
    tb_sp: Optional[float]
    tb_th: Optional[float]

    def as_array(self) -> np.ndarray:
        return np.array([np.nan if v is None else v for v in self.as_tuple()], dtype=np.float64)

    def as_tuple(self) -> tuple:
        return tuple(getattr(self, f.name) for f in fields(self))

    @classmethod
    def from_array(cls, row) -> "ParamVector":
        return cls(*[None if not np.isfinite(v) else float(v) for v in row])


def compute_all(volume, t: float = DEFAULT_THRESHOLD, directions=MIL_DIRECTIONS) -> ParamVector:
    x, voxel_size = _values(volume)
    if x.size < 2:
        raise ValueError("compute_all needs at least two voxels")
    bone = x >= t
    n_bone = int(np.count_nonzero(bone))
    ratio = n_bone / x.size
    tissue = float(np.mean(x[bone], dtype=np.float64)) if n_bone else None
    try:
        mil_mm = mil(DensityVolume(x, voxel_size), t, directions)
    except NoStructureError:
        mil_mm = None
    if mil_mm is None:
        tb_th = tb_sp = None
    else:
        tb_th, tb_sp = plate_model(mil_mm, ratio)
    return ParamVector(bmd(x), bmd_sd(x), ratio, tissue, mil_mm, tb_sp, tb_th)


class MorphometryTransformer(TransformerMixin, BaseEstimator):
    """Map a batch of cubic volumes ``(n, s, s, s)`` to an ``(n, 7)`` parameter matrix.

    Columns follow :data:`PARAM_NAMES`; undefined values (empty segmentation,
    no structure) are NaN. With ``input_space="normalized"`` the batch is
    denormalized with the calibration range first.
    """

    def __init__(self, threshold=DEFAULT_THRESHOLD, voxel_size=DEFAULT_VOXEL_SIZE_UM,
                 input_space="density", lo=-350.0, hi=1100.0):
        self.threshold = threshold
        self.voxel_size = voxel_size
        self.input_space = input_space
        self.lo = lo
        self.hi = hi

    def fit(self, X=None, y=None):
        if self.input_space not in ("density", "normalized"):
            raise ValueError(f"input_space must be 'density' or 'normalized', got {self.input_space!r}")
        self.n_features_out_ = len(PARAM_NAMES)
        return self

    def transform(self, X):
        self.fit()
        X = np.asarray(X)
        if X.ndim == 3:
            X = X[None]
        if X.ndim != 4:
            raise ValueError(f"expected (n, nx, ny, nz) volumes, got shape {X.shape}")
        if self.input_space == "normalized":
            X = denormalize_array(X, CalibrationRange(self.lo, self.hi))
        rows = [
            compute_all(DensityVolume(v, self.voxel_size), self.threshold).as_array()
            for v in X
        ]
        return np.vstack(rows)

    def get_feature_names_out(self, input_features=None):
        return np.array(PARAM_NAMES, dtype=object)


def write_param_csv(path, rows, threshold: float = DEFAULT_THRESHOLD, labels=None) -> None:
    """CSV with a units/threshold comment line, then a fixed-order header."""
    rows = [r.as_array() if isinstance(r, ParamVector) else np.asarray(r, dtype=float) for r in rows]
    with open(path, "w", newline="") as fh:
        fh.write(f"# threshold={threshold:g} mg/cm3; units: "
                 + ", ".join(f"{n}[{u}]" for n, u in zip(PARAM_NAMES, PARAM_UNITS)) + "\n")
        writer = csv.writer(fh)
        writer.writerow((["source"] if labels is not None else []) + list(PARAM_NAMES))
        for i, row in enumerate(rows):
            cells = ["" if not np.isfinite(v) else repr(float(v)) for v in row]
            writer.writerow(([labels[i]] if labels is not None else []) + cells)


def read_param_csv(path):
    """Return ``(labels or None, (n, 7) array)`` from :func:`write_param_csv` output."""
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    has_labels = header[0] == "source"
    labels, data = [], []
    for row in reader:
        if has_labels:
            labels.append(row[0])
            row = row[1:]
        data.append([float(c) if c else np.nan for c in row])
    return (labels if has_labels else None), np.array(data, dtype=np.float64).reshape(-1, len(PARAM_NAMES))
