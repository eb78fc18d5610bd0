"""Patch extraction, the 16-element augmentation group, phantoms and corpora.

Augmentation element ``k`` (0 ≤ k < 16) is applied to an ``[x, y, z]`` array
as follows, in this order:

1. reflect x when ``(k % 8) // 4 == 1``;
2. rotate by ``k % 4`` quarter turns in the x-y plane (``np.rot90`` on axes 0, 1);
3. flip z when ``k // 8 == 1``.

Element 0 is the identity. z stays vertical under every element.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin

from .volcore import (
    DEFAULT_VOXEL_SIZE_UM,
    CalibrationRange,
    DensityVolume,
    normalize_array,
    read_svol,
    write_svol,
)

N_AUGMENT = 16
MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


@dataclass
class PatchSpec:
    size: int = 32
    stride: int = 8
    mask: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.size <= 0 or self.stride <= 0:
            raise ValueError("size and stride must be positive")
        if self.stride > self.size:
            raise ValueError("stride must not exceed size")


def grid_positions(shape, size: int, stride: int):
    if any(n < size for n in shape):
        raise ValueError(f"volume {tuple(shape)} is smaller than patch size {size}")
    axes = [range(0, n - size + 1, stride) for n in shape]
    return [(x, y, z) for x in axes[0] for y in axes[1] for z in axes[2]]


def extract_patches(volume, spec: PatchSpec = PatchSpec()):
    """All grid patches; with a mask only those lying fully inside it.

    Returns ``(patches (n, s, s, s), positions)``.
    """
    values = volume.values if isinstance(volume, DensityVolume) else np.asarray(volume)
    s = spec.size
    positions = grid_positions(values.shape, s, spec.stride)
    if spec.mask is not None:
        mask = np.asarray(spec.mask, dtype=bool)
        if mask.shape != values.shape:
            raise ValueError("mask shape must match the volume")
        positions = [p for p in positions
                     if mask[p[0]:p[0] + s, p[1]:p[1] + s, p[2]:p[2] + s].all()]
    patches = np.empty((len(positions), s, s, s), dtype=np.float32)
    for i, (x, y, z) in enumerate(positions):
        patches[i] = values[x:x + s, y:y + s, z:z + s]
    return patches, positions


def augment(patch: np.ndarray, k: int) -> np.ndarray:
    """Apply augmentation element ``k`` to a cubic ``[x, y, z]`` array (or a batch of them)."""
    if not 0 <= k < N_AUGMENT:
        raise ValueError(f"augmentation index must lie in [0, 16), got {k}")
    a = np.asarray(patch)
    off = a.ndim - 3
    if a.ndim < 3 or len(set(a.shape[off:])) != 1:
        raise ValueError(f"augmentation needs cubic patches, got shape {a.shape}")
    if (k % 8) // 4:
        a = np.flip(a, axis=off)
    a = np.rot90(a, k % 4, axes=(off, off + 1))
    if k // 8:
        a = np.flip(a, axis=off + 2)
    return np.ascontiguousarray(a)


def augment16(patch: np.ndarray) -> np.ndarray:
    """The 16 group images of a cubic patch, stacked in element order."""
    return np.stack([augment(patch, k) for k in range(N_AUGMENT)])


def transform_matrix(k: int) -> np.ndarray:
    """Signed permutation matrix of element ``k`` acting on centred coordinates."""
    reflect = np.diag([-1, 1, 1])
    # np.rot90 on axes (0, 1) maps index (i, j) -> (n-1-j, i), i.e. (x, y) -> (-y, x)
    quarter = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1]])
    m = np.eye(3, dtype=int)
    if (k % 8) // 4:
        m = reflect @ m
    m = np.linalg.matrix_power(quarter, k % 4) @ m
    if k // 8:
        m = np.diag([1, 1, -1]) @ m
    return m


def composition_table() -> np.ndarray:
    """``table[a, b] = c`` with element c equal to applying b then a."""
    mats = [transform_matrix(k) for k in range(N_AUGMENT)]
    table = np.full((N_AUGMENT, N_AUGMENT), -1, dtype=int)
    for a in range(N_AUGMENT):
        for b in range(N_AUGMENT):
            prod = mats[a] @ mats[b]
            for c, m in enumerate(mats):
                if np.array_equal(prod, m):
                    table[a, b] = c
                    break
    return table


class Augmenter16(TransformerMixin, BaseEstimator):
    """Expand ``(n, s, s, s)`` patches to ``(16 n, s, s, s)``, all elements of patch 0 first."""

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        X = np.asarray(X)
        if X.ndim != 4:
            raise ValueError(f"expected (n, s, s, s) patches, got shape {X.shape}")
        return np.concatenate([augment16(p) for p in X]) if len(X) else X.copy()


class PatchExtractor(TransformerMixin, BaseEstimator):
    """Grid patches from a list of volumes; ``positions_`` holds ``(volume index, origin)``."""

    def __init__(self, size=32, stride=8):
        self.size = size
        self.stride = stride

    def fit(self, X=None, y=None):
        PatchSpec(self.size, self.stride)
        return self

    def transform(self, X):
        self.fit()
        spec = PatchSpec(self.size, self.stride)
        chunks, self.positions_ = [], []
        for i, vol in enumerate(X):
            patches, pos = extract_patches(vol, spec)
            chunks.append(patches)
            self.positions_.extend((i, p) for p in pos)
        if not chunks:
            raise ValueError("no volumes given")
        return np.concatenate(chunks)


def downsample(patches, factor: int) -> np.ndarray:
    """Average-pool the last three axes by an integer factor."""
    a = np.asarray(patches)
    if factor == 1:
        return a.copy()
    *lead, nx, ny, nz = a.shape
    if nx % factor or ny % factor or nz % factor:
        raise ValueError(f"shape {a.shape} is not divisible by {factor}")
    a = a.reshape(*lead, nx // factor, factor, ny // factor, factor, nz // factor, factor)
    off = len(lead)
    return a.mean(axis=(off + 1, off + 3, off + 5))


@dataclass
class PhantomSpec:
    """Random rod-plate phantom. Lengths in voxels, densities in mg/cm³.

    ``plate_normal`` fixes all plate normals (random when None). An infinite
    plate radius makes plates span the box.
    """

    shape: tuple = (64, 64, 64)
    n_plates: int = 35
    n_rods: int = 180
    plate_thickness: tuple = (1.5, 3.0)
    plate_radius: tuple = (5.0, 12.0)
    plate_normal: Optional[tuple] = None
    rod_radius: tuple = (0.9, 1.6)
    rod_length: tuple = (10.0, 40.0)
    rod_vertical_bias: float = 3.0
    bone_density: tuple = (380.0, 650.0)
    background_density: float = 30.0
    blur_sigma: float = 0.6
    noise_sd: float = 25.0
    seed: int = 0
    lo: float = -350.0
    hi: float = 1100.0

    def __post_init__(self):
        self.shape = tuple(int(n) for n in self.shape)
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ValueError(f"degenerate phantom box {self.shape}")
        if self.n_plates < 0 or self.n_rods < 0:
            raise ValueError("element counts must be non-negative")
        cal = CalibrationRange(self.lo, self.hi)
        lo_d, hi_d = self.bone_density
        if not (cal.lo <= lo_d <= hi_d <= cal.hi and cal.lo <= self.background_density <= cal.hi):
            raise ValueError("densities must lie inside the calibration range")
        if self.blur_sigma < 0 or self.noise_sd < 0:
            raise ValueError("blur and noise scales must be non-negative")

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        allowed = set(cls.__dataclass_fields__)
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown PhantomSpec keys: {sorted(unknown)}")
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


def _unit(v):
    return v / np.linalg.norm(v)


def _draw(rng, bounds):
    lo, hi = bounds
    return float(lo) if lo == hi else rng.uniform(lo, hi)


def _plate_mask(coords, rng, spec):
    shape = np.array(spec.shape, dtype=float)
    thickness = _draw(rng, spec.plate_thickness)
    radius = _draw(rng, spec.plate_radius)
    normal = _unit(np.array(spec.plate_normal, dtype=float)) if spec.plate_normal is not None \
        else _unit(rng.normal(size=3))
    centre = np.floor(rng.uniform(thickness / 2, shape - thickness / 2))
    rel = coords - centre
    dist = rel @ normal
    inside = (dist >= -thickness / 2) & (dist < thickness / 2)
    if math.isfinite(radius):
        in_plane = rel - dist[..., None] * normal
        inside &= np.einsum("...i,...i->...", in_plane, in_plane) <= radius * radius
    return inside


def _rod_mask(coords, rng, spec):
    shape = np.array(spec.shape, dtype=float)
    radius = rng.uniform(*spec.rod_radius)
    length = rng.uniform(*spec.rod_length)
    axis = _unit(np.array([0.0, 0.0, spec.rod_vertical_bias]) + rng.normal(size=3))
    centre = rng.uniform(0, shape)
    rel = coords - centre
    along = rel @ axis
    perp = rel - along[..., None] * axis
    return (np.abs(along) <= length / 2) & (np.einsum("...i,...i->...", perp, perp) <= radius * radius)


def phantom_volume(spec: PhantomSpec = PhantomSpec(), voxel_size: float = DEFAULT_VOXEL_SIZE_UM) -> DensityVolume:
    """Deterministic rod-plate phantom.

    Element ``i`` of each kind draws from its own seeded stream, so adding
    elements never moves existing ones and density is pointwise monotone in
    the element counts.
    """
    grids = np.meshgrid(*[np.arange(n) + 0.5 for n in spec.shape], indexing="ij")
    coords = np.stack(grids, axis=-1)
    density = np.full(spec.shape, spec.background_density, dtype=np.float64)
    for i in range(spec.n_plates):
        rng = np.random.default_rng([spec.seed, 0, i])
        mask = _plate_mask(coords, rng, spec)
        density[mask] = np.maximum(density[mask], rng.uniform(*spec.bone_density))
    for i in range(spec.n_rods):
        rng = np.random.default_rng([spec.seed, 1, i])
        mask = _rod_mask(coords, rng, spec)
        density[mask] = np.maximum(density[mask], rng.uniform(*spec.bone_density))
    if spec.blur_sigma > 0:
        density = ndimage.gaussian_filter(density, spec.blur_sigma, mode="nearest")
    if spec.noise_sd > 0:
        density += np.random.default_rng([spec.seed, 2]).normal(0.0, spec.noise_sd, spec.shape)
    np.clip(density, spec.lo, spec.hi, out=density)
    return DensityVolume(density.astype(np.float32), voxel_size, CalibrationRange(spec.lo, spec.hi))


def corpus_size(n_raw: int, augment: bool) -> int:
    return n_raw * N_AUGMENT if augment else n_raw


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _corpus_entries(volumes, spec, augment_flag):
    """Yield (source index, position, transform index, normalized patch, clamp fraction)."""
    for src, vol in enumerate(volumes):
        patches, positions = extract_patches(vol, spec)
        for patch, pos in zip(patches, positions):
            normalized, clamp = normalize_array(patch, vol.calibration)
            for k in (range(N_AUGMENT) if augment_flag else (0,)):
                yield src, pos, k, augment(normalized, k), clamp


def build_corpus(volumes, out_dir, spec: PatchSpec = PatchSpec(), augment: bool = True,
                 names=None) -> dict:
    """Write normalized (optionally 16×-augmented) patches and a manifest.

    ``volumes`` are SVOL paths or :class:`DensityVolume` objects. Only corpora
    built from paths can be rebuilt with :func:`rebuild_corpus`.
    """
    volumes = list(volumes)
    if not volumes:
        raise ValueError("no input volumes")
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        raise FileExistsError(f"output directory {out_dir} already exists and is not empty")
    out_dir.mkdir(parents=True, exist_ok=True)

    sources, loaded = [], []
    for i, v in enumerate(volumes):
        if isinstance(v, DensityVolume):
            name = names[i] if names else f"volume_{i:03d}"
            sources.append({"name": name, "path": None, "sha256": None})
            loaded.append(v)
        else:
            path = Path(v).resolve()
            sources.append({"name": path.stem, "path": str(path), "sha256": _sha256(path)})
            loaded.append(read_svol(path))

    entries, n_raw = [], 0
    for n, (src, pos, k, patch, clamp) in enumerate(_corpus_entries(loaded, spec, augment)):
        fname = f"patch_{n:07d}.svol"
        write_svol(DensityVolume(patch, loaded[src].voxel_size, loaded[src].calibration), out_dir / fname)
        entries.append({"file": fname, "source": src, "position": list(pos), "transform": k,
                        "clamp_fraction": clamp, "sha256": _sha256(out_dir / fname)})
        n_raw += k == 0
    manifest = {
        "format_version": MANIFEST_VERSION,
        "value_space": "normalized",
        "pipeline": {"patch_size": spec.size, "stride": spec.stride, "augment": augment,
                     "masked": spec.mask is not None,
                     "calibration": [loaded[0].calibration.lo, loaded[0].calibration.hi]},
        "sources": sources,
        "raw_count": n_raw,
        "count": len(entries),
        "patches": entries,
    }
    if manifest["count"] != corpus_size(n_raw, augment):
        raise AssertionError("corpus count does not match the augmentation factor")
    (out_dir / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1))
    return manifest


def read_manifest(corpus_dir) -> dict:
    return json.loads((Path(corpus_dir) / MANIFEST_NAME).read_text())


def rebuild_corpus(manifest_path, out_dir) -> dict:
    manifest = json.loads(Path(manifest_path).read_text())
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise ValueError("unsupported manifest version")
    paths = [s["path"] for s in manifest["sources"]]
    if any(p is None for p in paths):
        raise ValueError("corpus was built from in-memory volumes and cannot be rebuilt")
    pipe = manifest["pipeline"]
    if pipe.get("masked"):
        raise ValueError("masked corpora cannot be rebuilt without the mask")
    return build_corpus(paths, out_dir, PatchSpec(pipe["patch_size"], pipe["stride"]), pipe["augment"])


def load_corpus(corpus_dir) -> np.ndarray:
    """Stack all patches of a corpus into an ``(n, s, s, s)`` float32 array."""
    manifest = read_manifest(corpus_dir)
    return np.stack([read_svol(Path(corpus_dir) / e["file"]).values for e in manifest["patches"]])


def phantom_patches(n_volumes: int = 1, spec: PhantomSpec = PhantomSpec(), patch: PatchSpec = PatchSpec(),
                    augment_flag: bool = True) -> np.ndarray:
    """In-memory normalized corpus from ``n_volumes`` phantoms with consecutive seeds."""
    base = spec.to_dict()
    vols = [phantom_volume(PhantomSpec.from_dict({**base, "seed": spec.seed + i})) for i in range(n_volumes)]
    return np.stack([p for _, _, _, p, _ in _corpus_entries(vols, patch, augment_flag)])
