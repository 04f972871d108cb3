"""Dense voxel-grid data model and class catalog.

Every volume is stored flat in C order with ``z`` varying fastest, so the
row index of a per-voxel array is :func:`linear_index` of the voxel.
"""

from dataclasses import dataclass, field

import numpy as np

IGNORE = 255
EMPTY = 0

# Dataset tail thresholds (fraction of labelled points).
TAIL_THRESHOLD_KITTI = 0.006
TAIL_THRESHOLD_KITTI360 = 0.003

SEMANTIC_KITTI_DISTRIBUTION = {
    "road": 0.1530,
    "sidewalk": 0.1113,
    "parking": 0.0112,
    "other-ground": 0.0056,
    "building": 0.1410,
    "car": 0.0392,
    "truck": 0.0016,
    "bicycle": 0.0003,
    "motorcycle": 0.0003,
    "other-vehicle": 0.0020,
    "vegetation": 0.3930,
    "trunk": 0.0051,
    "terrain": 0.0917,
    "person": 0.0007,
    "bicyclist": 0.0007,
    "motorcyclist": 0.0005,
    "fence": 0.0390,
    "pole": 0.0029,
    "traffic-sign": 0.0008,
}

KITTI360_DISTRIBUTION = {
    "car": 0.0285,
    "bicycle": 0.0001,
    "motorcycle": 0.0001,
    "truck": 0.0016,
    "other-vehicle": 0.0575,
    "person": 0.0002,
    "road": 0.1498,
    "parking": 0.0231,
    "sidewalk": 0.0643,
    "other-ground": 0.0205,
    "building": 0.1567,
    "fence": 0.0096,
    "vegetation": 0.4199,
    "terrain": 0.0710,
    "pole": 0.0022,
    "traffic-sign": 0.0006,
    "other-structure": 0.0433,
    "other-object": 0.0028,
}


class EmptyInputError(ValueError):
    pass


@dataclass(frozen=True)
class GridDims:
    x: int
    y: int
    z: int
    voxel_size: float = 0.2

    def __post_init__(self):
        if min(self.x, self.y, self.z) <= 0:
            raise ValueError(f"grid extents must be positive, got {self.shape}")
        if not self.voxel_size > 0:
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size}")

    @property
    def shape(self):
        return (self.x, self.y, self.z)

    @property
    def n_voxels(self):
        return self.x * self.y * self.z


def linear_index(pos, dims: GridDims) -> int:
    x, y, z = (int(v) for v in pos)
    for v, n, axis in ((x, dims.x, "x"), (y, dims.y, "y"), (z, dims.z, "z")):
        if not 0 <= v < n:
            raise IndexError(f"{axis}={v} outside [0, {n})")
    return (x * dims.y + y) * dims.z + z


def grid_position(index: int, dims: GridDims):
    """Inverse of :func:`linear_index`."""
    if not 0 <= index < dims.n_voxels:
        raise IndexError(f"index {index} outside [0, {dims.n_voxels})")
    rest, z = divmod(int(index), dims.z)
    x, y = divmod(rest, dims.y)
    return (x, y, z)


def _check_rows(arr, dims, what):
    if arr.shape[0] != dims.n_voxels:
        raise ValueError(f"{what} has {arr.shape[0]} rows, grid has {dims.n_voxels} voxels")


@dataclass(frozen=True, eq=False)
class FeatureVolume:
    dims: GridDims
    values: np.ndarray  # (n_voxels, C) float64

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError("feature values must be (n_voxels, channels)")
        _check_rows(values, self.dims, "feature volume")
        if not np.all(np.isfinite(values)):
            raise ValueError("feature volume contains non-finite values")
        object.__setattr__(self, "values", values)

    @property
    def channels(self):
        return self.values.shape[1]

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


@dataclass(frozen=True, eq=False)
class LabelVolume:
    dims: GridDims
    labels: np.ndarray  # (n_voxels,) int64, values in 0..k_cls or IGNORE

    def __post_init__(self):
        labels = np.asarray(self.labels).astype(np.int64).reshape(-1)
        _check_rows(labels, self.dims, "label volume")
        object.__setattr__(self, "labels", labels)

    def __array__(self, dtype=None, copy=None):
        return self.labels if dtype is None else self.labels.astype(dtype)


@dataclass(frozen=True, eq=False)
class LogitVolume:
    dims: GridDims
    logits: np.ndarray  # (n_voxels, k_cls)

    def __post_init__(self):
        logits = np.asarray(self.logits, dtype=np.float64)
        _check_rows(logits, self.dims, "logit volume")
        if not np.all(np.isfinite(logits)):
            raise ValueError("logit volume contains non-finite values")
        object.__setattr__(self, "logits", logits)

    def __array__(self, dtype=None, copy=None):
        return self.logits if dtype is None else self.logits.astype(dtype)


@dataclass(frozen=True)
class ClassCatalog:
    k_cls: int
    frequencies: tuple  # index k-1 holds class k
    tail_threshold: float
    names: tuple = field(default=())

    @property
    def tail_set(self):
        return frozenset(
            k + 1 for k, f in enumerate(self.frequencies) if f < self.tail_threshold
        )

    def name(self, k):
        return self.names[k - 1] if self.names else f"class_{k}"


def compute_class_catalog(labels, k_cls, tail_threshold, names=()) -> ClassCatalog:
    """Per-class voxel frequencies over non-IGNORE voxels, class 0 in the denominator."""
    if not 0 < tail_threshold < 1:
        raise ValueError("tail_threshold must lie in (0, 1)")
    lab = np.asarray(labels).reshape(-1)
    valid = lab[lab != IGNORE]
    if valid.size == 0:
        raise EmptyInputError("every voxel is IGNORE")
    counts = np.bincount(valid, minlength=k_cls + 1)[: k_cls + 1]
    freqs = tuple(float(c) / valid.size for c in counts[1:])
    return ClassCatalog(k_cls, freqs, float(tail_threshold), tuple(names))


def catalog_from_distribution(distribution: dict, tail_threshold) -> ClassCatalog:
    """Catalog built from a published class-distribution table."""
    names = tuple(distribution)
    return ClassCatalog(
        len(names), tuple(float(v) for v in distribution.values()), tail_threshold, names
    )
