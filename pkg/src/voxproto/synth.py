"""Seeded long-tailed voxel scenes with class-conditional Gaussian features.

Stands in for the image backbone and view transformation: each class owns a
mean feature vector, an extra held-out mean produces the anomalies.
"""

import json
import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .metrics import AnomalyGroundTruth
from .voxel_core import EMPTY, IGNORE, GridDims, LabelVolume

DEFAULT_CLASS_MIX = (0.18, 0.12, 0.08, 0.05, 0.03, 0.004, 0.003, 0.002)
MIX_TOLERANCE = 0.2
_PLACEMENT_TRIES = 200
_SEED_MASK = (1 << 64) - 1


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    dims: GridDims = GridDims(32, 32, 8, 0.2)
    k_cls: int = 8
    class_mix: tuple = DEFAULT_CLASS_MIX
    blob_count_per_class: int = 2
    ood_count: int = 2
    ood_size: tuple = (3, 5)  # inclusive edge-length range in voxels
    occlusion_fraction: float = 0.3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "class_mix", tuple(float(f) for f in self.class_mix))
        object.__setattr__(self, "ood_size", tuple(int(s) for s in self.ood_size))
        if len(self.class_mix) != self.k_cls:
            raise SynthConfigError(f"class_mix has {len(self.class_mix)} entries, k_cls={self.k_cls}")
        if any(not 0 <= f <= 1 for f in self.class_mix):
            raise SynthConfigError("class_mix fractions must lie in [0, 1]")
        if not 0 <= self.occlusion_fraction <= 1:
            raise SynthConfigError("occlusion_fraction must lie in [0, 1]")
        if self.blob_count_per_class < 1 or self.ood_count < 0:
            raise SynthConfigError("blob counts must be positive (ood_count may be 0)")
        lo, hi = self.ood_size
        if not 1 <= lo <= hi:
            raise SynthConfigError("ood_size must be an increasing pair of positive ints")
        if self.k_cls >= IGNORE:
            raise SynthConfigError("k_cls must stay below the IGNORE id")

    def with_seed(self, seed):
        return SceneSpec(**{**self.__dict__, "seed": int(seed) & _SEED_MASK})

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        raw = json.loads(text)
        raw["dims"] = GridDims(**raw["dims"])
        return cls(**raw)


@dataclass(frozen=True, eq=False)
class FeatureModel:
    class_means: np.ndarray  # (k_cls, C); row k-1 is class k
    ood_mean: np.ndarray  # (C,), never seen by any learner
    sigma: float = 0.5
    separation: float = 0.0

    def __post_init__(self):
        if not self.sigma >= 0:
            raise SynthConfigError("sigma must be non-negative")
        means = np.asarray(self.class_means, dtype=np.float64)
        if pairwise_min_distance(means) < self.separation:
            raise SynthConfigError("class means violate the separation bound")
        object.__setattr__(self, "class_means", means)
        object.__setattr__(self, "ood_mean", np.asarray(self.ood_mean, dtype=np.float64))

    @property
    def channels(self):
        return self.class_means.shape[1]

    @property
    def k_cls(self):
        return self.class_means.shape[0]


def pairwise_min_distance(points):
    if len(points) < 2:
        return math.inf
    d = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=2)
    return float(d[np.triu_indices(len(points), 1)].min())


def make_feature_model(k_cls=8, channels=16, mean_norm=5.0, sigma=0.5, separation=None,
                       ood_margin=4.0, shared_norm=0.0, seed=0, max_tries=1000) -> FeatureModel:
    """Random class means on a sphere of radius ``mean_norm``.

    The OOD mean sits at least ``ood_margin * sigma`` (and at least
    ``separation``) from every class mean. A common offset of norm
    ``shared_norm`` is added to every mean, OOD included: it carries the
    "something is here" evidence that is independent of class identity.
    """
    if separation is None:
        separation = 0.5 * mean_norm
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        pts = rng.normal(size=(k_cls + 1, channels))
        pts *= mean_norm / np.linalg.norm(pts, axis=1, keepdims=True)
        means, ood = pts[:k_cls], pts[k_cls]
        ood_gap = np.linalg.norm(means - ood, axis=1).min()
        if pairwise_min_distance(means) >= separation and ood_gap >= max(ood_margin * sigma, separation):
            shared = rng.normal(size=channels)
            shared *= shared_norm / np.linalg.norm(shared)
            return FeatureModel(means + shared, ood + shared, sigma, separation)
    raise SynthConfigError("could not draw class means meeting the separation bound")


class SyntheticScene(NamedTuple):
    labels: LabelVolume
    visible: np.ndarray  # (n_voxels,) bool
    anomaly: AnomalyGroundTruth


def _box_for(m, shape, rng):
    """Random box extents (a, b, c) with a*b*c >= m inside ``shape``, or None."""
    X, Y, Z = shape
    c = int(min(Z, max(1, round(m ** (1 / 3)))))
    for _ in range(3):
        ratio = rng.uniform(0.7, 1.4)
        a = int(min(X, max(1, math.ceil(math.sqrt(m / c) * ratio))))
        b = int(min(Y, max(1, math.ceil(m / (a * c)))))
        while a * b * c < m and c < Z:
            c += 1
        if a * b * c >= m:
            return a, b, c
        c = Z
    return None


def _place(grid_free, ext, m, rng):
    """First ``m`` raster-ordered voxels of a free box of extents ``ext``, or None."""
    shape = grid_free.shape
    a, b, c = ext
    for _ in range(_PLACEMENT_TRIES):
        x0 = rng.integers(0, shape[0] - a + 1)
        y0 = rng.integers(0, shape[1] - b + 1)
        z0 = rng.integers(0, shape[2] - c + 1)
        box = grid_free[x0:x0 + a, y0:y0 + b, z0:z0 + c]
        if box.all():
            xs, ys, zs = np.meshgrid(np.arange(x0, x0 + a), np.arange(y0, y0 + b),
                                     np.arange(z0, z0 + c), indexing="ij")
            flat = np.ravel_multi_index((xs.ravel(), ys.ravel(), zs.ravel()), shape)
            return flat[:m]
    return None


def _place_split(grid_free, m, rng):
    """Place ``m`` voxels as one blob, halving into smaller blobs on failure."""
    ext = _box_for(m, grid_free.shape, rng)
    idx = None if ext is None else _place(grid_free, ext, m, rng)
    if idx is not None:
        grid_free.reshape(-1)[idx] = False
        return [idx]
    if m == 1:
        raise SynthConfigError("grid too crowded to place every blob")
    half = m // 2
    return _place_split(grid_free, half, rng) + _place_split(grid_free, m - half, rng)


def generate_scene(spec: SceneSpec) -> SyntheticScene:
    dims = spec.dims
    n = dims.n_voxels
    rng = np.random.default_rng(spec.seed)
    targets = [int(round(f * n)) if f > 0 else 0 for f in spec.class_mix]
    targets = [max(t, 1) if f > 0 else 0 for t, f in zip(targets, spec.class_mix)]
    ood_max = spec.ood_count * min(spec.ood_size[1], dims.x) * min(spec.ood_size[1], dims.y) * \
        min(spec.ood_size[1], dims.z)
    if sum(targets) + ood_max > n:
        raise SynthConfigError(f"requested {sum(targets) + ood_max} voxels on a {n}-voxel grid")

    free = np.ones(dims.shape, dtype=bool)
    labels = np.full(n, EMPTY, dtype=np.int64)
    is_ood = np.zeros(n, dtype=bool)

    for _ in range(spec.ood_count):
        lo, hi = spec.ood_size
        ext = [min(int(rng.integers(lo, hi + 1)), s) for s in dims.shape]
        idx = _place(free, ext, ext[0] * ext[1] * ext[2], rng)
        if idx is None:
            raise SynthConfigError("could not place an anomaly blob")
        free.reshape(-1)[idx] = False
        is_ood[idx] = True

    order = sorted(range(spec.k_cls), key=lambda k: -targets[k])
    for k in order:
        total = targets[k]
        if total == 0:
            continue
        blobs = min(spec.blob_count_per_class, total)
        sizes = [total // blobs + (1 if i < total % blobs else 0) for i in range(blobs)]
        for m in sizes:
            for idx in _place_split(free, m, rng):
                labels[idx] = k + 1

    labels[is_ood] = IGNORE
    visible = np.ones(n, dtype=bool)
    nonempty = np.flatnonzero((labels != EMPTY))
    n_hidden = int(round(spec.occlusion_fraction * nonempty.size))
    if n_hidden:
        visible[rng.choice(nonempty, size=n_hidden, replace=False)] = False
    return SyntheticScene(LabelVolume(dims, labels), visible, AnomalyGroundTruth(dims, is_ood))


def generate_features(labels, gt_ood, model: FeatureModel, seed, visible=None,
                      occluded_gain=1.0) -> np.ndarray:
    """``mean[class] + N(0, sigma^2 I)`` per non-empty voxel, zero on empty voxels.

    Anomaly voxels draw around ``model.ood_mean``. When ``visible`` is given,
    hidden voxels are scaled by ``occluded_gain`` to mimic weak evidence
    behind occluders.
    """
    y = np.asarray(labels).reshape(-1)
    ood = np.asarray(getattr(gt_ood, "is_ood", gt_ood), dtype=bool).reshape(-1)
    known = (y != EMPTY) & (y != IGNORE)
    if known.any() and y[known].max() > model.k_cls:
        raise SynthConfigError(f"label {y[known].max()} has no class mean")
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, 1.0, (y.size, model.channels)) * model.sigma
    x = np.zeros((y.size, model.channels))
    x[known] = model.class_means[y[known] - 1] + noise[known]
    x[ood] = model.ood_mean + noise[ood]
    if visible is not None:
        hidden = ~np.asarray(visible, dtype=bool).reshape(-1)
        x[hidden] *= occluded_gain
    return x


def scene_seed(base_seed, index):
    return (int(base_seed) ^ int(index)) & _SEED_MASK
