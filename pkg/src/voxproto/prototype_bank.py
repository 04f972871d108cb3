"""Global EMA class prototypes with maturity gating, and scene-local prototypes."""

from dataclasses import dataclass, field, replace

import numpy as np

from ._ops import NORM_EPS, softmax
from .voxel_core import EMPTY, IGNORE

DEFAULT_BETA = 0.05
DEFAULT_T_WARM = 750
DEFAULT_THETA_MAX = 0.7
DEFAULT_THETA_MIN = 0.3
DEFAULT_N_MIN = 2
QUALITY_EPS = 1e-8


@dataclass(frozen=True, eq=False)
class PrototypeBank:
    """One global prototype per non-empty class; row ``k - 1`` holds class ``k``.

    ``theta_min`` is carried as configuration only; the gate compares
    against ``theta_max``.
    """

    prototypes: np.ndarray  # (k_cls, C)
    beta: float = DEFAULT_BETA
    t: int = 0
    t_warm: int = DEFAULT_T_WARM
    theta_max: float = DEFAULT_THETA_MAX
    theta_min: float = DEFAULT_THETA_MIN
    n_min: int = DEFAULT_N_MIN
    eps: float = QUALITY_EPS
    norm_eps: float = NORM_EPS
    last_quality: np.ndarray = field(default=None)  # NaN where never seen
    last_count: np.ndarray = field(default=None)
    initialized: np.ndarray = field(default=None)

    def __post_init__(self):
        protos = np.array(self.prototypes, dtype=np.float64)
        if protos.ndim != 2:
            raise ValueError("prototypes must be (k_cls, channels)")
        k = protos.shape[0]
        if not 0 < self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")
        if not self.eps > 0 or not self.norm_eps > 0:
            raise ValueError("eps must be positive")
        if self.n_min < 1:
            raise ValueError("n_min must be >= 1")
        object.__setattr__(self, "prototypes", protos)
        defaults = {
            "last_quality": np.full(k, np.nan),
            "last_count": np.zeros(k, dtype=np.int64),
            "initialized": np.zeros(k, dtype=bool),
        }
        for name, default in defaults.items():
            value = getattr(self, name)
            value = default if value is None else np.array(value, dtype=default.dtype)
            if value.shape != (k,):
                raise ValueError(f"{name} must have one entry per class")
            object.__setattr__(self, name, value)

    @classmethod
    def empty(cls, k_cls, channels, **kwargs):
        return cls(np.zeros((k_cls, channels)), **kwargs)

    @property
    def k_cls(self):
        return self.prototypes.shape[0]

    @property
    def channels(self):
        return self.prototypes.shape[1]


def ema_update(bank: PrototypeBank, features, labels) -> PrototypeBank:
    """One EMA step from ground-truth voxels of the current batch.

    Feature values are read only; nothing here participates in
    differentiation. A class seen for the first time is set to its batch mean.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).reshape(-1)
    if x.ndim != 2 or x.shape[1] != bank.channels:
        raise ValueError(
            f"feature channels {x.shape[-1]} do not match bank channels {bank.channels}"
        )
    if x.shape[0] != y.shape[0]:
        raise ValueError("features and labels cover different voxel counts")

    protos = bank.prototypes.copy()
    quality = bank.last_quality.copy()
    count = bank.last_count.copy()
    init = bank.initialized.copy()
    for k in range(1, bank.k_cls + 1):
        members = x[y == k]
        n = members.shape[0]
        if n == 0:
            continue
        mean = members.mean(axis=0)
        if init[k - 1]:
            protos[k - 1] = protos[k - 1] + bank.beta * (mean - protos[k - 1])
        else:
            protos[k - 1] = mean
            init[k - 1] = True
        var = members.var(axis=0).mean()
        quality[k - 1] = 1.0 / (var + bank.eps)
        count[k - 1] = n
    return replace(
        bank,
        prototypes=protos,
        t=bank.t + 1,
        last_quality=quality,
        last_count=count,
        initialized=init,
    )


def usable_classes(bank: PrototypeBank) -> frozenset:
    if bank.t < bank.t_warm:
        return frozenset()
    with np.errstate(invalid="ignore"):
        ok = (
            bank.initialized
            & (bank.last_quality > bank.theta_max)
            & (bank.last_count >= bank.n_min)
        )
    return frozenset(int(k) + 1 for k in np.flatnonzero(ok))


def usable_mask(bank: PrototypeBank) -> np.ndarray:
    mask = np.zeros(bank.k_cls, dtype=bool)
    for k in usable_classes(bank):
        mask[k - 1] = True
    return mask


def normalized_prototype(bank: PrototypeBank, k) -> np.ndarray:
    p = bank.prototypes[k - 1]
    return p / max(float(np.linalg.norm(p)), bank.norm_eps)


def normalized_prototypes(bank: PrototypeBank) -> np.ndarray:
    norms = np.maximum(np.linalg.norm(bank.prototypes, axis=1), bank.norm_eps)
    return bank.prototypes / norms[:, None]


@dataclass(frozen=True, eq=False)
class LocalPrototypeSet:
    """Scene-local prototypes from confidently predicted voxels.

    Arrays are indexed by ``k - 1``; rows are NaN where a class has no support
    (prototypes) or no predicted voxels (mean logits).
    """

    local_prototypes: np.ndarray  # (k_cls, C)
    support_counts: np.ndarray  # (k_cls,)
    mean_logits: np.ndarray  # (k_cls, k_cls)
    tau_conf: float

    def has_prototype(self, k):
        return self.support_counts[k - 1] > 0

    def has_mean_logit(self, k):
        return not np.isnan(self.mean_logits[k - 1, 0])


def confidence_gap(logits) -> np.ndarray:
    """Top-1 minus top-2 softmax probability per row."""
    p = softmax(logits, axis=1)
    if p.shape[1] < 2:
        return p[:, 0]
    top2 = np.partition(p, -2, axis=1)[:, -2:]
    return top2[:, 1] - top2[:, 0]


def build_local_prototypes(features, predictions, logits, tau_conf) -> LocalPrototypeSet:
    """Local prototypes over ``{j : pred_j = k and gap_j > tau_conf}``.

    ``mean_logits`` averages every voxel predicted as ``k`` with no gap filter.
    """
    if not 0 < tau_conf < 1:
        raise ValueError("tau_conf must lie in (0, 1)")
    x = np.asarray(features, dtype=np.float64)
    pred = np.asarray(predictions).reshape(-1)
    lg = np.asarray(logits, dtype=np.float64)
    k_cls = lg.shape[1]
    gap = confidence_gap(lg)

    local = np.full((k_cls, x.shape[1]), np.nan)
    counts = np.zeros(k_cls, dtype=np.int64)
    means = np.full((k_cls, k_cls), np.nan)
    for k in range(1, k_cls + 1):
        predicted = pred == k
        if not predicted.any():
            continue
        means[k - 1] = lg[predicted].mean(axis=0)
        confident = predicted & (gap > tau_conf)
        counts[k - 1] = int(confident.sum())
        if counts[k - 1]:
            local[k - 1] = x[confident].mean(axis=0)
    return LocalPrototypeSet(local, counts, means, float(tau_conf))


def ground_truth_mask(labels):
    y = np.asarray(labels).reshape(-1)
    return (y != EMPTY) & (y != IGNORE)
