"""Prototype-guided imputation of unobserved but likely occupied voxels."""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ._ops import sigmoid, softmax
from .prototype_bank import PrototypeBank, usable_classes


@dataclass(frozen=True)
class PgsiConfig:
    tau_att: float = 1.0
    alpha_pgsi: float = 0.2
    theta: float = 0.5

    def __post_init__(self):
        if not self.tau_att > 0:
            raise ValueError("tau_att must be positive")
        if not 0 < self.theta < 1:
            raise ValueError("theta must lie in (0, 1)")


@dataclass(frozen=True, eq=False)
class OccupancyMap:
    occ: np.ndarray  # (n_voxels,) in [0, 1]
    visible: np.ndarray  # (n_voxels,) bool
    theta: float = 0.5

    def __post_init__(self):
        occ = np.asarray(self.occ, dtype=np.float64).reshape(-1)
        if np.any((occ < 0) | (occ > 1)):
            raise ValueError("occupancy probabilities must lie in [0, 1]")
        object.__setattr__(self, "occ", occ)
        object.__setattr__(self, "visible", np.asarray(self.visible, dtype=bool).reshape(-1))


@dataclass(eq=False)
class OccupancyHead:
    """Affine map R^C -> R followed by a logistic."""

    weight: np.ndarray  # (C,)
    bias: float = 0.0

    def logits(self, features):
        x = np.asarray(features, dtype=np.float64)
        if x.shape[1] != self.weight.shape[0]:
            raise ValueError(
                f"occupancy head expects {self.weight.shape[0]} channels, got {x.shape[1]}"
            )
        return x @ self.weight + self.bias


def occupancy_probability(coarse, occ_head: OccupancyHead) -> np.ndarray:
    return sigmoid(occ_head.logits(coarse))


def unobserved_set(occ_map: OccupancyMap) -> np.ndarray:
    """Sorted voxel indices with ``occ > theta`` outside the visible set."""
    return np.flatnonzero((occ_map.occ > occ_map.theta) & ~occ_map.visible)


class Imputation(NamedTuple):
    features: np.ndarray
    indices: np.ndarray  # voxels actually updated
    attention: np.ndarray  # (len(indices), n_usable)
    classes: np.ndarray  # class ids the attention columns refer to
    context: np.ndarray  # sum_k a_ik p_k for each updated voxel
    skipped: bool  # True when no prototype was usable


def prototype_attention(x, protos, tau_att):
    d2 = ((x[:, None, :] - protos[None, :, :]) ** 2).sum(axis=2)
    return softmax(-d2 / tau_att, axis=1)


def impute(coarse, unobserved, bank: PrototypeBank, cfg: PgsiConfig, alpha=None) -> Imputation:
    """Residual prototype attention on the voxels in ``unobserved``.

    Attention ranges over usable prototypes only. ``alpha`` overrides
    ``cfg.alpha_pgsi`` (the trainer learns it). Voxels outside the set are
    returned bit-identical.
    """
    x = np.asarray(coarse, dtype=np.float64)
    idx = np.asarray(unobserved, dtype=np.int64).reshape(-1)
    alpha = cfg.alpha_pgsi if alpha is None else float(alpha)
    classes = np.array(sorted(usable_classes(bank)), dtype=np.int64)
    out = x.copy()
    if classes.size == 0:
        return Imputation(out, idx[:0], np.zeros((0, 0)), classes, np.zeros((0, x.shape[1])), True)
    protos = bank.prototypes[classes - 1]
    attn = prototype_attention(x[idx], protos, cfg.tau_att)
    context = attn @ protos
    out[idx] = x[idx] + alpha * context
    return Imputation(out, idx, attn, classes, context, False)
