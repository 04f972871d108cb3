"""Training-free voxel anomaly scoring from local and global prototype cues.

Raw component scores are cosine distances in ``[0, 2]`` defined on voxels
predicted non-empty. Each component is min-max normalized per scene, the
three are fused by elementwise max, and voxels predicted empty inherit the
scene's minimum fused score.
"""

from dataclasses import dataclass

import numpy as np

from ._ops import cosine
from .prototype_bank import LocalPrototypeSet, PrototypeBank, build_local_prototypes, usable_mask
from .voxel_core import EMPTY

COMPONENTS = ("local_logit", "local_proto", "global_proto")
DEFAULT_TAU_CONF = 0.3


@dataclass(frozen=True, eq=False)
class ScoreMap:
    """Per-voxel scores; component arrays are zero on voxels predicted empty."""

    local_logit: np.ndarray
    local_proto: np.ndarray
    global_proto: np.ndarray
    fused: np.ndarray
    normalized: bool = False
    warning: str = ""

    def stack(self):
        """(n_voxels, 4) array: the three components then the fused score."""
        return np.stack([self.local_logit, self.local_proto, self.global_proto, self.fused], axis=1)


def _distance_to_reference(values, predictions, reference, available):
    """``1 - cos(v_i, ref[pred_i])`` on non-empty predictions.

    Voxels whose reference row is unavailable get the component's maximum
    over the voxels that do have one (0 if none do).
    """
    v = np.asarray(values, dtype=np.float64)
    pred = np.asarray(predictions).reshape(-1)
    out = np.zeros(pred.shape[0])
    occupied = pred != EMPTY
    have = np.zeros_like(occupied)
    have[occupied] = available[pred[occupied] - 1]
    if have.any():
        ref = reference[pred[have] - 1]
        out[have] = 1.0 - cosine(v[have], ref)
    missing = occupied & ~have
    if missing.any():
        out[missing] = out[have].max() if have.any() else 0.0
    return out


def local_logit_score(logits, predictions, mean_logits):
    means = np.asarray(mean_logits, dtype=np.float64)
    available = ~np.isnan(means).any(axis=1)
    return _distance_to_reference(logits, predictions, np.nan_to_num(means), available)


def local_proto_score(features, predictions, local: LocalPrototypeSet):
    available = local.support_counts > 0
    return _distance_to_reference(
        features, predictions, np.nan_to_num(local.local_prototypes), available
    )


def global_proto_score(features, predictions, bank: PrototypeBank):
    """Only prototypes that pass the maturity gate are consulted."""
    return _distance_to_reference(features, predictions, bank.prototypes, usable_mask(bank))


# Components are cosine distances in [0, 2]; a spread below this is round-off.
CONSTANT_SPAN = 1e-12


def minmax_normalize(raw, support):
    """Scale ``raw`` to ``[0, 1]`` over ``support``; a constant component maps to 0."""
    out = np.zeros_like(np.asarray(raw, dtype=np.float64))
    if not support.any():
        return out
    lo = raw[support].min()
    span = raw[support].max() - lo
    if span > CONSTANT_SPAN:
        out[support] = (raw[support] - lo) / span
    return out


def fuse(components: dict, predictions) -> ScoreMap:
    """Normalize each raw component and fuse by max; empty voxels get the scene minimum."""
    pred = np.asarray(predictions).reshape(-1)
    occupied = pred != EMPTY
    norm = {name: minmax_normalize(components[name], occupied) for name in COMPONENTS}
    fused = np.zeros(pred.shape[0])
    warning = ""
    if occupied.any():
        stacked = np.stack([norm[name][occupied] for name in COMPONENTS], axis=0)
        fused[occupied] = stacked.max(axis=0)
        fused[~occupied] = fused[occupied].min()
    else:
        warning = "scene has no non-empty predictions"
    return ScoreMap(norm["local_logit"], norm["local_proto"], norm["global_proto"], fused,
                    normalized=True, warning=warning)


def score_scene(features, logits, predictions, bank: PrototypeBank,
                tau_conf=DEFAULT_TAU_CONF) -> ScoreMap:
    """Full scoring pass. ``logits`` covers classes ``1..k_cls`` only."""
    local = build_local_prototypes(features, predictions, logits, tau_conf)
    raw = {
        "local_logit": local_logit_score(logits, predictions, local.mean_logits),
        "local_proto": local_proto_score(features, predictions, local),
        "global_proto": global_proto_score(features, predictions, bank),
    }
    return fuse(raw, predictions)
