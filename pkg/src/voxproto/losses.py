"""Training objectives: semantic CE, auxiliary occupancy BCE, PBCL, and the weighted total."""

import math
from dataclasses import dataclass

import numpy as np

from ._ops import PROB_CLAMP, log_softmax, safe_normalize, safe_normalize_backward, sigmoid
from .prototype_bank import PrototypeBank, normalized_prototypes, usable_mask
from .voxel_core import EMPTY, IGNORE

LOG_CLAMP = math.log(PROB_CLAMP)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, part, value):
        super().__init__(f"loss part {part!r} is not finite ({value})")
        self.part = part


@dataclass(frozen=True)
class LossWeights:
    w_sem: float = 1.0
    w_aux: float = 0.2
    w_tail: float = 1.0
    w_proto: float = 1.0
    tau_cl: float = 0.1

    def __post_init__(self):
        if min(self.w_sem, self.w_aux, self.w_tail, self.w_proto) < 0:
            raise ValueError("loss weights must be non-negative")
        if not self.tau_cl > 0:
            raise ValueError("tau_cl must be positive")


def cross_entropy(logits, targets):
    """Mean CE and its gradient w.r.t. ``logits``.

    Log-probabilities are clamped at ``log(1e-12)``; clamped rows carry no
    gradient.
    """
    logits = np.asarray(logits, dtype=np.float64)
    n = logits.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(logits)
    logp = log_softmax(logits, axis=1)
    rows = np.arange(n)
    picked = logp[rows, targets]
    live = picked > LOG_CLAMP
    loss = float(-np.where(live, picked, LOG_CLAMP).mean())
    grad = np.exp(logp)
    grad[rows, targets] -= 1.0
    grad[~live] = 0.0
    return loss, grad / n


def semantic_ce_loss(logits, labels):
    """CE over classes ``0..k_cls`` on non-IGNORE voxels; ``logits`` has k_cls+1 columns."""
    y = np.asarray(labels).reshape(-1)
    keep = y != IGNORE
    grad = np.zeros_like(np.asarray(logits, dtype=np.float64))
    loss, g = cross_entropy(np.asarray(logits)[keep], y[keep])
    grad[keep] = g
    return loss, grad


def aux_occupancy_loss(features, head, labels):
    """Mean BCE of ``sigmoid(head(x))`` against ``1{y > 0}``, IGNORE excluded.

    Returns ``(loss, grads)`` with ``weight`` and ``bias`` entries for the
    occupancy head.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).reshape(-1)
    keep = y != IGNORE
    grads = {"weight": np.zeros_like(head.weight), "bias": 0.0}
    n = int(keep.sum())
    if n == 0:
        return 0.0, grads
    z = head.logits(x[keep])
    target = (y[keep] != EMPTY).astype(np.float64)
    loss, dz = occupancy_bce(sigmoid(z), target)
    grads["weight"] = x[keep].T @ dz
    grads["bias"] = float(dz.sum())
    return loss, grads


def occupancy_bce(occ, target):
    """Mean BCE on probabilities clamped to ``[1e-12, 1 - 1e-12]``.

    The returned gradient is w.r.t. the pre-sigmoid logit, zero where a clamp
    is active.
    """
    occ = np.asarray(occ, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    p = np.clip(occ, PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = float(-(target * np.log(p) + (1 - target) * np.log1p(-p)).mean())
    live = (occ > PROB_CLAMP) & (occ < 1.0 - PROB_CLAMP)
    dz = np.where(live, occ - target, 0.0) / occ.size
    return loss, dz


def pbcl_loss(refined, labels, bank: PrototypeBank, tau_cl):
    """Prototype contrastive loss over labelled non-empty voxels of usable classes.

    Prototypes are constants: the returned ``prototypes`` gradient is
    identically zero. Returns ``(loss, grads)`` with ``refined`` and
    ``prototypes`` entries.
    """
    x = np.asarray(refined, dtype=np.float64)
    y = np.asarray(labels).reshape(-1)
    grads = {"refined": np.zeros_like(x), "prototypes": np.zeros_like(bank.prototypes)}
    usable = usable_mask(bank)
    labelled = (y != IGNORE) & (y != EMPTY)
    in_s = np.zeros_like(labelled)
    in_s[labelled] = usable[y[labelled] - 1]
    idx = np.flatnonzero(in_s)
    if idx.size == 0:
        return 0.0, grads
    unit, norms = safe_normalize(x[idx])
    pbar = normalized_prototypes(bank)
    loss, g_logits = cross_entropy(unit @ pbar.T / tau_cl, y[idx] - 1)
    g_unit = (g_logits / tau_cl) @ pbar
    grads["refined"][idx] = safe_normalize_backward(g_unit, unit, norms)
    return loss, grads


PARTS = ("sem", "aux", "tail", "proto")


def total_loss(parts: dict, weights: LossWeights) -> float:
    for name in PARTS:
        value = parts.get(name, 0.0)
        if not math.isfinite(value):
            raise NonFiniteLossError(name, value)
    return (
        weights.w_sem * parts.get("sem", 0.0)
        + weights.w_aux * parts.get("aux", 0.0)
        + weights.w_tail * parts.get("tail", 0.0)
        + weights.w_proto * parts.get("proto", 0.0)
    )
